//! Dense displacement fields: pull-back warping with linear interpolation,
//! the diffusion smoothness energy and log-Jacobian-determinant maps.
//!
//! A field `u` has one channel per spatial axis, in voxel units, and maps
//! output voxel `v` to source location `v + u(v)`. Samples falling outside
//! the grid are clamped to the border.

use cfsim_tensor::{Backward, BackwardCtx, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

/// Determinant floor applied before taking the logarithm.
pub const DET_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct WarpField<T> {
    /// `[d, spatial...]`
    u: Tensor<T>,
}

impl<T: Real> WarpField<T> {
    pub fn new(u: Tensor<T>) -> Result<Self> {
        let shape = u.shape();
        if shape.len() < 2 || shape[0] != shape.len() - 1 {
            return Err(Error::DimensionMismatch(format!(
                "warp field needs one channel per spatial axis, got shape {shape:?}"
            )));
        }
        if !u.is_finite() {
            return Err(Error::InvalidParameter("warp field contains non-finite values".into()));
        }
        Ok(Self { u })
    }

    pub fn zeros(grid: &[usize]) -> Self {
        let mut shape = vec![grid.len()];
        shape.extend_from_slice(grid);
        Self {
            u: Tensor::zeros(&shape),
        }
    }

    /// Field whose channel `a` at voxel `v` is `f(v)[a]`.
    pub fn from_fn(grid: &[usize], f: impl Fn(&[usize]) -> Vec<f64>) -> Self {
        let d = grid.len();
        let p: usize = grid.iter().product();
        let mut field = Self::zeros(grid);
        let data = field.u.data_mut();
        let mut coord = vec![0; d];
        for i in 0..p {
            unravel(i, grid, &mut coord);
            let v = f(&coord);
            for a in 0..d {
                data[a * p + i] = T::from_f64_lossy(v[a]);
            }
        }
        field
    }

    pub fn dims(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn grid(&self) -> &[usize] {
        &self.u.shape()[1..]
    }

    pub fn displacement(&self) -> &Tensor<T> {
        &self.u
    }

    pub fn into_inner(self) -> Tensor<T> {
        self.u
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { u: self.u.scale(s) }
    }
}

fn unravel(mut index: usize, shape: &[usize], out: &mut [usize]) {
    for a in (0..shape.len()).rev() {
        out[a] = index % shape[a];
        index /= shape[a];
    }
}

/// Interpolation stencil of one sample location along one axis.
#[derive(Clone, Copy)]
struct AxisSample<T> {
    lo: usize,
    frac: T,
    /// Sample location was clamped to the border; no gradient w.r.t. u.
    clamped: bool,
}

fn axis_sample<T: Real>(q: T, size: usize) -> AxisSample<T> {
    let max = T::from_usize_lossy(size - 1);
    let (qc, clamped) = if q < T::zero() {
        (T::zero(), true)
    } else if q > max {
        (max, true)
    } else {
        (q, false)
    };
    if size == 1 {
        return AxisSample {
            lo: 0,
            frac: T::zero(),
            clamped: true,
        };
    }
    let lo = qc.floor().to_usize().unwrap_or(0).min(size - 2);
    AxisSample {
        lo,
        frac: qc - T::from_usize_lossy(lo),
        clamped,
    }
}

struct WarpOp<T> {
    /// Per (batch, voxel, axis) stencil.
    samples: Vec<AxisSample<T>>,
    grid: Vec<usize>,
    channels: usize,
}

fn corner_offset(lo: &[usize], bits: usize, grid: &[usize]) -> usize {
    let d = grid.len();
    let mut off = 0;
    for a in 0..d {
        let idx = lo[a] + ((bits >> (d - 1 - a)) & 1).min(grid[a] - 1);
        off = off * grid[a] + idx;
    }
    off
}

impl<T: Real> Backward<T> for WarpOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, u, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let d = self.grid.len();
        let p: usize = self.grid.iter().product();
        let n = x.shape()[0];
        let c = self.channels;
        let corners = 1usize << d;
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
        let mut du = ctx.needs[1].then(|| vec![T::zero(); u.len()]);
        let xd = x.data();
        let gd = g.data();
        let mut lo = vec![0usize; d];
        let mut w = vec![T::zero(); 2 * d];
        for s in 0..n {
            for v in 0..p {
                let st = &self.samples[(s * p + v) * d..(s * p + v + 1) * d];
                for a in 0..d {
                    lo[a] = st[a].lo;
                    w[2 * a] = T::one() - st[a].frac;
                    w[2 * a + 1] = st[a].frac;
                }
                for ch in 0..c {
                    let go = gd[(s * c + ch) * p + v];
                    if go == T::zero() {
                        continue;
                    }
                    let xbase = (s * c + ch) * p;
                    for bits in 0..corners {
                        let off = corner_offset(&lo, bits, &self.grid);
                        let mut weight = T::one();
                        for a in 0..d {
                            weight *= w[2 * a + ((bits >> (d - 1 - a)) & 1)];
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[xbase + off] += go * weight;
                        }
                        if let Some(du) = du.as_mut() {
                            let xv = xd[xbase + off];
                            for a in 0..d {
                                if st[a].clamped {
                                    continue;
                                }
                                let mut partial = if (bits >> (d - 1 - a)) & 1 == 1 {
                                    T::one()
                                } else {
                                    -T::one()
                                };
                                for b in 0..d {
                                    if b != a {
                                        partial *= w[2 * b + ((bits >> (d - 1 - b)) & 1)];
                                    }
                                }
                                du[(s * d + a) * p + v] += go * partial * xv;
                            }
                        }
                    }
                }
            }
        }
        vec![
            dx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
            du.map(|v| Tensor::new(u.shape().to_vec(), v).unwrap()),
        ]
    }
}

/// Differentiable warp of `image: [N, C, S...]` by `field: [N, d, S...]`.
pub fn warp_var<T: Real>(g: &mut Graph<T>, image: Var, field: Var) -> Result<Var> {
    let xs = g.shape(image).to_vec();
    let us = g.shape(field).to_vec();
    let grid = xs[2..].to_vec();
    let d = grid.len();
    if us.len() != xs.len() || us[0] != xs[0] || us[1] != d || us[2..] != xs[2..] {
        return Err(Error::ShapeMismatch {
            expected: [vec![xs[0], d], grid.clone()].concat(),
            got: us,
        });
    }
    let (n, c) = (xs[0], xs[1]);
    let p: usize = grid.iter().product();
    let corners = 1usize << d;
    let xd = g.value(image).data();
    let ud = g.value(field).data();
    let mut samples = Vec::with_capacity(n * p * d);
    let mut coord = vec![0usize; d];
    for s in 0..n {
        for v in 0..p {
            unravel(v, &grid, &mut coord);
            for a in 0..d {
                let q = T::from_usize_lossy(coord[a]) + ud[(s * d + a) * p + v];
                samples.push(axis_sample(q, grid[a]));
            }
        }
    }
    let mut out = vec![T::zero(); n * c * p];
    let mut lo = vec![0usize; d];
    for s in 0..n {
        for v in 0..p {
            let st = &samples[(s * p + v) * d..(s * p + v + 1) * d];
            for a in 0..d {
                lo[a] = st[a].lo;
            }
            for ch in 0..c {
                let xbase = (s * c + ch) * p;
                let mut acc = T::zero();
                for bits in 0..corners {
                    let mut weight = T::one();
                    for a in 0..d {
                        weight *= if (bits >> (d - 1 - a)) & 1 == 1 {
                            st[a].frac
                        } else {
                            T::one() - st[a].frac
                        };
                    }
                    acc += weight * xd[xbase + corner_offset(&lo, bits, &grid)];
                }
                out[xbase + v] = acc;
            }
        }
    }
    let value = Tensor::new(xs.clone(), out)?;
    Ok(g.record(
        &[image, field],
        value,
        WarpOp {
            samples,
            grid,
            channels: c,
        },
    ))
}

/// Warps a single image `[S...]`.
pub fn apply_warp<T: Real>(image: &Tensor<T>, field: &WarpField<T>) -> Result<Tensor<T>> {
    if image.shape() != field.grid() {
        return Err(Error::ShapeMismatch {
            expected: field.grid().to_vec(),
            got: image.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone().reshape(&[[1, 1].as_slice(), image.shape()].concat())?);
    let u = g.constant(
        field
            .u
            .clone()
            .reshape(&[[1].as_slice(), field.u.shape()].concat())?,
    );
    let y = warp_var(&mut g, x, u)?;
    Ok(g.value(y).clone().reshape(image.shape())?)
}

struct SmoothnessOp<T> {
    scale: T,
}

/// Squared forward differences of `[N, d, S...]`, summed over channels, axes
/// and interior voxel pairs. Calls `visit(index_hi, index_lo)` per pair.
fn for_each_forward_pair(shape: &[usize], mut visit: impl FnMut(usize, usize)) {
    let (n, c) = (shape[0], shape[1]);
    let grid = &shape[2..];
    let d = grid.len();
    let p: usize = grid.iter().product();
    let mut coord = vec![0usize; d];
    for v in 0..p {
        unravel(v, grid, &mut coord);
        for a in 0..d {
            if coord[a] + 1 >= grid[a] {
                continue;
            }
            let stride: usize = grid[a + 1..].iter().product();
            for nc in 0..n * c {
                visit(nc * p + v + stride, nc * p + v);
            }
        }
    }
}

impl<T: Real> Backward<T> for SmoothnessOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let u = ctx.inputs[0];
        let k = ctx.grad.item() * self.scale * T::from_f64_lossy(2.0);
        let ud = u.data();
        let mut du = vec![T::zero(); u.len()];
        for_each_forward_pair(u.shape(), |hi, lo| {
            let diff = k * (ud[hi] - ud[lo]);
            du[hi] += diff;
            du[lo] -= diff;
        });
        vec![Some(Tensor::new(u.shape().to_vec(), du).unwrap())]
    }
}

/// `lambda * mean_n sum_v ||grad u(v)||^2` for a batch of fields `[N, d, S...]`.
pub fn smoothness_var<T: Real>(g: &mut Graph<T>, field: Var, lambda: T) -> Var {
    let shape = g.shape(field).to_vec();
    let scale = lambda / T::from_usize_lossy(shape[0].max(1));
    let ud = g.value(field).data();
    let mut acc = T::zero();
    for_each_forward_pair(&shape, |hi, lo| {
        let diff = ud[hi] - ud[lo];
        acc += diff * diff;
    });
    let value = Tensor::scalar(acc * scale);
    g.record(&[field], value, SmoothnessOp { scale })
}

/// Diffusion regularizer `lambda * sum_v ||grad u(v)||^2` of one field.
pub fn smoothness_energy<T: Real>(field: &WarpField<T>, lambda: T) -> Result<T> {
    if !(lambda >= T::zero()) {
        return Err(Error::InvalidParameter("lambda_phi must be non-negative".into()));
    }
    let mut g = Graph::new();
    let shape = [[1].as_slice(), field.u.shape()].concat();
    let u = g.constant(field.u.clone().reshape(&shape)?);
    let e = smoothness_var(&mut g, u, lambda);
    Ok(g.value(e).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    pub log_det: Tensor<f64>,
    /// Voxels whose determinant fell below [`DET_FLOOR`].
    pub clamped: usize,
}

/// `d u_i / d v_j` at `coord` by central differences, one-sided at borders.
fn displacement_gradient(u: &[f64], grid: &[usize], coord: &[usize], jac: &mut [f64]) {
    let d = grid.len();
    let p: usize = grid.iter().product();
    let flat = |c: &[usize]| c.iter().zip(grid).fold(0, |acc, (&x, &n)| acc * n + x);
    let mut probe = coord.to_vec();
    for j in 0..d {
        let (lo, hi) = if grid[j] == 1 {
            (coord[j], coord[j])
        } else if coord[j] == 0 {
            (0, 1)
        } else if coord[j] + 1 == grid[j] {
            (coord[j] - 1, coord[j])
        } else {
            (coord[j] - 1, coord[j] + 1)
        };
        let span = (hi - lo) as f64;
        probe[j] = hi;
        let fh = flat(&probe);
        probe[j] = lo;
        let fl = flat(&probe);
        probe[j] = coord[j];
        for i in 0..d {
            jac[i * d + j] = if span > 0.0 {
                (u[i * p + fh] - u[i * p + fl]) / span
            } else {
                0.0
            };
        }
    }
}

fn det_identity_plus(jac: &[f64], d: usize) -> f64 {
    let m = |i: usize, j: usize| jac[i * d + j] + if i == j { 1.0 } else { 0.0 };
    match d {
        1 => m(0, 0),
        2 => m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
        3 => {
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        }
        _ => unreachable!("fields are 1-, 2- or 3-dimensional"),
    }
}

/// Per-voxel `log det(I + du/dv)`. Negative values mark shrinkage and
/// positive values expansion.
pub fn log_jacobian_map<T: Real>(field: &WarpField<T>) -> JacobianMap {
    let grid = field.grid().to_vec();
    let d = grid.len();
    let p: usize = grid.iter().product();
    let u = field.u.to_f64_vec();
    let mut out = Tensor::zeros(&grid);
    let mut clamped = 0;
    let mut coord = vec![0usize; d];
    let mut jac = vec![0.0; d * d];
    for (v, slot) in out.data_mut().iter_mut().enumerate().take(p) {
        unravel(v, &grid, &mut coord);
        displacement_gradient(&u, &grid, &coord, &mut jac);
        let det = det_identity_plus(&jac, d);
        let det = if det < DET_FLOOR {
            clamped += 1;
            DET_FLOOR
        } else {
            det
        };
        *slot = det.ln();
    }
    JacobianMap {
        log_det: out,
        clamped,
    }
}
