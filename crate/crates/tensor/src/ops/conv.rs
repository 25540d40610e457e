//! Stride-1, zero-padded ("same") convolution over 1, 2 or 3 spatial axes.
//!
//! Implemented as gather-to-columns followed by a matrix product. The kernel
//! can be shared across the batch (`[Cout, Cin, k...]`) or given per sample
//! (`[N, Cout, Cin, k...]`), which is what conditionally parameterized layers
//! need once their expert kernels have been mixed.

use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::ops::elementwise::nc_s;
use crate::real::Real;
use crate::tensor::Tensor;

const PAD: u32 = u32::MAX;

/// Source index of every (kernel tap, output position) pair, `PAD` when the
/// tap falls outside the grid.
#[derive(Clone, Debug)]
struct GatherTable {
    taps: usize,
    positions: usize,
    index: Vec<u32>,
}

impl GatherTable {
    fn new(spatial: &[usize], k: usize) -> Self {
        let d = spatial.len();
        let taps = k.pow(d as u32);
        let positions: usize = spatial.iter().product();
        let half = (k / 2) as isize;
        let mut index = Vec::with_capacity(taps * positions);
        let mut offset = vec![0isize; d];
        let mut pos = vec![0usize; d];
        for tap in 0..taps {
            let mut rem = tap;
            for a in (0..d).rev() {
                offset[a] = (rem % k) as isize - half;
                rem /= k;
            }
            for p in 0..positions {
                let mut rem = p;
                for a in (0..d).rev() {
                    pos[a] = rem % spatial[a];
                    rem /= spatial[a];
                }
                let mut flat = 0usize;
                let mut inside = true;
                for a in 0..d {
                    let q = pos[a] as isize + offset[a];
                    if q < 0 || q >= spatial[a] as isize {
                        inside = false;
                        break;
                    }
                    flat = flat * spatial[a] + q as usize;
                }
                index.push(if inside { flat as u32 } else { PAD });
            }
        }
        Self {
            taps,
            positions,
            index,
        }
    }

    /// `cols[(c * taps + tap) * P + p] = x[c, src]`.
    fn im2col<T: Real>(&self, x: &[T], channels: usize, cols: &mut [T]) {
        let (taps, p) = (self.taps, self.positions);
        for c in 0..channels {
            let xc = &x[c * p..(c + 1) * p];
            for tap in 0..taps {
                let row = &mut cols[(c * taps + tap) * p..(c * taps + tap + 1) * p];
                let idx = &self.index[tap * p..(tap + 1) * p];
                for (dst, &src) in row.iter_mut().zip(idx) {
                    *dst = if src == PAD { T::zero() } else { xc[src as usize] };
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], channels: usize, dx: &mut [T]) {
        let (taps, p) = (self.taps, self.positions);
        for c in 0..channels {
            let dxc = &mut dx[c * p..(c + 1) * p];
            for tap in 0..taps {
                let row = &cols[(c * taps + tap) * p..(c * taps + tap + 1) * p];
                let idx = &self.index[tap * p..(tap + 1) * p];
                for (&v, &src) in row.iter().zip(idx) {
                    if src != PAD {
                        dxc[src as usize] += v;
                    }
                }
            }
        }
    }
}

struct ConvOp {
    table: GatherTable,
    batch: usize,
    c_in: usize,
    c_out: usize,
    per_sample: bool,
    has_bias: bool,
}

impl<T: Real> Backward<T> for ConvOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let (n, ci, co) = (self.batch, self.c_in, self.c_out);
        let (taps, p) = (self.table.taps, self.table.positions);
        let rows = ci * taps;
        let wsize = co * rows;
        let need_x = ctx.needs[0];
        let need_w = ctx.needs[1];
        let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
        let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
        let mut cols = vec![T::zero(); rows * p];
        let mut dcols = vec![T::zero(); if need_x { rows * p } else { 0 }];
        for s in 0..n {
            let gs = &g.data()[s * co * p..(s + 1) * co * p];
            let ws = if self.per_sample {
                &w.data()[s * wsize..(s + 1) * wsize]
            } else {
                w.data()
            };
            if let Some(dw) = dw.as_mut() {
                self.table
                    .im2col(&x.data()[s * ci * p..(s + 1) * ci * p], ci, &mut cols);
                let (dst, beta) = if self.per_sample {
                    (&mut dw[s * wsize..(s + 1) * wsize], T::zero())
                } else {
                    (&mut dw[..], T::one())
                };
                // dW[co, rows] (+)= G[co, P] cols[rows, P]^T
                T::gemm(false, true, co, rows, p, T::one(), gs, &cols, beta, dst);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[rows, P] = W[co, rows]^T G[co, P]
                T::gemm(true, false, rows, p, co, T::one(), ws, gs, T::zero(), &mut dcols);
                self.table
                    .col2im(&dcols, ci, &mut dx[s * ci * p..(s + 1) * ci * p]);
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        ];
        if self.has_bias {
            grads.push(ctx.needs[2].then(|| {
                let gd = g.data();
                let mut db = vec![T::zero(); co];
                for s in 0..n {
                    for (c, acc) in db.iter_mut().enumerate() {
                        let base = (s * co + c) * p;
                        *acc += gd[base..base + p].iter().copied().sum::<T>();
                    }
                }
                Tensor::new(vec![co], db).unwrap()
            }));
        }
        grads
    }
}

impl<T: Real> Graph<T> {
    /// Same-padded convolution with a kernel shared across the batch.
    ///
    /// `x: [N, Cin, S...]`, `weight: [Cout, Cin, k, ..., k]` (odd `k`),
    /// `bias: [Cout]`.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        self.conv_impl(x, weight, bias, false)
    }

    /// Same-padded convolution with one kernel per sample,
    /// `weight: [N, Cout, Cin, k, ..., k]`.
    pub fn conv_per_sample(&mut self, x: Var, weight: Var) -> Var {
        self.conv_impl(x, weight, None, true)
    }

    fn conv_impl(&mut self, x: Var, weight: Var, bias: Option<Var>, per_sample: bool) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, ci, p) = nc_s(&xs);
        let spatial = &xs[2..];
        let d = spatial.len();
        let lead = if per_sample { 1 } else { 0 };
        assert_eq!(ws.len(), lead + 2 + d, "conv weight rank: {ws:?} for input {xs:?}");
        if per_sample {
            assert_eq!(ws[0], n, "per-sample kernel batch mismatch");
        }
        let co = ws[lead];
        assert_eq!(ws[lead + 1], ci, "conv input-channel mismatch: weight {ws:?}, input {xs:?}");
        let k = ws[lead + 2];
        assert!(k % 2 == 1, "conv kernel size must be odd");
        assert!(ws[lead + 2..].iter().all(|&e| e == k), "conv kernel must be cubic");

        let table = GatherTable::new(spatial, k);
        let rows = ci * table.taps;
        let wsize = co * rows;
        let mut out = vec![T::zero(); n * co * p];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), co, "conv bias length");
            for s in 0..n {
                for c in 0..co {
                    let base = (s * co + c) * p;
                    out[base..base + p].fill(bd[c]);
                }
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let mut cols = vec![T::zero(); rows * p];
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            for s in 0..n {
                table.im2col(&xd[s * ci * p..(s + 1) * ci * p], ci, &mut cols);
                let wk = if per_sample {
                    &wd[s * wsize..(s + 1) * wsize]
                } else {
                    wd
                };
                T::gemm(
                    false,
                    false,
                    co,
                    p,
                    rows,
                    T::one(),
                    wk,
                    &cols,
                    beta,
                    &mut out[s * co * p..(s + 1) * co * p],
                );
            }
        }
        let mut shape = xs.clone();
        shape[1] = co;
        let v = Tensor::new(shape, out).unwrap();
        let op = ConvOp {
            table,
            batch: n,
            c_in: ci,
            c_out: co,
            per_sample,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.record(&[x, weight, b], v, op),
            None => self.record(&[x, weight], v, op),
        }
    }
}
