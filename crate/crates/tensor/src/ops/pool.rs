use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::ops::elementwise::nc_s;
use crate::real::Real;
use crate::tensor::Tensor;

/// Flat index of every spatial position of `shape`, decomposed per axis.
fn coords(index: usize, shape: &[usize], out: &mut [usize]) {
    let mut rem = index;
    for a in (0..shape.len()).rev() {
        out[a] = rem % shape[a];
        rem /= shape[a];
    }
}

fn flat(coord: &[usize], shape: &[usize]) -> usize {
    coord.iter().zip(shape).fold(0, |acc, (&c, &d)| acc * d + c)
}

struct MaxPoolOp {
    /// Input offset of the winning element, per output element.
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxPoolOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(ctx.inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            d[src] += g;
        }
        vec![Some(dx)]
    }
}

struct UpsampleOp;

impl<T: Real> Backward<T> for UpsampleOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let in_shape = ctx.inputs[0].shape();
        let out_shape = ctx.grad.shape();
        let (n, c, p_out) = nc_s(out_shape);
        let p_in: usize = in_shape[2..].iter().product();
        let (si, so) = (&in_shape[2..], &out_shape[2..]);
        let mut dx = Tensor::zeros(in_shape);
        let dxd = dx.data_mut();
        let g = ctx.grad.data();
        let mut co = vec![0; so.len()];
        let map: Vec<usize> = (0..p_out)
            .map(|q| {
                coords(q, so, &mut co);
                co.iter_mut().for_each(|x| *x /= 2);
                flat(&co, si)
            })
            .collect();
        for nc in 0..n * c {
            for (q, &src) in map.iter().enumerate() {
                dxd[nc * p_in + src] += g[nc * p_out + q];
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Graph<T> {
    /// Max pooling with window 2 and stride 2 along every spatial axis.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, p_in) = nc_s(&xs);
        let si = &xs[2..];
        let so: Vec<usize> = si.iter().map(|&e| e / 2).collect();
        assert!(so.iter().all(|&e| e > 0), "max_pool2 on spatial shape {si:?}");
        let p_out: usize = so.iter().product();
        let d = so.len();
        let window = 1usize << d;
        // input-offset of every window element, per output position
        let mut co = vec![0; d];
        let mut ci = vec![0; d];
        let mut offsets = Vec::with_capacity(p_out * window);
        for q in 0..p_out {
            coords(q, &so, &mut co);
            for w in 0..window {
                for a in 0..d {
                    ci[a] = 2 * co[a] + ((w >> (d - 1 - a)) & 1);
                }
                offsets.push(flat(&ci, si));
            }
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * p_out);
        let mut argmax = Vec::with_capacity(n * c * p_out);
        for nc in 0..n * c {
            let base = nc * p_in;
            for q in 0..p_out {
                let mut best = base + offsets[q * window];
                for &o in &offsets[q * window + 1..(q + 1) * window] {
                    if xd[base + o] > xd[best] {
                        best = base + o;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let mut shape = vec![n, c];
        shape.extend(so);
        let v = Tensor::new(shape, out).unwrap();
        self.record(&[x], v, MaxPoolOp { argmax })
    }

    /// Nearest-neighbour up-sampling by 2 along every spatial axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, p_in) = nc_s(&xs);
        let si = &xs[2..];
        let so: Vec<usize> = si.iter().map(|&e| e * 2).collect();
        let p_out: usize = so.iter().product();
        let mut co = vec![0; so.len()];
        let map: Vec<usize> = (0..p_out)
            .map(|q| {
                coords(q, &so, &mut co);
                co.iter_mut().for_each(|x| *x /= 2);
                flat(&co, si)
            })
            .collect();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * p_out);
        for nc in 0..n * c {
            out.extend(map.iter().map(|&src| xd[nc * p_in + src]));
        }
        let mut shape = vec![n, c];
        shape.extend(so);
        let v = Tensor::new(shape, out).unwrap();
        self.record(&[x], v, UpsampleOp)
    }
}
