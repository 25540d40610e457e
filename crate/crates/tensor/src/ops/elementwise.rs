use crate::graph::{Backward, BackwardCtx, BackwardMode, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

struct AddOp;
impl<T: Real> Backward<T> for AddOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }
}

struct SubOp;
impl<T: Real> Backward<T> for SubOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
    }
}

struct MulOp;
impl<T: Real> Backward<T> for MulOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        vec![
            ctx.needs[0].then(|| ctx.grad.zip_map(b, |g, y| g * y)),
            ctx.needs[1].then(|| ctx.grad.zip_map(a, |g, x| g * x)),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Real> Backward<T> for ScaleOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.scale(self.0))]
    }
}

struct ShiftOp;
impl<T: Real> Backward<T> for ShiftOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone())]
    }
}

struct SumOp;
impl<T: Real> Backward<T> for SumOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.item();
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
    }
}

struct ReshapeOp;
impl<T: Real> Backward<T> for ReshapeOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx
            .grad
            .clone()
            .reshape(ctx.inputs[0].shape())
            .expect("reshape backward");
        vec![Some(g)]
    }
}

struct ReluOp;
impl<T: Real> Backward<T> for ReluOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let guided = ctx.mode == BackwardMode::GuidedRelu;
        let g = ctx.grad.zip_map(x, |g, x| {
            if x > T::zero() && (!guided || g > T::zero()) {
                g
            } else {
                T::zero()
            }
        });
        vec![Some(g)]
    }
}

struct LeakyReluOp<T>(T);
impl<T: Real> Backward<T> for LeakyReluOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let slope = self.0;
        let g = ctx
            .grad
            .zip_map(ctx.inputs[0], |g, x| if x > T::zero() { g } else { g * slope });
        vec![Some(g)]
    }
}

struct SigmoidOp;
impl<T: Real> Backward<T> for SigmoidOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx
            .grad
            .zip_map(ctx.output, |g, y| g * y * (T::one() - y));
        vec![Some(g)]
    }
}

/// Splits `[N, C, S...]` into (N, C, spatial size).
pub(crate) fn nc_s(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [N, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

struct ConcatChannelsOp {
    ca: usize,
    cb: usize,
}
impl<T: Real> Backward<T> for ConcatChannelsOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, _, s) = nc_s(ctx.grad.shape());
        let g = ctx.grad.data();
        let c = self.ca + self.cb;
        let mut ga = Vec::with_capacity(n * self.ca * s);
        let mut gb = Vec::with_capacity(n * self.cb * s);
        for i in 0..n {
            let base = i * c * s;
            ga.extend_from_slice(&g[base..base + self.ca * s]);
            gb.extend_from_slice(&g[base + self.ca * s..base + c * s]);
        }
        vec![
            Some(Tensor::new(ctx.inputs[0].shape().to_vec(), ga).unwrap()),
            Some(Tensor::new(ctx.inputs[1].shape().to_vec(), gb).unwrap()),
        ]
    }
}

struct GlobalAvgPoolOp;
impl<T: Real> Backward<T> for GlobalAvgPoolOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let shape = ctx.inputs[0].shape();
        let (n, c, s) = nc_s(shape);
        let inv = T::one() / T::from_usize_lossy(s);
        let g = ctx.grad.data();
        let mut out = Vec::with_capacity(n * c * s);
        for &gi in &g[..n * c] {
            out.extend(std::iter::repeat_n(gi * inv, s));
        }
        vec![Some(Tensor::new(shape.to_vec(), out).unwrap())]
    }
}

struct AppendColumnOp;
impl<T: Real> Backward<T> for AppendColumnOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let shape = ctx.inputs[0].shape();
        let (n, c) = (shape[0], shape[1]);
        let g = ctx.grad.data();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend_from_slice(&g[i * (c + 1)..i * (c + 1) + c]);
        }
        vec![Some(Tensor::new(shape.to_vec(), out).unwrap())]
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record(&[a, b], v, AddOp)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record(&[a, b], v, SubOp)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(&[a, b], v, MulOp)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.record(&[a], v, ScaleOp(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.record(&[a], v, ShiftOp)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(&[a], v, SumOp)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.record(&[a], v, ReshapeOp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.record(&[a], v, ReluOp)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.record(&[a], v, LeakyReluOp(slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.record(&[a], v, SigmoidOp)
    }

    /// Concatenates `[N, Ca, S...]` and `[N, Cb, S...]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0], "concat: batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat: spatial mismatch");
        let (n, ca, s) = nc_s(&sa);
        let cb = sb[1];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * s..(i + 1) * ca * s]);
            out.extend_from_slice(&db[i * cb * s..(i + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let v = Tensor::new(shape, out).unwrap();
        self.record(&[a, b], v, ConcatChannelsOp { ca, cb })
    }

    /// Spatial mean per channel: `[N, C, S...]` to `[N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, s) = nc_s(self.shape(a));
        let d = self.value(a).data();
        let inv = T::one() / T::from_usize_lossy(s);
        let out: Vec<T> = (0..n * c)
            .map(|i| d[i * s..(i + 1) * s].iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(vec![n, c], out).unwrap();
        self.record(&[a], v, GlobalAvgPoolOp)
    }

    /// Appends a constant column: `[N, C]` to `[N, C + 1]`.
    pub fn append_column(&mut self, a: Var, value: T) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "append_column expects a matrix");
        let (n, c) = (shape[0], shape[1]);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(n * (c + 1));
        for i in 0..n {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
            out.push(value);
        }
        let v = Tensor::new(vec![n, c + 1], out).unwrap();
        self.record(&[a], v, AppendColumnOp)
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
