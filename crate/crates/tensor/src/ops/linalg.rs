use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Backward<T> for MatmulOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let ga = ctx.needs[0].then(|| {
            // dA = G B^T
            let mut out = vec![T::zero(); m * k];
            T::gemm(false, true, m, k, n, T::one(), g.data(), b.data(), T::zero(), &mut out);
            Tensor::new(a.shape().to_vec(), out).unwrap()
        });
        let gb = ctx.needs[1].then(|| {
            // dB = A^T G
            let mut out = vec![T::zero(); k * n];
            T::gemm(true, false, k, n, m, T::one(), a.data(), g.data(), T::zero(), &mut out);
            Tensor::new(b.shape().to_vec(), out).unwrap()
        });
        vec![ga, gb]
    }
}

struct LinearOp {
    batch: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Real> Backward<T> for LinearOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (nb, fi, fo) = (self.batch, self.fan_in, self.fan_out);
        let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let gx = ctx.needs[0].then(|| {
            // dX = G W, with W stored [out, in]
            let mut out = vec![T::zero(); nb * fi];
            T::gemm(false, false, nb, fi, fo, T::one(), g.data(), w.data(), T::zero(), &mut out);
            Tensor::new(x.shape().to_vec(), out).unwrap()
        });
        let gw = ctx.needs[1].then(|| {
            let mut out = vec![T::zero(); fo * fi];
            T::gemm(true, false, fo, fi, nb, T::one(), g.data(), x.data(), T::zero(), &mut out);
            Tensor::new(w.shape().to_vec(), out).unwrap()
        });
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then(|| {
                let gd = g.data();
                let out: Vec<T> = (0..fo)
                    .map(|j| (0..nb).map(|i| gd[i * fo + j]).sum())
                    .collect();
                Tensor::new(vec![fo], out).unwrap()
            }));
        }
        grads
    }
}

impl<T: Real> Graph<T> {
    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices");
        assert_eq!(sa[1], sb[0], "matmul inner dimension mismatch");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            n,
            k,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let v = Tensor::new(vec![m, n], out).unwrap();
        self.record(&[a, b], v, MatmulOp { m, k, n })
    }

    /// Affine map `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        assert_eq!(sx.len(), 2, "linear expects [N, in] input, got {sx:?}");
        assert_eq!(sw.len(), 2, "linear weight must be [out, in]");
        assert_eq!(sx[1], sw[1], "linear fan-in mismatch");
        let (nb, fi, fo) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); nb * fo];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), fo, "linear bias length");
            for row in out.chunks_mut(fo) {
                row.copy_from_slice(bd);
            }
        }
        T::gemm(
            false,
            true,
            nb,
            fo,
            fi,
            T::one(),
            self.value(x).data(),
            self.value(weight).data(),
            T::one(),
            &mut out,
        );
        let v = Tensor::new(vec![nb, fo], out).unwrap();
        let op = LinearOp {
            batch: nb,
            fan_in: fi,
            fan_out: fo,
        };
        match bias {
            Some(b) => self.record(&[x, weight, b], v, op),
            None => self.record(&[x, weight], v, op),
        }
    }
}
