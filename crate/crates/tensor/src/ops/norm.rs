use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::ops::elementwise::nc_s;
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

struct BatchNormTrainOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for BatchNormTrainOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let shape = ctx.inputs[0].shape();
        let (n, c, p) = nc_s(shape);
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad.data();
        let m = T::from_usize_lossy(n * p);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for i in base..base + p {
                    dgamma[ch] += g[i] * self.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); n * c * p];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * p;
                    let k = gamma[ch] * self.inv_std[ch] / m;
                    for i in base..base + p {
                        dx[i] = k * (m * g[i] - dbeta[ch] - self.xhat[i] * dgamma[ch]);
                    }
                }
            }
            Tensor::new(shape.to_vec(), dx).unwrap()
        });
        vec![
            dx,
            ctx.needs[1].then(|| Tensor::new(vec![c], dgamma).unwrap()),
            ctx.needs[2].then(|| Tensor::new(vec![c], dbeta).unwrap()),
        ]
    }
}

struct ChannelAffineOp<T> {
    scale: Vec<T>,
    xhat: Vec<T>,
}

impl<T: Real> Backward<T> for ChannelAffineOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let shape = ctx.inputs[0].shape();
        let (n, c, p) = nc_s(shape);
        let g = ctx.grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); n * c * p];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for i in base..base + p {
                    dx[i] = g[i] * self.scale[ch];
                    dgamma[ch] += g[i] * self.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::new(shape.to_vec(), dx).unwrap()),
            ctx.needs[1].then(|| Tensor::new(vec![c], dgamma).unwrap()),
            ctx.needs[2].then(|| Tensor::new(vec![c], dbeta).unwrap()),
        ]
    }
}

impl<T: Real> Graph<T> {
    /// Batch normalization using the statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, BatchStats<T>) {
        let shape = self.shape(x).to_vec();
        let (n, c, p) = nc_s(&shape);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let m = T::from_usize_lossy(n * p);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                mean[ch] += xd[base..base + p].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                var[ch] += xd[base..base + p]
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for i in base..base + p {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let v = Tensor::new(shape, out).unwrap();
        let stats = BatchStats {
            mean,
            var,
            count: n * p,
        };
        let y = self.record(&[x, gamma, beta], v, BatchNormTrainOp { xhat, inv_std });
        (y, stats)
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, p) = nc_s(&shape);
        assert_eq!(mean.len(), c, "batch_norm_eval statistics length");
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let scale: Vec<T> = (0..c).map(|ch| gd[ch] * inv_std[ch]).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for i in base..base + p {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let v = Tensor::new(shape, out).unwrap();
        self.record(&[x, gamma, beta], v, ChannelAffineOp { scale, xhat })
    }
}
