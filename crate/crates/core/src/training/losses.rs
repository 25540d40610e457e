//! Loss terms as differentiable graph operations, plus plain evaluations.

use cfsim_tensor::{sigmoid, Backward, BackwardCtx, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_pairs(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{what}: {a} raw values vs {b} simulated")));
    }
    Ok(())
}

/// `mean_X max(p_raw_X - p_sim_X, -delta) + mean_Y max(p_sim_Y - p_raw_Y, -delta)`.
///
/// An empty side contributes 0.
pub fn logit_shift_loss(p_raw_x: &[f64], p_sim_x: &[f64], p_raw_y: &[f64], p_sim_y: &[f64], delta: f64) -> Result<f64> {
    check_pairs(p_raw_x.len(), p_sim_x.len(), "logit shift X")?;
    check_pairs(p_raw_y.len(), p_sim_y.len(), "logit shift Y")?;
    if delta <= 0.0 {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let tx: Vec<f64> = p_raw_x.iter().zip(p_sim_x).map(|(r, s)| (r - s).max(-delta)).collect();
    let ty: Vec<f64> = p_raw_y.iter().zip(p_sim_y).map(|(r, s)| (s - r).max(-delta)).collect();
    Ok(mean(&tx) + mean(&ty))
}

/// Mean per-image root-mean-square error between cycle reconstructions and
/// originals, summed over both directions. Images are rows of `[N, P]` data.
pub fn cycle_loss(x: &[Vec<f64>], x_cycle: &[Vec<f64>], y: &[Vec<f64>], y_cycle: &[Vec<f64>]) -> Result<f64> {
    fn side(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
        check_pairs(a.len(), b.len(), "cycle")?;
        let mut r = Vec::with_capacity(a.len());
        for (u, v) in a.iter().zip(b) {
            check_pairs(u.len(), v.len(), "cycle image")?;
            let ss: f64 = u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum();
            r.push((ss / u.len().max(1) as f64).sqrt());
        }
        Ok(mean(&r))
    }
    Ok(side(x, x_cycle)? + side(y, y_cycle)?)
}

/// Binary cross-entropy pushing simulated X logits to 1 and simulated Y
/// logits to 0.
pub fn bce_loss_variant(p_sim_x: &[f64], p_sim_y: &[f64]) -> f64 {
    let tx: Vec<f64> = p_sim_x.iter().map(|&s| softplus(-s)).collect();
    let ty: Vec<f64> = p_sim_y.iter().map(|&s| softplus(s)).collect();
    mean(&tx) + mean(&ty)
}

/// Binary cross-entropy with logits against 0/1 labels, averaged.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> f64 {
    let t: Vec<f64> = logits.iter().zip(labels).map(|(&s, &y)| softplus(s) - y * s).collect();
    mean(&t)
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

fn scalar<T: Real>(v: f64) -> Tensor<T> {
    Tensor::scalar(T::from_f64_lossy(v))
}

struct LogitShiftOp {
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl<T: Real> Backward<T> for LogitShiftOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.item().as_f64();
        let make = |d: &[f64], shape: &[usize]| {
            Tensor::new(shape.to_vec(), d.iter().map(|&v| T::from_f64_lossy(v * g)).collect()).unwrap()
        };
        vec![
            ctx.needs[0].then(|| make(&self.dx, ctx.inputs[0].shape())),
            ctx.needs[1].then(|| make(&self.dy, ctx.inputs[1].shape())),
        ]
    }
}

/// Graph form of [`logit_shift_loss`]; raw logits are constants.
pub fn logit_shift_var<T: Real>(
    g: &mut Graph<T>,
    p_raw_x: &[f64],
    p_sim_x: Var,
    p_raw_y: &[f64],
    p_sim_y: Var,
    delta: f64,
) -> Result<Var> {
    let sx = to_f64(g.value(p_sim_x));
    let sy = to_f64(g.value(p_sim_y));
    let value = logit_shift_loss(p_raw_x, &sx, p_raw_y, &sy, delta)?;
    let nx = sx.len().max(1) as f64;
    let ny = sy.len().max(1) as f64;
    let dx = p_raw_x
        .iter()
        .zip(&sx)
        .map(|(r, s)| if r - s > -delta { -1.0 / nx } else { 0.0 })
        .collect();
    let dy = p_raw_y
        .iter()
        .zip(&sy)
        .map(|(r, s)| if s - r > -delta { 1.0 / ny } else { 0.0 })
        .collect();
    Ok(g.record(&[p_sim_x, p_sim_y], scalar(value), LogitShiftOp { dx, dy }))
}

struct CycleOp {
    /// Gradient of the loss w.r.t. each reconstruction element.
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl<T: Real> Backward<T> for CycleOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.item().as_f64();
        let make = |d: &[f64], shape: &[usize]| {
            Tensor::new(shape.to_vec(), d.iter().map(|&v| T::from_f64_lossy(v * g)).collect()).unwrap()
        };
        vec![
            ctx.needs[0].then(|| make(&self.dx, ctx.inputs[0].shape())),
            ctx.needs[1].then(|| make(&self.dy, ctx.inputs[1].shape())),
        ]
    }
}

fn rmse_side(orig: &[f64], recon: &[f64], n: usize) -> (f64, Vec<f64>) {
    if n == 0 {
        return (0.0, vec![0.0; recon.len()]);
    }
    let p = orig.len() / n;
    let mut total = 0.0;
    let mut grad = vec![0.0; recon.len()];
    for i in 0..n {
        let (a, b) = (&orig[i * p..(i + 1) * p], &recon[i * p..(i + 1) * p]);
        let ss: f64 = a.iter().zip(b).map(|(u, v)| (v - u) * (v - u)).sum();
        let r = (ss / p as f64).sqrt();
        total += r;
        if r > 0.0 {
            for j in 0..p {
                grad[i * p + j] = (b[j] - a[j]) / (p as f64 * r * n as f64);
            }
        }
    }
    (total / n as f64, grad)
}

/// Graph form of [`cycle_loss`] for batches `[N, 1, S...]`; originals are
/// constants.
pub fn cycle_var<T: Real>(g: &mut Graph<T>, x: &Tensor<T>, x_cycle: Var, y: &Tensor<T>, y_cycle: Var) -> Result<Var> {
    for (orig, rec) in [(x, x_cycle), (y, y_cycle)] {
        if orig.shape() != g.shape(rec) {
            return Err(Error::ShapeMismatch {
                expected: orig.shape().to_vec(),
                got: g.shape(rec).to_vec(),
            });
        }
    }
    let (lx, dx) = rmse_side(&x.to_f64_vec(), &to_f64(g.value(x_cycle)), x.shape()[0]);
    let (ly, dy) = rmse_side(&y.to_f64_vec(), &to_f64(g.value(y_cycle)), y.shape()[0]);
    Ok(g.record(&[x_cycle, y_cycle], scalar(lx + ly), CycleOp { dx, dy }))
}

struct BceOp {
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl<T: Real> Backward<T> for BceOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.item().as_f64();
        let make = |d: &[f64], shape: &[usize]| {
            Tensor::new(shape.to_vec(), d.iter().map(|&v| T::from_f64_lossy(v * g)).collect()).unwrap()
        };
        let mut out = vec![ctx.needs[0].then(|| make(&self.dx, ctx.inputs[0].shape()))];
        if ctx.inputs.len() > 1 {
            out.push(ctx.needs[1].then(|| make(&self.dy, ctx.inputs[1].shape())));
        }
        out
    }
}

/// Graph form of [`bce_loss_variant`].
pub fn bce_variant_var<T: Real>(g: &mut Graph<T>, p_sim_x: Var, p_sim_y: Var) -> Var {
    let sx = to_f64(g.value(p_sim_x));
    let sy = to_f64(g.value(p_sim_y));
    let value = bce_loss_variant(&sx, &sy);
    let nx = sx.len().max(1) as f64;
    let ny = sy.len().max(1) as f64;
    let dx = sx.iter().map(|&s| -sigmoid(-s) / nx).collect();
    let dy = sy.iter().map(|&s| sigmoid(s) / ny).collect();
    g.record(&[p_sim_x, p_sim_y], scalar(value), BceOp { dx, dy })
}

/// Graph form of [`bce_with_logits`] with constant labels.
pub fn bce_with_logits_var<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[f64]) -> Var {
    let s = to_f64(g.value(logits));
    let value = bce_with_logits(&s, labels);
    let n = s.len().max(1) as f64;
    let dx = s.iter().zip(labels).map(|(&v, &y)| (sigmoid(v) - y) / n).collect();
    g.record(&[logits], scalar(value), BceOp { dx, dy: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shift_below_threshold() {
        let l = logit_shift_loss(&[1.0], &[4.0], &[], &[], 5.0).unwrap();
        assert_eq!(l, -3.0);
    }

    #[test]
    fn saturated_shifts_reach_floor() {
        let l = logit_shift_loss(&[0.0, 1.0], &[9.0, 7.0], &[2.0], &[-10.0], 5.0).unwrap();
        assert_eq!(l, -10.0);
    }

    #[test]
    fn constant_offset_rmse() {
        let x = vec![vec![0.3; 16], vec![-1.0; 16]];
        let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v + 0.1).collect()).collect();
        let l = cycle_loss(&x, &xc, &[], &[]).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert_eq!(cycle_loss(&x, &x, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn bce_reference_points() {
        assert!(bce_loss_variant(&[50.0], &[-50.0]) < 1e-20);
        assert!((bce_loss_variant(&[0.0], &[]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_delta() {
        assert!(logit_shift_loss(&[0.0], &[0.0], &[], &[], 0.0).is_err());
    }
}
