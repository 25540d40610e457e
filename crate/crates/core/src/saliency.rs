//! Baseline interpretation methods for a logit classifier.

use cfsim_tensor::{BackwardMode, Graph, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalviz::PatternSource;
use crate::layers::LogitModel;
use crate::synthdata::{Group, SyntheticDataset};
use crate::training::balanced_accuracy;

/// Importance scores over the image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor<f64>,
    pub method: PatternSource,
    /// `None` for population-level maps.
    pub subject_id: Option<u32>,
}

fn as_batch<T: Real>(model: &impl LogitModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    Ok(x.clone().reshape(&[[1, 1].as_slice(), x.shape()].concat())?)
}

fn input_gradient<T: Real>(model: &impl LogitModel<T>, x: &Tensor<T>, mode: BackwardMode) -> Result<Tensor<f64>> {
    let batch = as_batch(model, x)?;
    let mut g = Graph::new();
    let xv = g.variable(batch);
    let trace = model.trace(&mut g, xv);
    let p = g.sum(trace.logits);
    let grads = g.backward_with(p, mode);
    let grad = grads.get_or_zeros(&g, xv);
    Ok(grad.cast::<f64>().reshape(x.shape())?)
}

/// Gradient of the logit with respect to every input voxel.
pub fn saliency_bp<T: Real>(model: &impl LogitModel<T>, x: &Tensor<T>) -> Result<Tensor<f64>> {
    input_gradient(model, x, BackwardMode::Standard)
}

/// Input gradient where every ReLU passes only positive gradients through
/// units that were active in the forward pass.
pub fn saliency_guided_bp<T: Real>(model: &impl LogitModel<T>, x: &Tensor<T>) -> Result<Tensor<f64>> {
    input_gradient(model, x, BackwardMode::GuidedRelu)
}

/// Class-activation map of target layer `layer`, before up-sampling.
pub fn grad_cam_coarse<T: Real>(model: &impl LogitModel<T>, x: &Tensor<T>, layer: usize) -> Result<Tensor<f64>> {
    let batch = as_batch(model, x)?;
    let mut g = Graph::new();
    let xv = g.variable(batch);
    let trace = model.trace(&mut g, xv);
    let &target = trace.layers.get(layer).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "layer {layer} does not exist; the model exposes {} target layers",
            trace.layers.len()
        ))
    })?;
    let p = g.sum(trace.logits);
    let grads = g.backward(p);
    let a = g.value(target).cast::<f64>();
    let da = grads.get_or_zeros(&g, target).cast::<f64>();
    let shape = a.shape().to_vec();
    let (c, spatial) = (shape[1], shape[2..].to_vec());
    let m: usize = spatial.iter().product();
    let mut cam = vec![0.0; m];
    for ch in 0..c {
        let base = ch * m;
        let w = da.data()[base..base + m].iter().sum::<f64>() / m as f64;
        for (o, &v) in cam.iter_mut().zip(&a.data()[base..base + m]) {
            *o += w * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    Ok(Tensor::new(spatial, cam)?)
}

/// Grad-CAM map linearly up-sampled to the input grid.
pub fn grad_cam<T: Real>(model: &impl LogitModel<T>, x: &Tensor<T>, layer: usize) -> Result<Tensor<f64>> {
    let coarse = grad_cam_coarse(model, x, layer)?;
    Ok(upsample_linear(&coarse, x.shape()))
}

/// Index of the last target layer, the default for Grad-CAM.
pub fn default_cam_layer<T: Real>(model: &impl LogitModel<T>) -> usize {
    let mut g = Graph::<T>::new();
    let mut shape = vec![1, 1];
    shape.extend_from_slice(model.input_shape());
    let x = g.constant(Tensor::zeros(&shape));
    model.trace(&mut g, x).layers.len().saturating_sub(1)
}

/// Product of the up-sampled Grad-CAM map and the guided-BP map.
pub fn guided_grad_cam<T: Real>(model: &impl LogitModel<T>, x: &Tensor<T>, layer: usize) -> Result<Tensor<f64>> {
    let cam = grad_cam(model, x, layer)?;
    let gbp = saliency_guided_bp(model, x)?;
    Ok(cam.zip_map(&gbp, |a, b| a * b))
}

/// Multilinear interpolation of `src` at fractional per-axis positions.
fn sample_axes(src: &Tensor<f64>, positions: &[Vec<f64>]) -> Tensor<f64> {
    let d = src.ndim();
    let out_shape: Vec<usize> = positions.iter().map(Vec::len).collect();
    let in_shape = src.shape().to_vec();
    let corners: Vec<Vec<(usize, f64)>> = positions
        .iter()
        .zip(&in_shape)
        .map(|(pos, &n)| {
            pos.iter()
                .map(|&q| {
                    let q = q.clamp(0.0, (n - 1) as f64);
                    let lo = (q.floor() as usize).min(n.saturating_sub(2));
                    (lo, q - lo as f64)
                })
                .collect()
        })
        .collect();
    let mut idx = vec![0usize; d];
    Tensor::from_fn(&out_shape, |flat| {
        let mut rem = flat;
        for ax in (0..d).rev() {
            idx[ax] = rem % out_shape[ax];
            rem /= out_shape[ax];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = 0;
            for ax in 0..d {
                let (lo, f) = corners[ax][idx[ax]];
                let hi = (corner >> ax) & 1 == 1;
                let j = if hi { (lo + 1).min(in_shape[ax] - 1) } else { lo };
                w *= if hi { f } else { 1.0 - f };
                off = off * in_shape[ax] + j;
            }
            if w != 0.0 {
                acc += w * src.data()[off];
            }
        }
        acc
    })
}

/// Linear up-sampling with pixel-center alignment and border clamping.
pub fn upsample_linear(src: &Tensor<f64>, out_shape: &[usize]) -> Tensor<f64> {
    let positions: Vec<Vec<f64>> = src
        .shape()
        .iter()
        .zip(out_shape)
        .map(|(&c, &n)| {
            let s = c as f64 / n as f64;
            (0..n).map(|i| (i as f64 + 0.5) * s - 0.5).collect()
        })
        .collect();
    sample_axes(src, &positions)
}

/// Population-level occlusion sensitivity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMap {
    pub window: Vec<usize>,
    pub stride: usize,
    pub fill: f64,
    pub baseline_accuracy: f64,
    /// Window start positions along each axis.
    pub starts: Vec<Vec<usize>>,
    /// Accuracy drop per window position, row-major over `starts`.
    pub drops: Vec<f64>,
}

impl OcclusionMap {
    pub fn grid_shape(&self) -> Vec<usize> {
        self.starts.iter().map(Vec::len).collect()
    }

    pub fn coarse(&self) -> Tensor<f64> {
        Tensor::new(self.grid_shape(), self.drops.clone()).expect("consistent occlusion grid")
    }

    /// Center voxel of the window at a flat grid position.
    pub fn center(&self, flat: usize) -> Vec<usize> {
        let grid = self.grid_shape();
        let mut rem = flat;
        let mut c = vec![0; grid.len()];
        for ax in (0..grid.len()).rev() {
            c[ax] = self.starts[ax][rem % grid[ax]] + self.window[ax] / 2;
            rem /= grid[ax];
        }
        c
    }

    /// Flat grid positions sorted by decreasing drop.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.drops.len()).collect();
        order.sort_by(|&a, &b| self.drops[b].total_cmp(&self.drops[a]).then(a.cmp(&b)));
        order
    }

    /// Drops interpolated from window centers to every voxel.
    pub fn full_resolution(&self, shape: &[usize]) -> Tensor<f64> {
        let positions: Vec<Vec<f64>> = (0..shape.len())
            .map(|ax| {
                let c0 = self.window[ax] as f64 / 2.0;
                (0..shape[ax])
                    .map(|i| (i as f64 - c0) / self.stride as f64)
                    .collect()
            })
            .collect();
        sample_axes(&self.coarse(), &positions)
    }
}

/// Masks a sliding window in every image of `indices` and records the drop
/// in balanced accuracy. Requires samples from both groups.
pub fn occlusion_map(
    model: &impl LogitModel<f32>,
    data: &SyntheticDataset,
    indices: &[usize],
    window: &[usize],
    stride: usize,
    fill: f64,
) -> Result<OcclusionMap> {
    let shape = data.shape().to_vec();
    if window.len() != shape.len() || window.iter().zip(&shape).any(|(&w, &n)| w == 0 || w > n) {
        return Err(Error::InvalidParameter(format!(
            "window {window:?} does not fit image {shape:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be positive".into()));
    }
    let labels = data.labels(indices);
    if !labels.contains(&Group::Control) || !labels.contains(&Group::Case) {
        return Err(Error::Dataset("occlusion needs samples of both groups".into()));
    }
    let starts: Vec<Vec<usize>> = window
        .iter()
        .zip(&shape)
        .map(|(&w, &n)| (0..=n - w).step_by(stride).collect())
        .collect();
    let batches: Vec<(Vec<usize>, Tensor<f32>)> = indices
        .chunks(64)
        .map(|c| (c.to_vec(), data.batch::<f32>(c)))
        .collect();
    let logits = |mask: Option<&[usize]>| -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len());
        for (_, b) in &batches {
            let mut b = b.clone();
            if let Some(start) = mask {
                fill_window(&mut b, start, window, fill as f32);
            }
            out.extend(model.logits(&b).into_iter().map(f64::from));
        }
        out
    };
    let baseline = balanced_accuracy(&logits(None), &labels);
    let grid: Vec<usize> = starts.iter().map(Vec::len).collect();
    let total: usize = grid.iter().product();
    let mut drops = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut start = vec![0; grid.len()];
        for ax in (0..grid.len()).rev() {
            start[ax] = starts[ax][rem % grid[ax]];
            rem /= grid[ax];
        }
        drops.push(baseline - balanced_accuracy(&logits(Some(&start)), &labels));
    }
    Ok(OcclusionMap {
        window: window.to_vec(),
        stride,
        fill,
        baseline_accuracy: baseline,
        starts,
        drops,
    })
}

/// Overwrites a window in every image of a `[N, 1, S...]` batch.
fn fill_window(batch: &mut Tensor<f32>, start: &[usize], window: &[usize], fill: f32) {
    let shape = batch.shape().to_vec();
    let spatial = &shape[2..];
    let m: usize = spatial.iter().product();
    let n = shape[0] * shape[1];
    let d = spatial.len();
    let mut idx = vec![0usize; d];
    let wn: usize = window.iter().product();
    for w in 0..wn {
        let mut rem = w;
        for ax in (0..d).rev() {
            idx[ax] = start[ax] + rem % window[ax];
            rem /= window[ax];
        }
        let off = idx.iter().zip(spatial).fold(0, |o, (&i, &s)| o * s + i);
        for s in 0..n {
            batch.data_mut()[s * m + off] = fill;
        }
    }
}
