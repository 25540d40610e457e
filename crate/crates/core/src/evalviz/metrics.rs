use cfsim_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::{log_jacobian_map, WarpField};

/// Normalized cross-correlation of two equally shaped maps.
pub fn ncc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "ncc needs equal non-empty maps, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Origin of a pattern estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternSource {
    ProposedDirect,
    ProposedJacobian,
    SeparateEncoders,
    Bp,
    GuidedBp,
    GradCam,
    GuidedGradCam,
    Occlusion,
}

impl PatternSource {
    /// Tag under which a trained simulator's patterns are reported.
    pub fn of_simulator(arch: &crate::layers::SimulatorArch) -> Self {
        use crate::layers::{Coupling, OutputMode};
        match (arch.coupling, arch.mode) {
            (Coupling::SeparateEncoders, _) => PatternSource::SeparateEncoders,
            (Coupling::Condconv, OutputMode::DirectImage) => PatternSource::ProposedDirect,
            (Coupling::Condconv, OutputMode::WarpField) => PatternSource::ProposedJacobian,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            PatternSource::ProposedDirect => "proposed-direct",
            PatternSource::ProposedJacobian => "proposed-jacobian",
            PatternSource::SeparateEncoders => "separate-encoders",
            PatternSource::Bp => "bp",
            PatternSource::GuidedBp => "guided-bp",
            PatternSource::GradCam => "grad-cam",
            PatternSource::GuidedGradCam => "guided-grad-cam",
            PatternSource::Occlusion => "occlusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternEstimate {
    pub values: Tensor<f64>,
    pub source: PatternSource,
    pub subject_id: u32,
}

/// `raw - simulated` without a field, the log-Jacobian map with one.
pub fn extract_pattern<T: Real>(
    raw: &Tensor<T>,
    simulated: &Tensor<T>,
    field: Option<&WarpField<T>>,
    source: PatternSource,
    subject_id: u32,
) -> Result<PatternEstimate> {
    let values = match field {
        Some(f) => {
            if f.grid() != raw.shape() {
                return Err(Error::ShapeMismatch {
                    expected: raw.shape().to_vec(),
                    got: f.grid().to_vec(),
                });
            }
            log_jacobian_map(f).log_det
        }
        None => {
            if raw.shape() != simulated.shape() {
                return Err(Error::ShapeMismatch {
                    expected: raw.shape().to_vec(),
                    got: simulated.shape().to_vec(),
                });
            }
            let r = raw.cast::<f64>();
            r.zip_map(&simulated.cast::<f64>(), |a, b| a - b)
        }
    };
    Ok(PatternEstimate {
        values,
        source,
        subject_id,
    })
}

/// Voxelwise mean of maps sharing one grid.
pub fn group_average_map(patterns: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = patterns
        .first()
        .ok_or_else(|| Error::InvalidParameter("group average of an empty list".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for p in patterns {
        if p.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                got: p.shape().to_vec(),
            });
        }
        acc.add_assign(p);
    }
    Ok(acc.scale(1.0 / patterns.len() as f64))
}
