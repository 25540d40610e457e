use std::collections::BTreeMap;

use cfsim_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evalviz::metrics::{extract_pattern, group_average_map, ncc, PatternEstimate, PatternSource};
use crate::layers::{CoupledSimulator, LogitClassifier, OutputMode, Task};
use crate::saliency::{grad_cam, guided_grad_cam, saliency_bp, saliency_guided_bp};
use crate::synthdata::{ground_truth_pattern, render_blobs, BlobRole, Group, Split, SyntheticDataset};
use crate::training::{logit_shift_stats, LogitShiftStats};

const CHUNK: usize = 32;

fn task_for(group: Group) -> Task {
    match group {
        Group::Control => Task::Inject,
        Group::Case => Task::Remove,
    }
}

/// Simulated counterparts of the given samples: `G1` for control images,
/// `G2` for case images.
pub fn simulate_samples(
    sim: &CoupledSimulator<f32>,
    data: &SyntheticDataset,
    indices: &[usize],
) -> Result<Vec<(Tensor<f32>, Option<crate::warp::WarpField<f32>>)>> {
    let mut out = vec![None; indices.len()];
    for group in [Group::Control, Group::Case] {
        let pos: Vec<usize> = (0..indices.len())
            .filter(|&k| data.samples[indices[k]].group == group)
            .collect();
        for chunk in pos.chunks(CHUNK) {
            let idx: Vec<usize> = chunk.iter().map(|&k| indices[k]).collect();
            let (images, fields) = sim.simulate(&data.batch::<f32>(&idx), task_for(group))?;
            let mut fields = fields.map(|f| f.into_iter());
            for (j, &k) in chunk.iter().enumerate() {
                let img = images.index_outer(j).reshape(data.shape())?;
                out[k] = Some((img, fields.as_mut().and_then(|f| f.next())));
            }
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every sample simulated")).collect())
}

/// Pattern estimates oriented so positive values point toward group 1:
/// `Y - G2(Y)` for case images and `G1(X) - X` for control images (or the
/// corresponding log-Jacobian maps in warp mode).
pub fn proposed_patterns(
    sim: &CoupledSimulator<f32>,
    data: &SyntheticDataset,
    indices: &[usize],
    source: PatternSource,
) -> Result<Vec<PatternEstimate>> {
    let simulated = simulate_samples(sim, data, indices)?;
    indices
        .iter()
        .zip(simulated)
        .map(|(&i, (img, field))| {
            let s = &data.samples[i];
            let field = match sim.arch.mode {
                OutputMode::WarpField => field.as_ref(),
                OutputMode::DirectImage => None,
            };
            let mut p = extract_pattern(&s.pixels, &img, field, source, s.subject_id)?;
            if s.group == Group::Control {
                p.values = p.values.scale(-1.0);
            }
            Ok(p)
        })
        .collect()
}

/// Baseline saliency maps exactly as produced (signed).
pub fn baseline_patterns(
    model: &LogitClassifier<f32>,
    data: &SyntheticDataset,
    indices: &[usize],
    method: PatternSource,
    cam_layer: usize,
) -> Result<Vec<PatternEstimate>> {
    indices
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            let x = &s.pixels;
            let values = match method {
                PatternSource::Bp => saliency_bp(model, x)?,
                PatternSource::GuidedBp => saliency_guided_bp(model, x)?,
                PatternSource::GradCam => grad_cam(model, x, cam_layer)?,
                PatternSource::GuidedGradCam => guided_grad_cam(model, x, cam_layer)?,
                other => {
                    return Err(crate::Error::InvalidParameter(format!(
                        "`{}` is not a subject-level baseline",
                        other.tag()
                    )))
                }
            };
            Ok(PatternEstimate {
                values,
                source: method,
                subject_id: s.subject_id,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: u32,
    pub group: Group,
    pub ncc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: PatternSource,
    pub mean_ncc: f64,
    pub std_ncc: f64,
    pub count: usize,
    /// Maps without variance; scored as 0.
    pub constant_maps: usize,
}

/// NCC of each estimate against its subject's ground-truth pattern.
pub fn score_patterns(
    data: &SyntheticDataset,
    patterns: &[PatternEstimate],
    method: PatternSource,
) -> Result<(MethodScore, Vec<SubjectScore>)> {
    let by_id: BTreeMap<u32, usize> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.subject_id, i))
        .collect();
    let mut subjects = Vec::with_capacity(patterns.len());
    let mut constant_maps = 0;
    for p in patterns {
        let sample = &data.samples[by_id[&p.subject_id]];
        let gt = ground_truth_pattern(sample)?;
        let v = match ncc(p.values.data(), gt.data()) {
            Ok(v) => v,
            Err(crate::Error::ZeroVariance) => {
                constant_maps += 1;
                0.0
            }
            Err(e) => return Err(e),
        };
        subjects.push(SubjectScore {
            subject_id: p.subject_id,
            group: sample.group,
            ncc: v,
        });
    }
    let n = subjects.len().max(1) as f64;
    let mean = subjects.iter().map(|s| s.ncc).sum::<f64>() / n;
    let var = subjects.iter().map(|s| (s.ncc - mean).powi(2)).sum::<f64>() / n;
    Ok((
        MethodScore {
            method,
            mean_ncc: mean,
            std_ncc: var.sqrt(),
            count: subjects.len(),
            constant_maps,
        },
        subjects,
    ))
}

/// Mean per-image RMSE of `G2(G1(X))` against `X` and `G1(G2(Y))` against `Y`.
pub fn cycle_rmse(sim: &CoupledSimulator<f32>, data: &SyntheticDataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for group in [Group::Control, Group::Case] {
        let idx: Vec<usize> = indices.iter().copied().filter(|&i| data.samples[i].group == group).collect();
        let task = task_for(group);
        for chunk in idx.chunks(CHUNK) {
            let x = data.batch::<f32>(chunk);
            let (s, _) = sim.simulate(&x, task)?;
            let (c, _) = sim.simulate(&s, task.inverse())?;
            let p = x.len() / chunk.len();
            for k in 0..chunk.len() {
                let r = &x.data()[k * p..(k + 1) * p];
                let q = &c.data()[k * p..(k + 1) * p];
                let ss: f64 = r.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                total += (ss / p as f64).sqrt();
                n += 1;
            }
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Noise-free mean case image minus mean control image over `indices`.
pub fn ground_truth_group_difference(data: &SyntheticDataset, indices: &[usize]) -> Result<Tensor<f64>> {
    let mut means = Vec::new();
    for group in [Group::Case, Group::Control] {
        let maps: Vec<Tensor<f64>> = indices
            .iter()
            .map(|&i| &data.samples[i])
            .filter(|s| s.group == group)
            .map(|s| {
                let blobs = s
                    .blobs
                    .as_ref()
                    .ok_or(crate::Error::MissingGroundTruth(s.subject_id))?;
                Ok(render_blobs(blobs, data.shape()))
            })
            .collect::<Result<_>>()?;
        means.push(group_average_map(&maps)?);
    }
    Ok(means[0].zip_map(&means[1], |a, b| a - b))
}

/// Noise-free mean of the group-separating blobs alone.
pub fn ground_truth_pattern_mean(data: &SyntheticDataset, indices: &[usize]) -> Result<Tensor<f64>> {
    let maps: Vec<Tensor<f64>> = indices
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            let blobs = s.blobs.as_ref().ok_or(crate::Error::MissingGroundTruth(s.subject_id))?;
            let pattern: Vec<_> = blobs.iter().filter(|b| b.role == BlobRole::Pattern).cloned().collect();
            Ok(render_blobs(&pattern, data.shape()))
        })
        .collect::<Result<_>>()?;
    group_average_map(&maps)
}

/// Everything measured for one trained simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorReport {
    pub source: PatternSource,
    pub score: MethodScore,
    pub cycle_rmse: f64,
    pub cycle_rmse_over_iqr: f64,
    /// NCC of the group-average pattern with the ground-truth group difference.
    pub group_map_ncc: f64,
    pub logits: LogitShiftStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub test_accuracy: f64,
    pub intensity_iqr: f64,
    pub simulators: Vec<SimulatorReport>,
    pub baselines: Vec<MethodScore>,
    pub per_subject: BTreeMap<String, Vec<SubjectScore>>,
}

impl Evaluation {
    /// Mean NCC of every scored method.
    pub fn ncc_table(&self) -> Vec<(PatternSource, f64)> {
        self.simulators
            .iter()
            .map(|s| (s.source, s.score.mean_ncc))
            .chain(self.baselines.iter().map(|b| (b.method, b.mean_ncc)))
            .collect()
    }

    pub fn simulator(&self, source: PatternSource) -> Option<&SimulatorReport> {
        self.simulators.iter().find(|s| s.source == source)
    }

    pub fn baseline(&self, method: PatternSource) -> Option<&MethodScore> {
        self.baselines.iter().find(|b| b.method == method)
    }
}

pub const SUBJECT_BASELINES: [PatternSource; 4] = [
    PatternSource::Bp,
    PatternSource::GuidedBp,
    PatternSource::GradCam,
    PatternSource::GuidedGradCam,
];

/// Scores the simulators and the subject-level baselines on one split.
pub fn evaluate(
    classifier: &LogitClassifier<f32>,
    simulators: &[(PatternSource, &CoupledSimulator<f32>)],
    data: &SyntheticDataset,
    split: Split,
    cam_layer: usize,
    baselines: &[PatternSource],
) -> Result<Evaluation> {
    let indices = data.indices(split, None);
    let iqr = data.intensity_iqr();
    let gt_group = ground_truth_group_difference(data, &indices)?;
    let mut per_subject = BTreeMap::new();
    let mut reports = Vec::new();
    for &(source, sim) in simulators {
        let patterns = proposed_patterns(sim, data, &indices, source)?;
        let (score, subjects) = score_patterns(data, &patterns, source)?;
        let maps: Vec<Tensor<f64>> = patterns.into_iter().map(|p| p.values).collect();
        let group_map = group_average_map(&maps)?;
        let group_map_ncc = ncc(group_map.data(), gt_group.data()).unwrap_or(0.0);
        let cycle = cycle_rmse(sim, data, &indices)?;
        per_subject.insert(source.tag().to_string(), subjects);
        reports.push(SimulatorReport {
            source,
            score,
            cycle_rmse: cycle,
            cycle_rmse_over_iqr: cycle / iqr,
            group_map_ncc,
            logits: logit_shift_stats(classifier, sim, data, split)?,
        });
    }
    let mut scores = Vec::new();
    for &method in baselines {
        let patterns = baseline_patterns(classifier, data, &indices, method, cam_layer)?;
        let (score, subjects) = score_patterns(data, &patterns, method)?;
        per_subject.insert(method.tag().to_string(), subjects);
        scores.push(score);
    }
    Ok(Evaluation {
        split,
        test_accuracy: crate::training::accuracy(classifier, data, &indices),
        intensity_iqr: iqr,
        simulators: reports,
        baselines: scores,
        per_subject,
    })
}
