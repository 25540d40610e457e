use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{CoupledSimulator, LogitModel, Task};
use crate::synthdata::{Group, Split, SyntheticDataset};

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "spearman needs two equal series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    pearson(&ranks(a), &ranks(b))
}

pub(crate) fn variance(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Raw versus simulated logits on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitShiftStats {
    pub raw_x: Vec<f64>,
    pub inject_x: Vec<f64>,
    pub raw_y: Vec<f64>,
    pub remove_y: Vec<f64>,
    /// Mean of `P(G1(X)) - P(X)` over control images.
    pub mean_shift_inject: f64,
    /// Mean of `P(G2(Y)) - P(Y)` over case images.
    pub mean_shift_remove: f64,
    pub spearman_inject: f64,
    pub spearman_remove: f64,
    pub var_remove: f64,
    pub var_inject: f64,
}

pub fn logit_shift_stats(
    classifier: &impl LogitModel<f32>,
    sim: &CoupledSimulator<f32>,
    data: &SyntheticDataset,
    split: Split,
) -> Result<LogitShiftStats> {
    let side = |group: Group, task: Task| -> Result<(Vec<f64>, Vec<f64>)> {
        let idx = data.indices(split, Some(group));
        let mut raw = Vec::new();
        let mut sim_l = Vec::new();
        for chunk in idx.chunks(64) {
            let b = data.batch::<f32>(chunk);
            raw.extend(classifier.logits(&b).into_iter().map(f64::from));
            let (s, _) = sim.simulate(&b, task)?;
            sim_l.extend(classifier.logits(&s).into_iter().map(f64::from));
        }
        Ok((raw, sim_l))
    };
    let (raw_x, inject_x) = side(Group::Control, Task::Inject)?;
    let (raw_y, remove_y) = side(Group::Case, Task::Remove)?;
    let mean_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p - q).sum::<f64>() / a.len().max(1) as f64;
    Ok(LogitShiftStats {
        mean_shift_inject: mean_diff(&inject_x, &raw_x),
        mean_shift_remove: mean_diff(&remove_y, &raw_y),
        spearman_inject: spearman(&raw_x, &inject_x).unwrap_or(0.0),
        spearman_remove: spearman(&raw_y, &remove_y).unwrap_or(0.0),
        var_remove: variance(&remove_y),
        var_inject: variance(&inject_x),
        raw_x,
        inject_x,
        raw_y,
        remove_y,
    })
}
