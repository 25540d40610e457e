//! Run-directory layout and persisted pattern sets.

use std::path::{Path, PathBuf};

use cfsim_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evalviz::metrics::PatternSource;
use crate::io::{ensure_dir, read_f32, read_json, write_f32, write_json};
use crate::synthdata::Group;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const METRICS_DIR: &str = "metrics";
pub const PATTERNS_DIR: &str = "patterns";
pub const FIGURES_DIR: &str = "figures";
pub const CLASSIFIER_LOG: &str = "metrics/classifier.jsonl";
pub const SIMULATOR_LOG: &str = "metrics/simulator.jsonl";
pub const PATTERN_INDEX: &str = "index.json";
pub const GROUP_AVERAGE: &str = "group_average.f32";
pub const GROUP_TRUTH: &str = "ground_truth_group.f32";

pub const CLASSIFIER_CHECKPOINT: &str = "checkpoints/classifier";

/// Loss log of a simulator; the direct-mode proposed model keeps the
/// canonical name.
pub fn simulator_log(source: PatternSource) -> String {
    match source {
        PatternSource::ProposedDirect => SIMULATOR_LOG.to_string(),
        other => format!("{METRICS_DIR}/simulator-{}.jsonl", other.tag()),
    }
}

pub fn simulator_checkpoint(run: &Path, source: PatternSource) -> PathBuf {
    run.join(CHECKPOINTS_DIR).join(format!("simulator-{}", source.tag()))
}

/// Directory holding the maps of one method.
pub fn pattern_dir(run: &Path, method: PatternSource) -> PathBuf {
    run.join(PATTERNS_DIR).join(method.tag())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub subject_id: u32,
    pub group: Group,
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternIndex {
    pub method: PatternSource,
    pub shape: Vec<usize>,
    /// Hash of the classifier checkpoint the maps were derived from.
    pub classifier_sha256: String,
    pub subjects: Vec<PatternEntry>,
}

/// One subject's maps as written by [`PatternWriter`].
pub struct SubjectMaps<'a> {
    pub subject_id: u32,
    pub group: Group,
    pub pattern: &'a Tensor<f64>,
    pub raw: Option<&'a Tensor<f32>>,
    pub simulated: Option<&'a Tensor<f32>>,
}

/// Writes per-subject maps and returns every file created.
pub fn write_pattern_set(
    dir: &Path,
    method: PatternSource,
    shape: &[usize],
    classifier_sha256: &str,
    subjects: &[SubjectMaps<'_>],
) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for s in subjects {
        let name = |kind: &str| format!("{:06}.{kind}.f32", s.subject_id);
        let pattern: Vec<f32> = s.pattern.data().iter().map(|&v| v as f32).collect();
        write_f32(&dir.join(name("pattern")), &pattern)?;
        files.push(dir.join(name("pattern")));
        let mut extra = |t: Option<&Tensor<f32>>, kind: &str| -> Result<Option<String>> {
            match t {
                Some(t) => {
                    write_f32(&dir.join(name(kind)), t.data())?;
                    files.push(dir.join(name(kind)));
                    Ok(Some(name(kind)))
                }
                None => Ok(None),
            }
        };
        let raw = extra(s.raw, "raw")?;
        let simulated = extra(s.simulated, "simulated")?;
        entries.push(PatternEntry {
            subject_id: s.subject_id,
            group: s.group,
            pattern: name("pattern"),
            raw,
            simulated,
        });
    }
    let index = PatternIndex {
        method,
        shape: shape.to_vec(),
        classifier_sha256: classifier_sha256.to_string(),
        subjects: entries,
    };
    write_json(&dir.join(PATTERN_INDEX), &index)?;
    files.push(dir.join(PATTERN_INDEX));
    Ok(files)
}

pub fn read_pattern_index(dir: &Path) -> Result<PatternIndex> {
    read_json(&dir.join(PATTERN_INDEX))
}

pub fn read_map(path: &Path, shape: &[usize]) -> Result<Tensor<f64>> {
    let v = read_f32(path, Some(shape.iter().product()))?;
    Ok(Tensor::new(shape.to_vec(), v.into_iter().map(f64::from).collect())?)
}

pub fn write_map(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let v: Vec<f32> = map.data().iter().map(|&x| x as f32).collect();
    write_f32(path, &v)
}
