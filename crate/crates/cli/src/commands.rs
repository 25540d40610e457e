//! Command implementations. Each one owns `--out` for its duration.

use std::fs;
use std::path::{Path, PathBuf};

use cfsim::evalviz::artifacts::*;
use cfsim::evalviz::{
    baseline_patterns, group_average_map, ground_truth_group_difference, proposed_patterns, render_report,
    simulate_samples, Evaluation, PatternEstimate, PatternSource, SUBJECT_BASELINES,
};
use cfsim::io::{ensure_dir, sha256_file, write_f32, write_json, write_text};
use cfsim::layers::{CoupledSimulator, LogitClassifier};
use cfsim::saliency::{default_cam_layer, occlusion_map, OcclusionMap};
use cfsim::synthdata::{self, SyntheticDataset};
use cfsim::training::{train_classifier as fit_classifier, train_simulator_pair};
use cfsim_tensor::Tensor;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{now_ms, RunManifest};
use crate::{Common, ExplainArgs, Method, WithData, WithModels};

pub const OCCLUSION_FILE: &str = "occlusion.json";
pub const OCCLUSION_MAP: &str = "occlusion.f32";

/// Per-command state: resolved configuration and the directory manifest.
struct Session {
    out: PathBuf,
    config: RunConfig,
    manifest: RunManifest,
    started: u128,
}

impl Session {
    fn open(common: &Common) -> Result<Self> {
        let started = now_ms();
        ensure_dir(&common.out)?;
        let previous = RunManifest::load_verified(&common.out)?;
        let existing = common.out.join(CONFIG_FILE);
        let mut config = match &common.config {
            Some(path) => RunConfig::from_file(path)?,
            None if existing.is_file() => RunConfig::from_file(&existing)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.override_seed(seed);
        }
        config.validate()?;
        write_json(&existing, &config)?;
        let mut manifest = previous.unwrap_or_else(|| RunManifest::new(&config));
        let fresh = RunManifest::new(&config);
        manifest.config = fresh.config;
        manifest.seeds = fresh.seeds;
        Ok(Self {
            out: common.out.clone(),
            config,
            manifest,
            started,
        })
    }

    fn finish(mut self, command: &str, mut summary: Value) -> Result<Value> {
        let written = self.manifest.finish(&self.out, command, self.started)?;
        summary["command"] = json!(command);
        summary["out"] = json!(self.out);
        summary["written"] = json!(written.len());
        Ok(summary)
    }

    fn input_path(&self, flag: &Option<PathBuf>, name: &str, fallback: Option<PathBuf>) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.manifest.inputs.get(name).map(|i| i.path.clone()))
            .or(fallback)
            .ok_or_else(|| CliError::MissingArtifacts(vec![format!("--{name}")]))
    }

    fn load_data(&mut self, flag: &Option<PathBuf>) -> Result<SyntheticDataset> {
        let dir = absolute(&self.input_path(flag, "data", None)?);
        let index = dir.join(synthdata::MANIFEST);
        if !index.is_file() {
            return Err(CliError::MissingArtifacts(vec![index.display().to_string()]));
        }
        RunManifest::load_verified(&dir)?;
        let hash = sha256_file(&index)?;
        let data = SyntheticDataset::load(&dir)?;
        self.manifest.pin_input("data", &dir, &hash)?;
        Ok(data)
    }

    fn load_classifier(&mut self, flag: &Option<PathBuf>) -> Result<(LogitClassifier<f32>, String)> {
        let dir = absolute(&self.input_path(flag, "classifier", Some(self.out.join(CLASSIFIER_CHECKPOINT)))?);
        require_checkpoint(&dir)?;
        let (model, hash) = LogitClassifier::load(&dir)?;
        self.manifest.pin_input("classifier", &dir, &hash)?;
        Ok((model, hash))
    }

    /// The explicit `--simulator`, or every simulator checkpoint of the run.
    fn load_simulators(&mut self, flag: &Option<PathBuf>) -> Result<Vec<(PatternSource, CoupledSimulator<f32>)>> {
        let dirs = match flag {
            Some(d) => vec![absolute(d)],
            None => {
                let root = self.out.join(CHECKPOINTS_DIR);
                let mut found: Vec<PathBuf> = match fs::read_dir(&root) {
                    Ok(entries) => entries
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| {
                            p.is_dir()
                                && p.file_name()
                                    .is_some_and(|n| n.to_string_lossy().starts_with("simulator-"))
                        })
                        .collect(),
                    Err(_) => Vec::new(),
                };
                found.sort();
                found
            }
        };
        if dirs.is_empty() {
            return Err(CliError::MissingArtifacts(vec![format!("{CHECKPOINTS_DIR}/simulator-*")]));
        }
        let mut out = Vec::new();
        for dir in dirs {
            require_checkpoint(&dir)?;
            let (sim, hash) = CoupledSimulator::load(&dir)?;
            let source = PatternSource::of_simulator(&sim.arch);
            self.manifest.pin_input(&format!("simulator:{}", source.tag()), &absolute(&dir), &hash)?;
            out.push((source, sim));
        }
        Ok(out)
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn require_checkpoint(dir: &Path) -> Result<()> {
    let missing: Vec<String> = [cfsim::layers::checkpoint::DESCRIPTOR, cfsim::layers::checkpoint::PARAMS]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingArtifacts(missing))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("serializable record"));
        text.push('\n');
    }
    write_text(path, &text)?;
    Ok(())
}

pub fn synthgen(args: &Common) -> Result<Value> {
    let s = Session::open(args)?;
    let data = synthdata::gen_from_params(&s.config.dataset)?;
    data.save(&s.out)?;
    let summary = json!({
        "samples": data.samples.len(),
        "shape": data.shape(),
        "intensity_iqr": data.intensity_iqr(),
    });
    s.finish("synthgen", summary)
}

pub fn train_classifier(args: &WithData) -> Result<Value> {
    let mut s = Session::open(&args.common)?;
    let data = s.load_data(&args.data)?;
    let arch = s.config.classifier_arch(data.shape());
    let run = fit_classifier(&data, arch, &s.config.classifier)?;
    run.model.save(&s.out.join(CLASSIFIER_CHECKPOINT))?;
    write_jsonl(&s.out.join(CLASSIFIER_LOG), &run.epochs)?;
    let last = run.epochs.last();
    let summary = json!({
        "initial_loss": run.initial_loss,
        "train_accuracy": last.map(|e| e.train_accuracy),
        "test_accuracy": last.map(|e| e.test_accuracy),
    });
    s.finish("train-classifier", summary)
}

pub fn train_simulator(args: &WithModels) -> Result<Value> {
    let mut s = Session::open(&args.common)?;
    let data = s.load_data(&args.data)?;
    let (classifier, _) = s.load_classifier(&args.classifier)?;
    let arch = s.config.simulator_arch(data.shape());
    let run = train_simulator_pair(&classifier, &data, arch, &s.config.simulator)?;
    let source = PatternSource::of_simulator(&run.model.arch);
    run.model.save(&simulator_checkpoint(&s.out, source))?;
    write_jsonl(&s.out.join(simulator_log(source)), &run.log)?;
    let summary = json!({
        "simulator": source.tag(),
        "final": run.log.last(),
    });
    s.finish("train-simulator", summary)
}

fn write_method_maps(
    dir: &Path,
    source: PatternSource,
    data: &SyntheticDataset,
    indices: &[usize],
    patterns: &[PatternEstimate],
    simulated: Option<&[Tensor<f32>]>,
    classifier_hash: &str,
) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|source| cfsim::Error::Io { path: dir.to_path_buf(), source })?;
    }
    let maps: Vec<SubjectMaps<'_>> = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| SubjectMaps {
            subject_id: data.samples[i].subject_id,
            group: data.samples[i].group,
            pattern: &patterns[k].values,
            raw: Some(&data.samples[i].pixels),
            simulated: simulated.map(|s| &s[k]),
        })
        .collect();
    write_pattern_set(dir, source, data.shape(), classifier_hash, &maps)?;
    let values: Vec<_> = patterns.iter().map(|p| p.values.clone()).collect();
    write_map(&dir.join(GROUP_AVERAGE), &group_average_map(&values)?)?;
    write_map(&dir.join(GROUP_TRUTH), &ground_truth_group_difference(data, indices)?)?;
    Ok(())
}

#[derive(Serialize)]
struct OcclusionRecord<'a> {
    method: PatternSource,
    shape: &'a [usize],
    classifier_sha256: &'a str,
    map: &'a OcclusionMap,
}

pub fn explain(args: &ExplainArgs) -> Result<Value> {
    let m = &args.models;
    let mut s = Session::open(&m.common)?;
    let data = s.load_data(&m.data)?;
    let (classifier, hash) = s.load_classifier(&m.classifier)?;
    let indices = data.indices(s.config.explain.split, None);
    let mut written = Vec::new();
    match args.method {
        Method::Proposed => {
            for (source, sim) in s.load_simulators(&m.simulator)? {
                let patterns = proposed_patterns(&sim, &data, &indices, source)?;
                let simulated: Vec<_> = simulate_samples(&sim, &data, &indices)?.into_iter().map(|(img, _)| img).collect();
                let dir = pattern_dir(&s.out, source);
                write_method_maps(&dir, source, &data, &indices, &patterns, Some(&simulated), &hash)?;
                written.push(source.tag());
            }
        }
        Method::Occlusion => {
            let cfg = &s.config.explain;
            let window = s.config.occlusion_window(data.shape().len());
            let map = occlusion_map(&classifier, &data, &indices, &window, cfg.occlusion_stride, cfg.occlusion_fill)?;
            let dir = pattern_dir(&s.out, PatternSource::Occlusion);
            let record = OcclusionRecord {
                method: PatternSource::Occlusion,
                shape: data.shape(),
                classifier_sha256: &hash,
                map: &map,
            };
            write_json(&dir.join(OCCLUSION_FILE), &record)?;
            let full: Vec<f32> = map.full_resolution(data.shape()).data().iter().map(|&v| v as f32).collect();
            write_f32(&dir.join(OCCLUSION_MAP), &full)?;
            written.push(PatternSource::Occlusion.tag());
        }
        baseline => {
            let source = match baseline {
                Method::Bp => PatternSource::Bp,
                Method::GuidedBp => PatternSource::GuidedBp,
                Method::GradCam => PatternSource::GradCam,
                _ => PatternSource::GuidedGradCam,
            };
            let layer = s.config.explain.cam_layer.unwrap_or_else(|| default_cam_layer(&classifier));
            let patterns = baseline_patterns(&classifier, &data, &indices, source, layer)?;
            let dir = pattern_dir(&s.out, source);
            write_method_maps(&dir, source, &data, &indices, &patterns, None, &hash)?;
            written.push(source.tag());
        }
    }
    s.finish("explain", json!({ "methods": written }))
}

pub fn evaluate(args: &WithModels) -> Result<Value> {
    let mut s = Session::open(&args.common)?;
    let data = s.load_data(&args.data)?;
    let (classifier, _) = s.load_classifier(&args.classifier)?;
    let sims = s.load_simulators(&args.simulator)?;
    let layer = s.config.explain.cam_layer.unwrap_or_else(|| default_cam_layer(&classifier));
    let refs: Vec<(PatternSource, &CoupledSimulator<f32>)> = sims.iter().map(|(src, m)| (*src, m)).collect();
    let eval: Evaluation = cfsim::evalviz::evaluate(
        &classifier,
        &refs,
        &data,
        s.config.explain.split,
        layer,
        &SUBJECT_BASELINES,
    )?;
    write_json(&s.out.join(EVALUATION_FILE), &eval)?;
    let table: serde_json::Map<String, Value> = eval
        .ncc_table()
        .into_iter()
        .map(|(m, v)| (m.tag().to_string(), json!(v)))
        .collect();
    let summary = json!({
        "test_accuracy": eval.test_accuracy,
        "mean_ncc": table,
        "spearman_remove": eval.simulators.iter().map(|r| (r.source.tag(), r.logits.spearman_remove)).collect::<std::collections::BTreeMap<_, _>>(),
    });
    s.finish("evaluate", summary)
}

pub fn report(args: &Common) -> Result<Value> {
    let s = Session::open(args)?;
    let files = render_report(&s.out)?;
    let names: Vec<String> = files
        .iter()
        .map(|p| p.strip_prefix(&s.out).unwrap_or(p).display().to_string())
        .collect();
    s.finish("report", json!({ "figures": names }))
}
