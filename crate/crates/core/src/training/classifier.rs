use cfsim_tensor::{Adam, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ClassifierArch, LogitClassifier, LogitModel};
use crate::synthdata::{Group, Split, SyntheticDataset};
use crate::training::losses::{bce_with_logits, bce_with_logits_var};
use crate::training::ClassifierConfig;

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub model: LogitClassifier<f32>,
    pub epochs: Vec<EpochRecord>,
    /// Loss on the first batch before any update.
    pub initial_loss: f64,
}

/// Logits for the given samples, evaluated in chunks.
pub fn logits_of(model: &impl LogitModel<f32>, data: &SyntheticDataset, indices: &[usize]) -> Vec<f64> {
    indices
        .chunks(EVAL_CHUNK)
        .flat_map(|c| model.logits(&data.batch::<f32>(c)).into_iter().map(f64::from))
        .collect()
}

/// Fraction of samples whose sign of logit matches the label.
pub fn accuracy(model: &impl LogitModel<f32>, data: &SyntheticDataset, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let logits = logits_of(model, data, indices);
    let labels = data.labels(indices);
    let hits = logits
        .iter()
        .zip(&labels)
        .filter(|(&p, &g)| (p > 0.0) == (g == Group::Case))
        .count();
    hits as f64 / indices.len() as f64
}

/// Mean of per-group accuracies given precomputed logits.
pub fn balanced_accuracy(logits: &[f64], labels: &[Group]) -> f64 {
    let mut hit = [0usize; 2];
    let mut n = [0usize; 2];
    for (&p, &g) in logits.iter().zip(labels) {
        let k = g.label() as usize;
        n[k] += 1;
        if (p > 0.0) == (g == Group::Case) {
            hit[k] += 1;
        }
    }
    let groups: Vec<f64> = (0..2).filter(|&k| n[k] > 0).map(|k| hit[k] as f64 / n[k] as f64).collect();
    groups.iter().sum::<f64>() / groups.len().max(1) as f64
}

pub fn train_classifier(
    data: &SyntheticDataset,
    arch: ClassifierArch,
    cfg: &ClassifierConfig,
) -> Result<ClassifierRun> {
    train_classifier_with(data, arch, cfg, &mut |_, _| Ok(()))
}

/// Trains with binary cross-entropy on the train split; `on_epoch` sees the
/// model after every epoch.
pub fn train_classifier_with(
    data: &SyntheticDataset,
    arch: ClassifierArch,
    cfg: &ClassifierConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &LogitClassifier<f32>) -> Result<()>,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    if arch.input_shape != data.shape() {
        return Err(Error::ShapeMismatch {
            expected: arch.input_shape.clone(),
            got: data.shape().to_vec(),
        });
    }
    let mut train = data.indices(Split::Train, None);
    let test = data.indices(Split::Test, None);
    for g in [Group::Control, Group::Case] {
        if data.indices(Split::Train, Some(g)).is_empty() {
            return Err(Error::Dataset(format!("train split has no samples of group {}", g.label())));
        }
    }
    let mut model = LogitClassifier::<f32>::new(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
    let mut adam = Adam::new(cfg.lr as f32);
    let mut initial_loss = None;
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for batch in train.chunks(cfg.batch_size) {
            let labels: Vec<f64> = data.labels(batch).iter().map(|g| g.label() as f64).collect();
            let mut g = Graph::new();
            let bound = model.store.bind(&mut g, true);
            let x = g.constant(data.batch::<f32>(batch));
            let trace = model.forward(&mut g, &bound, x);
            let loss = bce_with_logits_var(&mut g, trace.logits, &labels);
            let value = g.value(loss).item() as f64;
            initial_loss.get_or_insert(value);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            let grads = g.backward(loss);
            adam.step(&mut model.store, &bound.collect(&grads));
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: accuracy(&model, data, &train),
            test_accuracy: accuracy(&model, data, &test),
        };
        on_epoch(&record, &model)?;
        epochs.push(record);
    }
    let initial_loss = match initial_loss {
        Some(v) => v,
        None => {
            let first: Vec<usize> = train.iter().copied().take(cfg.batch_size).collect();
            let labels: Vec<f64> = data.labels(&first).iter().map(|g| g.label() as f64).collect();
            bce_with_logits(&logits_of(&model, data, &first), &labels)
        }
    };
    model.freeze();
    Ok(ClassifierRun {
        model,
        epochs,
        initial_loss,
    })
}
