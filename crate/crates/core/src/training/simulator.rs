use cfsim_tensor::{Adam, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BnMode, CoupledSimulator, LogitClassifier, LogitModel, SimulatorArch, Task};
use crate::synthdata::{Group, Split, SyntheticDataset};
use crate::training::losses::{bce_variant_var, cycle_var, logit_shift_var};
use crate::training::{LossVariant, TrainConfig};
use crate::warp::smoothness_var;

/// Objective terms of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub step: usize,
    pub e_logit: f64,
    pub e_cycle: f64,
    pub e_phi: f64,
    pub e_total: f64,
}

#[derive(Clone, Debug)]
pub struct SimulatorRun {
    pub model: CoupledSimulator<f32>,
    pub log: Vec<LossBreakdown>,
}

pub fn train_simulator_pair(
    classifier: &LogitClassifier<f32>,
    data: &SyntheticDataset,
    arch: SimulatorArch,
    cfg: &TrainConfig,
) -> Result<SimulatorRun> {
    train_simulator_pair_with(classifier, data, arch, cfg, &mut |_, _| Ok(()))
}

/// Trains `G1` on control images and `G2` on case images of the train split
/// against the frozen classifier.
///
/// The architecture's mode, coupling and expert count are taken from `cfg`.
pub fn train_simulator_pair_with(
    classifier: &LogitClassifier<f32>,
    data: &SyntheticDataset,
    mut arch: SimulatorArch,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &CoupledSimulator<f32>) -> Result<()>,
) -> Result<SimulatorRun> {
    cfg.validate()?;
    if !classifier.is_frozen() {
        return Err(Error::ClassifierNotFrozen);
    }
    arch.mode = cfg.mode;
    arch.coupling = cfg.coupling;
    arch.experts = cfg.experts;
    if arch.input_shape != data.shape() || classifier.arch.input_shape != data.shape() {
        return Err(Error::ShapeMismatch {
            expected: data.shape().to_vec(),
            got: arch.input_shape.clone(),
        });
    }
    let mut xs = data.indices(Split::Train, Some(Group::Control));
    let mut ys = data.indices(Split::Train, Some(Group::Case));
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Dataset("both groups need training samples".into()));
    }
    let mut sim = CoupledSimulator::<f32>::new(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0051_3a11);
    let mut adam = Adam::new(cfg.lr as f32);
    let bs = cfg.batch_size;
    let steps = xs.len().max(ys.len()).div_ceil(bs);
    let mut log = Vec::with_capacity(cfg.epochs * steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        xs.shuffle(&mut rng);
        ys.shuffle(&mut rng);
        for k in 0..steps {
            let bx = cyclic_batch(&xs, k * bs, bs);
            let by = cyclic_batch(&ys, k * bs, bs);
            let b = sim_step(&mut sim, &mut adam, classifier, data, &bx, &by, cfg)?;
            log.push(LossBreakdown { epoch, step, ..b });
            step += 1;
        }
        on_epoch(epoch, &sim)?;
    }
    Ok(SimulatorRun { model: sim, log })
}

fn cyclic_batch(order: &[usize], start: usize, len: usize) -> Vec<usize> {
    let len = len.min(order.len());
    (0..len).map(|i| order[(start + i) % order.len()]).collect()
}

fn sim_step(
    sim: &mut CoupledSimulator<f32>,
    adam: &mut Adam<f32>,
    classifier: &LogitClassifier<f32>,
    data: &SyntheticDataset,
    bx: &[usize],
    by: &[usize],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let xb = data.batch::<f32>(bx);
    let yb = data.batch::<f32>(by);
    let raw_x: Vec<f64> = classifier.logits(&xb).into_iter().map(f64::from).collect();
    let raw_y: Vec<f64> = classifier.logits(&yb).into_iter().map(f64::from).collect();

    let mut g = Graph::new();
    let bound = sim.store.bind(&mut g, true);
    let pbound = classifier.store.bind(&mut g, false);
    let x = g.constant(xb.clone());
    let y = g.constant(yb.clone());
    let fx = sim.forward(&mut g, &bound, x, Task::Inject, BnMode::Train)?;
    let fy = sim.forward(&mut g, &bound, y, Task::Remove, BnMode::Train)?;
    let cx = sim.forward(&mut g, &bound, fx.image, Task::Remove, BnMode::Train)?;
    let cy = sim.forward(&mut g, &bound, fy.image, Task::Inject, BnMode::Train)?;

    let p_sim_x = classifier.forward(&mut g, &pbound, fx.image).logits;
    let p_sim_y = classifier.forward(&mut g, &pbound, fy.image).logits;
    let e_logit = match cfg.loss_variant {
        LossVariant::LogitShift => logit_shift_var(&mut g, &raw_x, p_sim_x, &raw_y, p_sim_y, cfg.delta)?,
        LossVariant::Bce => bce_variant_var(&mut g, p_sim_x, p_sim_y),
    };
    let e_cycle = cycle_var(&mut g, &xb, cx.image, &yb, cy.image)?;
    let fields: Vec<Var> = [&fx, &fy, &cx, &cy].iter().filter_map(|f| f.field).collect();
    let mut total = g.add(e_logit, e_cycle);
    let mut e_phi = 0.0;
    for f in fields {
        let s = smoothness_var(&mut g, f, cfg.lambda_phi as f32);
        e_phi += g.value(s).item() as f64;
        total = g.add(total, s);
    }
    let e_logit = g.value(e_logit).item() as f64;
    let e_cycle = g.value(e_cycle).item() as f64;

    let grads = g.backward(total);
    adam.step(&mut sim.store, &bound.collect(&grads));
    for f in [&fx, &fy, &cx, &cy] {
        sim.apply_bn_updates(&f.bn_updates);
    }
    Ok(LossBreakdown {
        epoch: 0,
        step: 0,
        e_logit,
        e_cycle,
        e_phi,
        e_total: e_logit + e_cycle + e_phi,
    })
}
