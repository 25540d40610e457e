//! Task-conditioned U-net realizing both simulators `G1` (inject) and `G2`
//! (remove) with one parameter set.

use cfsim_tensor::{BatchStats, Bound, Graph, ParamId, ParamKind, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::classifier::check_store_layout;
use crate::layers::condconv::{Activation, CondConvLayer, Task};
use crate::layers::init::kaiming_uniform;
use crate::warp::{warp_var, WarpField};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// The head predicts an additive intensity change.
    DirectImage,
    /// The head predicts a displacement field that warps the input.
    WarpField,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// One CondConv network shared by both tasks.
    Condconv,
    /// Two independent networks with conventional convolutions.
    SeparateEncoders,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorArch {
    pub input_shape: Vec<usize>,
    /// Encoder channels; one conv / norm / pool stack each.
    pub channels: Vec<usize>,
    /// Width of the fully connected bottleneck.
    pub fc: usize,
    pub kernel: usize,
    pub experts: usize,
    pub mode: OutputMode,
    pub coupling: Coupling,
}

impl SimulatorArch {
    /// Four stacks `{1, 2, 4, 8}`, bottleneck of 64, three experts.
    pub fn default_2d(mode: OutputMode) -> Self {
        Self {
            input_shape: vec![32, 32],
            channels: vec![1, 2, 4, 8],
            fc: 64,
            kernel: 3,
            experts: 3,
            mode,
            coupling: Coupling::Condconv,
        }
    }

    /// Five stacks `{16, 32, 64, 16, 16}`, bottleneck of 512.
    pub fn default_3d(mode: OutputMode, side: usize) -> Self {
        Self {
            input_shape: vec![side; 3],
            channels: vec![16, 32, 64, 16, 16],
            fc: 512,
            kernel: 3,
            experts: 3,
            mode,
            coupling: Coupling::Condconv,
        }
    }

    pub fn dims(&self) -> usize {
        self.input_shape.len()
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn bottleneck_shape(&self) -> Vec<usize> {
        let f = 1usize << self.levels();
        let mut s = vec![*self.channels.last().unwrap_or(&1)];
        s.extend(self.input_shape.iter().map(|&n| n / f));
        s
    }

    pub fn bottleneck_features(&self) -> usize {
        self.bottleneck_shape().iter().product()
    }

    pub fn output_channels(&self) -> usize {
        match self.mode {
            OutputMode::DirectImage => 1,
            OutputMode::WarpField => self.dims(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.levels();
        if !(2..=3).contains(&self.dims()) {
            return Err(Error::InvalidParameter("simulator input must be 2-d or 3-d".into()));
        }
        if self.channels.is_empty()
            || self.channels.contains(&0)
            || self.kernel.is_multiple_of(2)
            || self.fc == 0
            || self.experts == 0
        {
            return Err(Error::InvalidParameter(format!("invalid simulator architecture {self:?}")));
        }
        if self.input_shape.iter().any(|&n| n % f != 0 || n < f) {
            return Err(Error::InvalidParameter(format!(
                "input shape {:?} is not divisible by {f}",
                self.input_shape
            )));
        }
        Ok(())
    }
}

/// Normalization statistics used by a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Stored running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
enum ConvUnit {
    Cond(CondConvLayer),
    Plain { weight: ParamId, bias: ParamId },
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        arch: &SimulatorArch,
        conditional: bool,
        c_in: usize,
        c_out: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = arch.dims();
        if conditional {
            let mut layer = CondConvLayer::new(
                store,
                name,
                d,
                c_in,
                c_out,
                arch.kernel,
                arch.experts,
                Activation::Identity,
                rng,
            )?;
            if zero {
                let w = store.get_mut(layer.experts);
                *w = Tensor::zeros(w.shape());
            }
            layer.activation = Activation::Identity;
            Ok(ConvUnit::Cond(layer))
        } else {
            let mut shape = vec![c_out, c_in];
            shape.extend(std::iter::repeat_n(arch.kernel, d));
            let w = if zero {
                Tensor::zeros(&shape)
            } else {
                kaiming_uniform(&shape, c_in * arch.kernel.pow(d as u32), rng)
            };
            let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
            let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Trainable)?;
            Ok(ConvUnit::Plain { weight, bias })
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, f: Var, task: Task) -> Result<Var> {
        match self {
            ConvUnit::Cond(layer) => layer.forward_linear(g, bound, f, task),
            ConvUnit::Plain { weight, bias } => Ok(g.conv(f, bound[*weight], Some(bound[*bias]))),
        }
    }

    fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        match self {
            ConvUnit::Cond(layer) => layer.c_out,
            ConvUnit::Plain { weight, .. } => store.get(*weight).shape()[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[c], T::one()), ParamKind::Buffer)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv: ConvUnit,
    bn: BatchNorm,
}

/// Running-statistic update produced by a training-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct UNet {
    encoder: Vec<Block>,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    decoder: Vec<Block>,
    head: ConvUnit,
}

impl UNet {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        arch: &SimulatorArch,
        conditional: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ch = &arch.channels;
        let mut encoder = Vec::new();
        let mut c_in = 1;
        for (i, &c) in ch.iter().enumerate() {
            let name = format!("{prefix}enc{i}");
            let conv = ConvUnit::new(store, &format!("{name}.conv"), arch, conditional, c_in, c, false, rng)?;
            let bn = BatchNorm::new(store, &format!("{name}.bn"), c)?;
            encoder.push(Block { conv, bn });
            c_in = c;
        }
        let flat = arch.bottleneck_features();
        let fc1 = (
            store.add(
                format!("{prefix}fc1.weight"),
                kaiming_uniform(&[arch.fc, flat], flat, rng),
                ParamKind::Trainable,
            )?,
            store.add(format!("{prefix}fc1.bias"), Tensor::zeros(&[arch.fc]), ParamKind::Trainable)?,
        );
        let fc2 = (
            store.add(
                format!("{prefix}fc2.weight"),
                kaiming_uniform(&[flat, arch.fc], arch.fc, rng),
                ParamKind::Trainable,
            )?,
            store.add(format!("{prefix}fc2.bias"), Tensor::zeros(&[flat]), ParamKind::Trainable)?,
        );
        let mut decoder = Vec::new();
        for i in 0..ch.len() {
            let c_out = ch[i.saturating_sub(1)];
            let name = format!("{prefix}dec{i}");
            let conv = ConvUnit::new(store, &format!("{name}.conv"), arch, conditional, 2 * ch[i], c_out, false, rng)?;
            let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out)?;
            decoder.push(Block { conv, bn });
        }
        let head = ConvUnit::new(
            store,
            &format!("{prefix}head"),
            arch,
            conditional,
            ch[0],
            arch.output_channels(),
            true,
            rng,
        )?;
        Ok(Self {
            encoder,
            fc1,
            fc2,
            decoder,
            head,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block<T: Real>(
        &self,
        block: &Block,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bound: &Bound,
        h: Var,
        task: Task,
        mode: BnMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let c = block.conv.forward(g, bound, h, task)?;
        let eps = T::from_f64_lossy(BN_EPS);
        let bn = &block.bn;
        let y = match mode {
            BnMode::Train => {
                let (y, stats) = g.batch_norm_train(c, bound[bn.gamma], bound[bn.beta], eps);
                updates.push(BnUpdate {
                    mean: bn.running_mean,
                    var: bn.running_var,
                    stats,
                });
                y
            }
            BnMode::Eval => g.batch_norm_eval(
                c,
                bound[bn.gamma],
                bound[bn.beta],
                store.get(bn.running_mean).data(),
                store.get(bn.running_var).data(),
                eps,
            ),
        };
        Ok(g.leaky_relu(y, T::from_f64_lossy(LEAKY_SLOPE)))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        arch: &SimulatorArch,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bound: &Bound,
        x: Var,
        task: Task,
        mode: BnMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            let a = self.block(block, g, store, bound, h, task, mode, updates)?;
            skips.push(a);
            h = g.max_pool2(a);
        }
        let flat = g.reshape(h, &[n, arch.bottleneck_features()]);
        let z = g.linear(flat, bound[self.fc1.0], Some(bound[self.fc1.1]));
        let z = g.relu(z);
        let z = g.linear(z, bound[self.fc2.0], Some(bound[self.fc2.1]));
        h = g.reshape(z, &[[n].as_slice(), &arch.bottleneck_shape()].concat());
        for (i, block) in self.decoder.iter().enumerate().rev() {
            let up = g.upsample2(h);
            let cat = g.concat_channels(up, skips[i]);
            h = self.block(block, g, store, bound, cat, task, mode, updates)?;
        }
        self.head.forward(g, bound, h, task)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Nets {
    Shared(UNet),
    Separate { inject: UNet, remove: UNet },
}

/// Result of one simulator pass.
#[derive(Clone, Debug)]
pub struct SimForward<T> {
    /// Simulated image `[N, 1, S...]`.
    pub image: Var,
    /// Displacement field `[N, d, S...]` in warp mode.
    pub field: Option<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Coupled simulator: `G1 = G(., t = 0)` injects the pattern and
/// `G2 = G(., t = 1)` removes it.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledSimulator<T> {
    pub arch: SimulatorArch,
    pub store: ParamStore<T>,
    nets: Nets,
}

impl<T: Real> CoupledSimulator<T> {
    pub fn new(arch: SimulatorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let nets = match arch.coupling {
            Coupling::Condconv => Nets::Shared(UNet::new(&mut store, "", &arch, true, &mut rng)?),
            Coupling::SeparateEncoders => Nets::Separate {
                inject: UNet::new(&mut store, "g1.", &arch, false, &mut rng)?,
                remove: UNet::new(&mut store, "g2.", &arch, false, &mut rng)?,
            },
        };
        Ok(Self { arch, store, nets })
    }

    pub fn from_store(arch: SimulatorArch, store: ParamStore<T>) -> Result<Self> {
        let template = Self::new(arch, 0)?;
        check_store_layout(&template.store, &store)?;
        Ok(Self { store, ..template })
    }

    pub fn cast<U: Real>(&self) -> CoupledSimulator<U> {
        CoupledSimulator {
            arch: self.arch.clone(),
            store: self.store.cast(),
            nets: self.nets.clone(),
        }
    }

    /// Output channels of the encoder stacks, in order.
    pub fn encoder_channels(&self) -> Vec<usize> {
        let net = match &self.nets {
            Nets::Shared(n) => n,
            Nets::Separate { inject, .. } => inject,
        };
        net.encoder.iter().map(|b| b.conv.out_channels(&self.store)).collect()
    }

    /// Number of distinct networks holding parameters (1 when coupled).
    pub fn network_count(&self) -> usize {
        match self.nets {
            Nets::Shared(_) => 1,
            Nets::Separate { .. } => 2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Records `G(x, t)` for `x: [N, 1, S...]`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var, task: Task, mode: BnMode) -> Result<SimForward<T>> {
        let xs = g.shape(x).to_vec();
        if xs.len() != self.arch.dims() + 2 || xs[1] != 1 || xs[2..] != self.arch.input_shape[..] {
            return Err(Error::ShapeMismatch {
                expected: [[0, 1].as_slice(), &self.arch.input_shape].concat(),
                got: xs,
            });
        }
        let net = match (&self.nets, task) {
            (Nets::Shared(n), _) => n,
            (Nets::Separate { inject, .. }, Task::Inject) => inject,
            (Nets::Separate { remove, .. }, Task::Remove) => remove,
        };
        let mut bn_updates = Vec::new();
        let out = net.forward(&self.arch, g, &self.store, bound, x, task, mode, &mut bn_updates)?;
        let (image, field) = match self.arch.mode {
            OutputMode::DirectImage => (g.add(x, out), None),
            OutputMode::WarpField => (warp_var(g, x, out)?, Some(out)),
        };
        Ok(SimForward {
            image,
            field,
            bn_updates,
        })
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            let count = u.stats.count;
            let unbias = if count > 1 {
                T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
            } else {
                T::one()
            };
            for (r, &b) in self.store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * b * unbias;
            }
        }
    }

    /// Inference-mode simulation of a batch `[N, 1, S...]`.
    pub fn simulate(&self, batch: &Tensor<T>, task: Task) -> Result<(Tensor<T>, Option<Vec<WarpField<T>>>)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &bound, x, task, BnMode::Eval)?;
        let image = g.value(out.image).clone();
        let fields = match out.field {
            Some(f) => {
                let f = g.value(f);
                let n = f.shape()[0];
                Some((0..n).map(|i| WarpField::new(f.index_outer(i))).collect::<Result<Vec<_>>>()?)
            }
            None => None,
        };
        Ok((image, fields))
    }
}
