use cfsim_tensor::{Bound, Graph, ParamId, ParamKind, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::init::kaiming_uniform;

/// Values recorded while evaluating a logit model on a batch.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    /// `[N]` pre-sigmoid logits.
    pub logits: Var,
    /// Candidate target layers for class-activation maps, `[N, C, S...]`.
    pub layers: Vec<Var>,
}

/// A differentiable image-to-logit model with fixed parameters.
///
/// Implemented by [`LogitClassifier`]; tests implement it for hand-built
/// networks.
pub trait LogitModel<T: Real> {
    /// Spatial shape of one input image.
    fn input_shape(&self) -> &[usize];

    /// Records the forward pass for `x: [N, 1, S...]` in `g`.
    fn trace(&self, g: &mut Graph<T>, x: Var) -> ModelTrace;

    /// Logits of a batch, without gradient tracking.
    fn logits(&self, batch: &Tensor<T>) -> Vec<T> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let t = self.trace(&mut g, x);
        g.value(t.logits).data().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub input_shape: Vec<usize>,
    /// Output channels of each conv / ReLU / max-pool stack.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
}

impl ClassifierArch {
    /// Three stacks `{2, 4, 8}` on 32x32 images, hidden layer of 16.
    pub fn default_2d() -> Self {
        Self {
            input_shape: vec![32, 32],
            channels: vec![2, 4, 8],
            kernel: 3,
            hidden: 16,
        }
    }

    /// Four 3x3x3 stacks `{16, 32, 64, 16}`, hidden layer of 64.
    pub fn default_3d(side: usize) -> Self {
        Self {
            input_shape: vec![side; 3],
            channels: vec![16, 32, 64, 16],
            kernel: 3,
            hidden: 64,
        }
    }

    pub fn dims(&self) -> usize {
        self.input_shape.len()
    }

    /// Spatial shape after all pooling stages.
    pub fn pooled_shape(&self) -> Vec<usize> {
        let f = 1usize << self.channels.len();
        self.input_shape.iter().map(|&n| n / f).collect()
    }

    /// Features entering the perceptron.
    pub fn flat_features(&self) -> usize {
        self.channels.last().copied().unwrap_or(1) * self.pooled_shape().iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.channels.len();
        if !(2..=3).contains(&self.dims()) {
            return Err(Error::InvalidParameter("classifier input must be 2-d or 3-d".into()));
        }
        if self.channels.is_empty() || self.kernel.is_multiple_of(2) || self.hidden == 0 {
            return Err(Error::InvalidParameter(format!("invalid classifier architecture {self:?}")));
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

#[derive(Clone, Debug, PartialEq)]
struct ConvStack {
    weight: ParamId,
    bias: ParamId,
}

/// Convolutional classifier `P` producing one logit per image; `p > 0`
/// predicts group 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitClassifier<T> {
    pub arch: ClassifierArch,
    pub store: ParamStore<T>,
    stacks: Vec<ConvStack>,
    hidden: (ParamId, ParamId),
    output: (ParamId, ParamId),
    frozen: bool,
}

impl<T: Real> LogitClassifier<T> {
    /// Random initialization; the output layer starts at zero so every
    /// initial logit is 0.
    pub fn new(arch: ClassifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = arch.dims();
        let mut stacks = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in arch.channels.iter().enumerate() {
            let mut shape = vec![c_out, c_in];
            shape.extend(std::iter::repeat_n(arch.kernel, d));
            let fan_in = c_in * arch.kernel.pow(d as u32);
            let weight = store.add(
                format!("conv{i}.weight"),
                kaiming_uniform(&shape, fan_in, &mut rng),
                ParamKind::Trainable,
            )?;
            let bias = store.add(format!("conv{i}.bias"), Tensor::zeros(&[c_out]), ParamKind::Trainable)?;
            stacks.push(ConvStack { weight, bias });
            c_in = c_out;
        }
        let flat = arch.flat_features();
        let hw = store.add(
            "fc1.weight",
            kaiming_uniform(&[arch.hidden, flat], flat, &mut rng),
            ParamKind::Trainable,
        )?;
        let hb = store.add("fc1.bias", Tensor::zeros(&[arch.hidden]), ParamKind::Trainable)?;
        let ow = store.add("fc2.weight", Tensor::zeros(&[1, arch.hidden]), ParamKind::Trainable)?;
        let ob = store.add("fc2.bias", Tensor::zeros(&[1]), ParamKind::Trainable)?;
        Ok(Self {
            arch,
            store,
            stacks,
            hidden: (hw, hb),
            output: (ow, ob),
            frozen: false,
        })
    }

    /// Rebuilds a classifier around stored parameters (names must match).
    pub fn from_store(arch: ClassifierArch, store: ParamStore<T>) -> Result<Self> {
        let template = Self::new(arch.clone(), 0)?;
        check_store_layout(&template.store, &store)?;
        Ok(Self { store, ..template })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn cast<U: Real>(&self) -> LogitClassifier<U> {
        LogitClassifier {
            arch: self.arch.clone(),
            store: self.store.cast(),
            stacks: self.stacks.clone(),
            hidden: self.hidden,
            output: self.output,
            frozen: self.frozen,
        }
    }

    /// Forward pass with parameters already bound into `g`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> ModelTrace {
        let mut h = x;
        let mut layers = Vec::with_capacity(self.stacks.len());
        for s in &self.stacks {
            let c = g.conv(h, bound[s.weight], Some(bound[s.bias]));
            let a = g.relu(c);
            layers.push(a);
            h = g.max_pool2(a);
        }
        let n = g.shape(x)[0];
        let flat = g.reshape(h, &[n, self.arch.flat_features()]);
        let z = g.linear(flat, bound[self.hidden.0], Some(bound[self.hidden.1]));
        let z = g.relu(z);
        let out = g.linear(z, bound[self.output.0], Some(bound[self.output.1]));
        let logits = g.reshape(out, &[n]);
        ModelTrace { logits, layers }
    }

    /// Logit of a single image `[S...]`.
    pub fn classify(&self, image: &Tensor<T>) -> Result<T> {
        if image.shape() != self.arch.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.arch.input_shape.clone(),
                got: image.shape().to_vec(),
            });
        }
        let batch = image
            .clone()
            .reshape(&[[1, 1].as_slice(), image.shape()].concat())?;
        Ok(self.logits(&batch)[0])
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }
}

impl<T: Real> LogitModel<T> for LogitClassifier<T> {
    fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    fn trace(&self, g: &mut Graph<T>, x: Var) -> ModelTrace {
        let bound = self.store.bind(g, false);
        self.forward(g, &bound, x)
    }
}

/// Checks that `actual` has exactly the tensors of `template`, in order.
pub(crate) fn check_store_layout<T: Real>(template: &ParamStore<T>, actual: &ParamStore<T>) -> Result<()> {
    if template.len() != actual.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            template.len(),
            actual.len()
        )));
    }
    for ((_, a), (_, b)) in template.iter().zip(actual.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() || a.kind != b.kind {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{}` {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok(())
}
