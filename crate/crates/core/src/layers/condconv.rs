//! Conditionally parameterized convolution.
//!
//! The kernel applied to each sample is a mixture `sum_k alpha_k W_k` of `K`
//! expert kernels. Mixture weights come from a routing function that looks at
//! the channel means of the incoming features and at the task label:
//! `alpha_k = sigmoid(<[mean(f), t], R_k>)`. Each weight is an independent
//! sigmoid; they are not normalized to sum to one.

use cfsim_tensor::{Bound, Graph, ParamId, ParamKind, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::init::{kaiming_uniform, normal};

/// Simulation task; its label conditions the routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Inject the pattern (control to case), `t = 0`.
    Inject,
    /// Remove the pattern (case to control), `t = 1`.
    Remove,
}

impl Task {
    pub fn label(self) -> f64 {
        match self {
            Task::Inject => 0.0,
            Task::Remove => 1.0,
        }
    }

    pub fn inverse(self) -> Task {
        match self {
            Task::Inject => Task::Remove,
            Task::Remove => Task::Inject,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, T::from_f64_lossy(s)),
        }
    }
}

/// Routing weights `R: [K, channels + 1]`; the last column multiplies `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingParams {
    pub weight: ParamId,
    pub experts: usize,
    pub channels: usize,
}

impl RoutingParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        experts: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::InvalidParameter("expert count must be at least 1".into()));
        }
        let w = normal(&[experts, channels + 1], 0.5, rng);
        Ok(Self {
            weight: store.add(name, w, ParamKind::Trainable)?,
            experts,
            channels,
        })
    }
}

/// Mixture weights `[N, K]` for features `f: [N, C, S...]`.
pub fn route_weights<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    f: Var,
    task: Task,
    routing: &RoutingParams,
) -> Result<Var> {
    let channels = g.shape(f)[1];
    if channels != routing.channels {
        return Err(Error::DimensionMismatch(format!(
            "routing expects {} feature channels, got {channels}",
            routing.channels
        )));
    }
    let pooled = g.global_avg_pool(f);
    let z = g.append_column(pooled, T::from_f64_lossy(task.label()));
    let logits = g.linear(z, bound[routing.weight], None);
    Ok(g.sigmoid(logits))
}

/// Stand-alone evaluation of the routing weights.
pub fn route_weights_value<T: Real>(f: &Tensor<T>, task: Task, routing_weight: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = routing_weight.shape();
    if shape.len() != 2 || f.ndim() < 3 || shape[1] != f.shape()[1] + 1 {
        return Err(Error::DimensionMismatch(format!(
            "routing weight {shape:?} incompatible with features {:?}",
            f.shape()
        )));
    }
    let mut store = ParamStore::new();
    let weight = store.add("r", routing_weight.clone(), ParamKind::Trainable)?;
    let routing = RoutingParams {
        weight,
        experts: shape[0],
        channels: shape[1] - 1,
    };
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let fv = g.constant(f.clone());
    let a = route_weights(&mut g, &bound, fv, task, &routing)?;
    Ok(g.value(a).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondConvLayer {
    /// `[K, Cout, Cin, k, ..., k]`
    pub experts: ParamId,
    pub routing: RoutingParams,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dims: usize,
    pub activation: Activation,
}

impl CondConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        experts: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let routing = RoutingParams::new(store, &format!("{name}.routing"), c_in, experts, rng)?;
        let mut shape = vec![experts, c_out, c_in];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let fan_in = c_in * kernel.pow(dims as u32);
        let w = kaiming_uniform(&shape, fan_in, rng);
        let experts_id = store.add(format!("{name}.experts"), w, ParamKind::Trainable)?;
        Ok(Self {
            experts: experts_id,
            routing,
            c_in,
            c_out,
            kernel,
            dims,
            activation,
        })
    }

    /// Shape of one expert kernel.
    pub fn kernel_shape(&self) -> Vec<usize> {
        let mut s = vec![self.c_out, self.c_in];
        s.extend(std::iter::repeat_n(self.kernel, self.dims));
        s
    }

    /// Per-sample mixed kernels `[N, Cout, Cin, k...]` given weights `[N, K]`.
    pub fn mixed_kernels<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, alpha: Var) -> Var {
        let n = g.shape(alpha)[0];
        let ks = self.kernel_shape();
        let m: usize = ks.iter().product();
        let flat = g.reshape(bound[self.experts], &[self.routing.experts, m]);
        let mixed = g.matmul(alpha, flat);
        g.reshape(mixed, &[[n].as_slice(), &ks].concat())
    }

    /// Pre-activation output `sum_k alpha_k (W_k * f)`, computed as one
    /// convolution with the mixed kernel.
    pub fn forward_linear<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, f: Var, task: Task) -> Result<Var> {
        let fs = g.shape(f);
        if fs.len() != self.dims + 2 || fs[1] != self.c_in {
            return Err(Error::DimensionMismatch(format!(
                "condconv expects [N, {}, {}-d grid], got {fs:?}",
                self.c_in, self.dims
            )));
        }
        let alpha = route_weights(g, bound, f, task, &self.routing)?;
        let kernels = self.mixed_kernels(g, bound, alpha);
        Ok(g.conv_per_sample(f, kernels))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, f: Var, task: Task) -> Result<Var> {
        let y = self.forward_linear(g, bound, f, task)?;
        Ok(self.activation.apply(g, y))
    }
}

/// Convenience wrapper: `condconv_forward(f, t, layer)` on plain tensors.
pub fn condconv_forward<T: Real>(
    store: &ParamStore<T>,
    layer: &CondConvLayer,
    f: &Tensor<T>,
    task: Task,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let fv = g.constant(f.clone());
    let y = layer.forward(&mut g, &bound, fv, task)?;
    Ok(g.value(y).clone())
}
