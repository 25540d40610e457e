//! Network building blocks and the two model families.

pub mod checkpoint;
pub mod classifier;
pub mod condconv;
pub mod init;
pub mod simulator;

pub use classifier::{ClassifierArch, LogitClassifier, LogitModel, ModelTrace};
pub use condconv::{condconv_forward, route_weights, route_weights_value, Activation, CondConvLayer, RoutingParams, Task};
pub use simulator::{BnMode, BnUpdate, CoupledSimulator, Coupling, OutputMode, SimForward, SimulatorArch};

/// Classifier of the 2-d synthetic experiment.
pub fn build_classifier_2d(seed: u64) -> crate::Result<LogitClassifier<f32>> {
    LogitClassifier::new(ClassifierArch::default_2d(), seed)
}

/// Volumetric classifier for cubic inputs of the given side length.
pub fn build_classifier_3d(side: usize, seed: u64) -> crate::Result<LogitClassifier<f32>> {
    LogitClassifier::new(ClassifierArch::default_3d(side), seed)
}

pub fn build_simulator(mode: OutputMode, dims: usize, seed: u64) -> crate::Result<CoupledSimulator<f32>> {
    let arch = match dims {
        2 => SimulatorArch::default_2d(mode),
        3 => SimulatorArch::default_3d(mode, 32),
        _ => return Err(crate::Error::InvalidParameter(format!("unsupported dimensionality {dims}"))),
    };
    CoupledSimulator::new(arch, seed)
}
