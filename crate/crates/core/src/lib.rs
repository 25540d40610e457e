//! Interpreting image classifiers with coupled, cycle-consistent simulator
//! networks that inject or remove the class-defining pattern.

pub mod error;
pub mod evalviz;
pub mod io;
pub mod layers;
pub mod saliency;
pub mod synthdata;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
