//! Materials data flywheel: crystal graphs, a graph-convolution property
//! predictor, a conditional structure generator, KDE condition sampling and
//! the scenario/arm orchestration that mixes synthetic with real data.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`, which the pipeline and CLI use.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod flywheel;
pub mod generator;
pub mod graph;
pub mod kde;
pub mod lattice;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod rng;
pub mod rundir;
pub mod scalar;
pub mod structure;
pub mod toy;

pub use error::{Error, Result};
pub use flywheel::{derive_seed, ArmResult, ArmSpec, Composition, Flywheel, RunConfig, Scenario};
pub use scalar::Scalar;
pub use structure::{CrystalStructure, DatasetMeta, LabelKind, PropertyRecord};

pub type Structure = structure::CrystalStructure<f64>;
pub type Record = structure::PropertyRecord<f64>;
pub type Graph = graph::CrystalGraph<f64>;
pub type Neighbors = graph::NeighborParams<f64>;
pub type Predictor = predictor::PredictorModel<f64>;
pub type Generator = generator::GeneratorModel<f64>;
pub type Kde = kde::KdeModel<f64>;
pub type Pipeline = flywheel::Flywheel<f64>;

pub type Structure32 = structure::CrystalStructure<f32>;
pub type Record32 = structure::PropertyRecord<f32>;
pub type Predictor32 = predictor::PredictorModel<f32>;
pub type Generator32 = generator::GeneratorModel<f32>;
