//! Versioned JSON checkpoints. Parameters are stored row-major with
//! shortest round-trip decimal formatting, so `f64` values reload bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::predictor::PredictorModel;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const PREDICTOR_FORMAT: &str = "matwheel.predictor";
pub const GENERATOR_FORMAT: &str = "matwheel.generator";

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    version: u32,
    model: M,
}

fn to_json<M: Serialize>(format: &str, model: &M) -> Result<String> {
    Ok(serde_json::to_string(&Envelope { format: format.to_owned(), version: CHECKPOINT_VERSION, model })?)
}

fn from_json<M: DeserializeOwned>(format: &str, text: &str) -> Result<M> {
    let env: Envelope<M> = serde_json::from_str(text)?;
    if env.format != format {
        return Err(Error::Checkpoint(format!("expected format {format:?}, found {:?}", env.format)));
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", env.version)));
    }
    Ok(env.model)
}

pub fn predictor_to_json<T: Scalar>(model: &PredictorModel<T>) -> Result<String> {
    to_json(PREDICTOR_FORMAT, model)
}

pub fn predictor_from_json<T: Scalar>(text: &str) -> Result<PredictorModel<T>> {
    from_json(PREDICTOR_FORMAT, text)
}

pub fn generator_to_json<T: Scalar>(model: &GeneratorModel<T>) -> Result<String> {
    to_json(GENERATOR_FORMAT, model)
}

pub fn generator_from_json<T: Scalar>(text: &str) -> Result<GeneratorModel<T>> {
    from_json(GENERATOR_FORMAT, text)
}

pub fn save_predictor<T: Scalar>(path: &Path, model: &PredictorModel<T>) -> Result<()> {
    std::fs::write(path, predictor_to_json(model)?)?;
    Ok(())
}

pub fn load_predictor<T: Scalar>(path: &Path) -> Result<PredictorModel<T>> {
    predictor_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_generator<T: Scalar>(path: &Path, model: &GeneratorModel<T>) -> Result<()> {
    std::fs::write(path, generator_to_json(model)?)?;
    Ok(())
}

pub fn load_generator<T: Scalar>(path: &Path) -> Result<GeneratorModel<T>> {
    generator_from_json(&std::fs::read_to_string(path)?)
}
