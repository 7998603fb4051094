//! Small crystal graph convolutional regressor.
//!
//! Node states start as species embeddings. Each convolution adds, for every
//! edge `i -> j`, the message `sigmoid(gate(z)) * softplus(core(z))` with
//! `z = [v_i, v_j, e_ij]` to `v_i`. States are mean-pooled, passed through a
//! softplus hidden layer and a linear output, then de-standardized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, CrystalGraph, NeighborParams};
use crate::nn::{sigmoid, softplus, standardization, Dense};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{mix_seed, seeded, shuffle, uniform};
use crate::scalar::{from_usize, Scalar};
use crate::structure::{CrystalStructure, LabelKind, PropertyRecord, MAX_ATOMIC_NUMBER};

const N_SPECIES: usize = MAX_ATOMIC_NUMBER as usize;
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub n_conv: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            n_conv: 2,
            hidden_dim: 32,
            learning_rate: 0.001,
            epochs: 300,
            batch_size: 32,
            patience: 50,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl PredictorConfig {
    /// Returns `(field, problem)` for every violated constraint.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("n_conv", self.n_conv),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
        ] {
            if v < 1 {
                out.push((name, "must be at least 1".to_owned()));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(("learning_rate", "must be finite and positive".to_owned()));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer<T> {
    pub gate: Dense<T>,
    pub core: Dense<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams<T> {
    /// Row-major `118 × embed_dim`; row `Z - 1` embeds atomic number `Z`.
    pub species_embedding: Vec<T>,
    pub convs: Vec<ConvLayer<T>>,
    pub readout_hidden: Dense<T>,
    pub readout_out: Dense<T>,
}

impl<T: Scalar> PredictorParams<T> {
    fn zeros_like(other: &Self) -> Self {
        let z = |d: &Dense<T>| Dense::zeros(d.n_in, d.n_out);
        Self {
            species_embedding: vec![T::zero(); other.species_embedding.len()],
            convs: other.convs.iter().map(|c| ConvLayer { gate: z(&c.gate), core: z(&c.core) }).collect(),
            readout_hidden: z(&other.readout_hidden),
            readout_out: z(&other.readout_out),
        }
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.species_embedding];
        for c in &self.convs {
            out.extend(c.gate.tensors());
            out.extend(c.core.tensors());
        }
        out.extend(self.readout_hidden.tensors());
        out.extend(self.readout_out.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.species_embedding];
        for c in &mut self.convs {
            out.extend(c.gate.tensors_mut());
            out.extend(c.core.tensors_mut());
        }
        out.extend(self.readout_hidden.tensors_mut());
        out.extend(self.readout_out.tensors_mut());
        out
    }

    /// Names parallel to [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["species_embedding".to_owned()];
        for l in 0..self.convs.len() {
            for part in ["gate.weight", "gate.bias", "core.weight", "core.bias"] {
                out.push(format!("conv{l}.{part}"));
            }
        }
        out.extend(["readout_hidden.weight", "readout_hidden.bias", "readout_out.weight", "readout_out.bias"].map(String::from));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PredictorModel<T> {
    pub config: PredictorConfig,
    pub neighbor: NeighborParams<T>,
    pub params: PredictorParams<T>,
    pub target_mean: T,
    pub target_std: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean absolute error on standardized targets, one entry per epoch run.
    pub epoch_losses: Vec<f64>,
    /// `None` when no validation data was given.
    pub best_val_mae: Option<f64>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// A graph paired with its training target in dataset units.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T> {
    pub graph: &'a CrystalGraph<T>,
    pub target: T,
}

pub fn init_predictor<T: Scalar>(config: &PredictorConfig, neighbor: &NeighborParams<T>) -> PredictorModel<T> {
    let mut rng = seeded(config.seed);
    let d = config.embed_dim;
    let z_len = 2 * d + neighbor.n_centers;
    let species_embedding = (0..N_SPECIES * d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let convs = (0..config.n_conv)
        .map(|_| ConvLayer { gate: Dense::init(z_len, d, &mut rng), core: Dense::init(z_len, d, &mut rng) })
        .collect();
    let readout_hidden = Dense::init(d, config.hidden_dim, &mut rng);
    let readout_out = Dense::init(config.hidden_dim, 1, &mut rng);
    PredictorModel {
        config: config.clone(),
        neighbor: neighbor.clone(),
        params: PredictorParams { species_embedding, convs, readout_hidden, readout_out },
        target_mean: T::zero(),
        target_std: T::one(),
    }
}

struct Cache<T> {
    /// Node states entering each layer plus the final states, `n × d` each.
    states: Vec<Vec<T>>,
    /// Per layer, per edge `sigmoid(gate)`, `softplus(core)`, `sigmoid(core)`.
    gate_act: Vec<Vec<T>>,
    core_act: Vec<Vec<T>>,
    core_slope: Vec<Vec<T>>,
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    output: T,
}

impl<T: Scalar> PredictorModel<T> {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_graph(&self, g: &CrystalGraph<T>) -> Result<()> {
        if let Some(k) = g.feature_len() {
            if k != self.neighbor.n_centers {
                return Err(Error::ShapeMismatch { expected: self.neighbor.n_centers, found: k });
            }
        }
        if g.node_species.len() != g.n_nodes || g.n_nodes == 0 {
            return Err(Error::ShapeMismatch { expected: g.n_nodes.max(1), found: g.node_species.len() });
        }
        if let Some(e) = g.edges.iter().find(|e| e.src >= g.n_nodes || e.dst >= g.n_nodes) {
            return Err(Error::ShapeMismatch { expected: g.n_nodes, found: e.src.max(e.dst) + 1 });
        }
        Ok(())
    }

    fn edge_input(&self, states: &[T], e: &crate::graph::Edge<T>, z: &mut Vec<T>) {
        let d = self.embed_dim();
        z.clear();
        z.extend_from_slice(&states[e.src * d..(e.src + 1) * d]);
        z.extend_from_slice(&states[e.dst * d..(e.dst + 1) * d]);
        z.extend_from_slice(&e.feature);
    }

    fn forward_cached(&self, g: &CrystalGraph<T>) -> Cache<T> {
        let d = self.embed_dim();
        let n = g.n_nodes;
        let p = &self.params;
        let mut state = Vec::with_capacity(n * d);
        for &z in &g.node_species {
            let row = (z as usize - 1) * d;
            state.extend_from_slice(&p.species_embedding[row..row + d]);
        }
        let mut cache = Cache {
            states: Vec::with_capacity(p.convs.len() + 1),
            gate_act: Vec::new(),
            core_act: Vec::new(),
            core_slope: Vec::new(),
            pooled: vec![T::zero(); d],
            hidden_pre: vec![T::zero(); p.readout_hidden.n_out],
            hidden: Vec::new(),
            output: T::zero(),
        };
        let mut z = Vec::with_capacity(2 * d + self.neighbor.n_centers);
        let mut gate_pre = vec![T::zero(); d];
        let mut core_pre = vec![T::zero(); d];
        for layer in &p.convs {
            let mut next = state.clone();
            let n_e = g.edges.len();
            let (mut ga, mut ca, mut cs) = (Vec::with_capacity(n_e * d), Vec::with_capacity(n_e * d), Vec::with_capacity(n_e * d));
            for e in &g.edges {
                self.edge_input(&state, e, &mut z);
                layer.gate.forward(&z, &mut gate_pre);
                layer.core.forward(&z, &mut core_pre);
                for k in 0..d {
                    let gk = sigmoid(gate_pre[k]);
                    let ck = softplus(core_pre[k]);
                    next[e.src * d + k] += gk * ck;
                    ga.push(gk);
                    ca.push(ck);
                    cs.push(sigmoid(core_pre[k]));
                }
            }
            cache.states.push(std::mem::replace(&mut state, next));
            cache.gate_act.push(ga);
            cache.core_act.push(ca);
            cache.core_slope.push(cs);
        }
        let inv_n = T::one() / from_usize::<T>(n);
        for i in 0..n {
            for k in 0..d {
                cache.pooled[k] += state[i * d + k];
            }
        }
        cache.pooled.iter_mut().for_each(|x| *x *= inv_n);
        cache.states.push(state);
        p.readout_hidden.forward(&cache.pooled, &mut cache.hidden_pre);
        cache.hidden = cache.hidden_pre.iter().map(|&x| softplus(x)).collect();
        let mut out = [T::zero()];
        p.readout_out.forward(&cache.hidden, &mut out);
        cache.output = out[0];
        cache
    }

    /// Accumulates `d(output_std)/d(params) * upstream` into `grad`.
    fn backward(&self, g: &CrystalGraph<T>, cache: &Cache<T>, upstream: T, grad: &mut PredictorParams<T>) {
        let d = self.embed_dim();
        let n = g.n_nodes;
        let p = &self.params;
        let mut d_hidden = vec![T::zero(); p.readout_hidden.n_out];
        p.readout_out.backward(&cache.hidden, &[upstream], &mut grad.readout_out, Some(&mut d_hidden));
        let d_hidden_pre: Vec<T> =
            d_hidden.iter().zip(&cache.hidden_pre).map(|(&dh, &x)| dh * sigmoid(x)).collect();
        let mut d_pooled = vec![T::zero(); d];
        p.readout_hidden.backward(&cache.pooled, &d_hidden_pre, &mut grad.readout_hidden, Some(&mut d_pooled));
        let inv_n = T::one() / from_usize::<T>(n);
        let mut d_state: Vec<T> = (0..n * d).map(|idx| d_pooled[idx % d] * inv_n).collect();

        let mut z = Vec::with_capacity(2 * d + self.neighbor.n_centers);
        let mut d_gate = vec![T::zero(); d];
        let mut d_core = vec![T::zero(); d];
        let mut d_z = vec![T::zero(); 2 * d + self.neighbor.n_centers];
        for (l, layer) in p.convs.iter().enumerate().rev() {
            let prev = &cache.states[l];
            // Residual path: d(prev) starts as d(next).
            let mut d_prev = d_state.clone();
            let (ga, ca, cs) = (&cache.gate_act[l], &cache.core_act[l], &cache.core_slope[l]);
            let layer_grad = &mut grad.convs[l];
            for (ei, e) in g.edges.iter().enumerate() {
                let dm = &d_state[e.src * d..(e.src + 1) * d];
                for k in 0..d {
                    let idx = ei * d + k;
                    d_gate[k] = dm[k] * ca[idx] * ga[idx] * (T::one() - ga[idx]);
                    d_core[k] = dm[k] * ga[idx] * cs[idx];
                }
                self.edge_input(prev, e, &mut z);
                d_z.iter_mut().for_each(|x| *x = T::zero());
                layer.gate.backward(&z, &d_gate, &mut layer_grad.gate, Some(&mut d_z));
                layer.core.backward(&z, &d_core, &mut layer_grad.core, Some(&mut d_z));
                for k in 0..d {
                    d_prev[e.src * d + k] += d_z[k];
                    d_prev[e.dst * d + k] += d_z[d + k];
                }
            }
            d_state = d_prev;
        }
        for (i, &z) in g.node_species.iter().enumerate() {
            let row = (z as usize - 1) * d;
            for k in 0..d {
                grad.species_embedding[row + k] += d_state[i * d + k];
            }
        }
    }

    fn standardized_output(&self, g: &CrystalGraph<T>) -> T {
        self.forward_cached(g).output
    }

    fn standardize(&self, y: T) -> T {
        (y - self.target_mean) / self.target_std
    }
}

/// Predicted property of one graph, in dataset units.
pub fn forward<T: Scalar>(model: &PredictorModel<T>, g: &CrystalGraph<T>) -> Result<T> {
    model.check_graph(g)?;
    Ok(model.standardized_output(g) * model.target_std + model.target_mean)
}

/// Mean absolute error on standardized targets and its exact gradient.
pub fn batch_loss_and_gradient<T: Scalar>(
    model: &PredictorModel<T>,
    batch: &[Sample<'_, T>],
) -> (T, PredictorParams<T>) {
    let mut grad = PredictorParams::zeros_like(&model.params);
    let mut loss = T::zero();
    let inv_b = T::one() / from_usize::<T>(batch.len().max(1));
    for s in batch {
        let cache = model.forward_cached(s.graph);
        let r = cache.output - model.standardize(s.target);
        loss += r.abs() * inv_b;
        let sign = if r > T::zero() {
            T::one()
        } else if r < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        model.backward(s.graph, &cache, sign * inv_b, &mut grad);
    }
    (loss, grad)
}

pub fn batch_loss<T: Scalar>(model: &PredictorModel<T>, batch: &[Sample<'_, T>]) -> T {
    let inv_b = T::one() / from_usize::<T>(batch.len().max(1));
    batch
        .iter()
        .map(|s| (model.standardized_output(s.graph) - model.standardize(s.target)).abs() * inv_b)
        .fold(T::zero(), |a, b| a + b)
}

fn mae_on<T: Scalar>(model: &PredictorModel<T>, samples: &[Sample<'_, T>]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let pred = model.standardized_output(s.graph) * model.target_std + model.target_mean;
            (pred - s.target).abs().to_f64_lossless()
        })
        .sum();
    total / samples.len() as f64
}

/// Minibatch training on prebuilt graphs. Keeps the parameters of the epoch
/// with the lowest validation MAE (earliest on ties) and stops after
/// `patience` epochs without improvement.
pub fn train_on_graphs<T: Scalar>(
    mut model: PredictorModel<T>,
    train: &[Sample<'_, T>],
    val: &[Sample<'_, T>],
) -> Result<(PredictorModel<T>, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for s in train.iter().chain(val) {
        model.check_graph(s.graph)?;
    }
    let config = model.config.clone();
    let mut report = TrainReport { epoch_losses: Vec::new(), best_val_mae: None, best_epoch: None };
    if config.epochs == 0 {
        return Ok((model, report));
    }
    let (mean, std) = standardization(train.iter().map(|s| s.target));
    model.target_mean = mean;
    model.target_std = std;

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = seeded(mix_seed(config.seed, &[SHUFFLE_STREAM]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_params = None;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let (loss, grad) = batch_loss_and_gradient(&model, &batch);
            epoch_loss += loss.to_f64_lossless() * chunk.len() as f64;
            optimizer.step(model.params.tensors_mut(), grad.tensors());
        }
        report.epoch_losses.push(epoch_loss / train.len() as f64);
        if val.is_empty() {
            report.best_epoch = Some(epoch);
            continue;
        }
        let val_mae = mae_on(&model, val);
        let improved = report.best_val_mae.is_none_or(|best| val_mae < best);
        if improved {
            report.best_val_mae = Some(val_mae);
            report.best_epoch = Some(epoch);
            best_params = Some(model.params.clone());
        } else if epoch - report.best_epoch.unwrap_or(0) >= config.patience {
            break;
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok((model, report))
}

pub fn build_graphs<T: Scalar>(structures: &[&CrystalStructure<T>], neighbor: &NeighborParams<T>) -> Result<Vec<CrystalGraph<T>>> {
    structures.iter().map(|s| build_graph(s, neighbor)).collect()
}

/// Builds graphs for the records and trains; see [`train_on_graphs`].
pub fn train_predictor<T: Scalar>(
    model: PredictorModel<T>,
    train: &[PropertyRecord<T>],
    val: &[PropertyRecord<T>],
) -> Result<(PredictorModel<T>, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let train_graphs = build_graphs(&train.iter().map(|r| &r.structure).collect::<Vec<_>>(), &model.neighbor)?;
    let val_graphs = build_graphs(&val.iter().map(|r| &r.structure).collect::<Vec<_>>(), &model.neighbor)?;
    let train_samples: Vec<_> =
        train_graphs.iter().zip(train).map(|(graph, r)| Sample { graph, target: r.property }).collect();
    let val_samples: Vec<_> = val_graphs.iter().zip(val).map(|(graph, r)| Sample { graph, target: r.property }).collect();
    train_on_graphs(model, &train_samples, &val_samples)
}

pub fn predict<T: Scalar>(model: &PredictorModel<T>, structures: &[CrystalStructure<T>]) -> Result<Vec<T>> {
    structures.iter().map(|s| forward(model, &build_graph(s, &model.neighbor)?)).collect()
}

pub fn pseudo_label<T: Scalar>(
    model: &PredictorModel<T>,
    unlabeled: &[CrystalStructure<T>],
) -> Result<Vec<PropertyRecord<T>>> {
    let values = predict(model, unlabeled)?;
    Ok(unlabeled
        .iter()
        .zip(values)
        .map(|(s, y)| PropertyRecord::new(s.clone(), y, LabelKind::Pseudo))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> PredictorConfig {
        PredictorConfig { embed_dim: 4, n_conv: 2, hidden_dim: 5, seed, ..PredictorConfig::default() }
    }

    fn cell() -> CrystalStructure<f64> {
        CrystalStructure {
            id: "nacl".into(),
            lattice: [[4.0, 0.0, 0.0], [0.3, 4.2, 0.0], [0.1, 0.2, 4.5]],
            species: vec![11, 17],
            frac_coords: vec![[0.0, 0.0, 0.0], [0.5, 0.45, 0.55]],
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let p = NeighborParams::default();
        let a = init_predictor::<f64>(&small_config(1), &p);
        assert_eq!(a, init_predictor(&small_config(1), &p));
        assert_ne!(a.params, init_predictor(&small_config(2), &p).params);
        let tiny = PredictorConfig { embed_dim: 1, ..small_config(1) };
        assert_eq!(init_predictor::<f64>(&tiny, &p).params.species_embedding.len(), 118);
    }

    #[test]
    fn zero_readout_predicts_target_mean() {
        let p = NeighborParams::default();
        let mut m = init_predictor::<f64>(&small_config(3), &p);
        m.target_mean = 42.5;
        m.target_std = 3.0;
        m.params.readout_out.weight.iter_mut().for_each(|w| *w = 0.0);
        m.params.readout_out.bias[0] = 0.0;
        let g = build_graph(&cell(), &p).unwrap();
        assert_eq!(forward(&m, &g).unwrap(), 42.5);
    }

    #[test]
    fn wrong_feature_length_is_rejected() {
        let m = init_predictor::<f64>(&small_config(3), &NeighborParams::default());
        let other = NeighborParams { n_centers: 8, ..NeighborParams::default() };
        let g = build_graph(&cell(), &other).unwrap();
        assert!(matches!(forward(&m, &g), Err(Error::ShapeMismatch { expected: 31, found: 8 })));
    }

    #[test]
    fn zero_epochs_returns_input() {
        let m = init_predictor::<f64>(&PredictorConfig { epochs: 0, ..small_config(4) }, &NeighborParams::default());
        let rec = PropertyRecord::new(cell(), 2.0, LabelKind::Real);
        let (out, report) = train_predictor(m.clone(), &[rec], &[]).unwrap();
        assert_eq!(out, m);
        assert!(report.epoch_losses.is_empty() && report.best_epoch.is_none());
    }

    #[test]
    fn empty_training_set_errors() {
        let m = init_predictor::<f64>(&small_config(4), &NeighborParams::default());
        assert!(matches!(train_predictor(m, &[], &[]), Err(Error::EmptyTrainingSet)));
    }

    #[test]
    fn predict_edge_cases() {
        let m = init_predictor::<f64>(&small_config(5), &NeighborParams::default());
        assert!(predict(&m, &[]).unwrap().is_empty());
        let one = predict(&m, &[cell()]).unwrap();
        assert_eq!(one.len(), 1);
        let mut other = cell();
        other.species = vec![3, 9];
        let batch = predict(&m, &[cell(), other.clone()]).unwrap();
        assert_eq!(batch[0], one[0]);
        assert_eq!(batch[1], predict(&m, &[other]).unwrap()[0]);
        assert!(pseudo_label(&m, &[]).unwrap().is_empty());
        let labels = pseudo_label(&m, &[cell()]).unwrap();
        assert_eq!(labels[0].label_kind, LabelKind::Pseudo);
        assert_eq!(labels[0].property, one[0]);
    }

    #[test]
    fn works_in_single_precision() {
        let p = NeighborParams::<f32>::default();
        let m = init_predictor::<f32>(&small_config(6), &p);
        let y = forward(&m, &build_graph(&cell().cast::<f32>(), &p).unwrap()).unwrap();
        assert!(y.is_finite());
    }
}
