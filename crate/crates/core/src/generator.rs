//! Conditional variational autoencoder over a fixed-size crystal encoding.
//!
//! Encoding layout for `M = max_atoms`, length `4M + 7`:
//!
//! ```text
//! [ n_atoms / M | Z_k / 118 (M slots) | frac xyz (3M) | a b c (Å) α β γ (deg) ]
//! ```
//!
//! Slots past `n_atoms` are zero. The network sees each component
//! standardized by statistics of its training encodings, and the condition
//! standardized by the training labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{sample_kde, KdeModel};
use crate::lattice::{angle_volume_factor, cell_parameters, lattice_from_parameters};
use crate::nn::{standardization, Dense};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{mix_seed, seeded, shuffle, standard_normal, SeededRng};
use crate::scalar::{from_usize, lit, Scalar};
use crate::structure::{wrap_unit, CrystalStructure, LabelKind, PropertyRecord, MAX_ATOMIC_NUMBER};

pub type MaterialEncoding<T> = Vec<T>;

pub const LENGTH_RANGE: (f64, f64) = (1.0, 50.0);
pub const ANGLE_RANGE: (f64, f64) = (30.0, 150.0);
/// Smallest admissible `angle_volume_factor` for decoded cells.
pub const MIN_VOLUME_FACTOR: f64 = 0.05;

const SHUFFLE_STREAM: u64 = 0x4745_4e53;
const NOISE_STREAM: u64 = 0x4745_4e4e;
const CONDITION_STREAM: u64 = 0x4b44_4543;

pub fn encoding_len(max_atoms: usize) -> usize {
    4 * max_atoms + 7
}

pub fn encode_material<T: Scalar>(s: &CrystalStructure<T>, max_atoms: usize) -> Result<MaterialEncoding<T>> {
    let n = s.n_atoms();
    if n > max_atoms {
        return Err(Error::TooManyAtoms { n_atoms: n, max_atoms });
    }
    let mut v = vec![T::zero(); encoding_len(max_atoms)];
    v[0] = from_usize::<T>(n) / from_usize(max_atoms);
    let species_scale = from_usize::<T>(MAX_ATOMIC_NUMBER as usize);
    for (k, (&z, f)) in s.species.iter().zip(&s.frac_coords).enumerate() {
        v[1 + k] = from_usize::<T>(z as usize) / species_scale;
        v[1 + max_atoms + 3 * k..1 + max_atoms + 3 * k + 3].copy_from_slice(f);
    }
    let cell = cell_parameters(&s.lattice);
    v[1 + 4 * max_atoms..].copy_from_slice(&cell);
    Ok(v)
}

/// Pulls angles toward 90° until the cell volume factor reaches
/// [`MIN_VOLUME_FACTOR`]. All-right angles always qualify.
fn repair_angles<T: Scalar>(angles: [T; 3]) -> [T; 3] {
    let min_factor = lit::<T>(MIN_VOLUME_FACTOR);
    let right = lit::<T>(90.0);
    let at = |t: T| angles.map(|a| right + t * (a - right));
    let factor = |a: [T; 3]| angle_volume_factor(a[0], a[1], a[2]);
    if factor(angles) >= min_factor {
        return angles;
    }
    let (mut lo, mut hi) = (T::zero(), T::one());
    for _ in 0..60 {
        let mid = (lo + hi) / lit(2.0);
        if factor(at(mid)) >= min_factor {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(lo)
}

fn sanitize<T: Scalar>(x: T) -> T {
    if x.is_finite() {
        x
    } else {
        T::zero()
    }
}

fn decode_capped<T: Scalar>(v: &[T], max_atoms: usize, atom_cap: usize) -> Result<CrystalStructure<T>> {
    let expected = encoding_len(max_atoms);
    if v.len() != expected {
        return Err(Error::ShapeMismatch { expected, found: v.len() });
    }
    let cap = atom_cap.clamp(1, max_atoms);
    let n_raw = (sanitize(v[0]) * from_usize(max_atoms)).round();
    let n = n_raw.max(T::one()).min(from_usize(cap)).to_usize().unwrap_or(1);
    let z_max = from_usize::<T>(MAX_ATOMIC_NUMBER as usize);
    let species = (0..n)
        .map(|k| (sanitize(v[1 + k]) * z_max).round().max(T::one()).min(z_max).to_u8().unwrap_or(1))
        .collect();
    let frac_coords = (0..n)
        .map(|k| {
            let base = 1 + max_atoms + 3 * k;
            [0, 1, 2].map(|c| wrap_unit(sanitize(v[base + c])))
        })
        .collect();
    let cell = &v[1 + 4 * max_atoms..];
    let (lmin, lmax) = (lit::<T>(LENGTH_RANGE.0), lit::<T>(LENGTH_RANGE.1));
    let (amin, amax) = (lit::<T>(ANGLE_RANGE.0), lit::<T>(ANGLE_RANGE.1));
    let lengths = [0, 1, 2].map(|k| {
        let x = cell[k];
        if x.is_finite() { x.max(lmin).min(lmax) } else { lmin }
    });
    let angles = repair_angles([3, 4, 5].map(|k| {
        let x = cell[k];
        if x.is_finite() { x.max(amin).min(amax) } else { lit(90.0) }
    }));
    let params = [lengths[0], lengths[1], lengths[2], angles[0], angles[1], angles[2]];
    let lattice = lattice_from_parameters(&params).unwrap_or_else(|| {
        let z = T::zero();
        [[lengths[0], z, z], [z, lengths[1], z], [z, z, lengths[2]]]
    });
    Ok(CrystalStructure { id: String::new(), lattice, species, frac_coords })
}

/// Inverse of [`encode_material`] with clamping: the result always passes
/// structure validation for a dataset allowing `max_atoms` atoms.
pub fn decode_material<T: Scalar>(v: &[T], max_atoms: usize) -> Result<CrystalStructure<T>> {
    decode_capped(v, max_atoms, max_atoms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub max_atoms: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub kl_weight: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_atoms: 20,
            latent_dim: 8,
            hidden_dim: 64,
            learning_rate: 0.003,
            epochs: 200,
            kl_weight: 0.1,
            seed: 0,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl GeneratorConfig {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("max_atoms", self.max_atoms),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
        ] {
            if v < 1 {
                out.push((name, "must be at least 1".to_owned()));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(("learning_rate", "must be finite and positive".to_owned()));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            out.push(("kl_weight", "must be finite and non-negative".to_owned()));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams<T> {
    /// `[encoding, condition] -> hidden`, tanh.
    pub encoder_hidden: Dense<T>,
    pub encoder_mean: Dense<T>,
    pub encoder_logvar: Dense<T>,
    /// `[latent, condition] -> hidden`, tanh.
    pub decoder_hidden: Dense<T>,
    pub decoder_out: Dense<T>,
}

impl<T: Scalar> GeneratorParams<T> {
    fn layers(&self) -> [&Dense<T>; 5] {
        [&self.encoder_hidden, &self.encoder_mean, &self.encoder_logvar, &self.decoder_hidden, &self.decoder_out]
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers().into_iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let Self { encoder_hidden, encoder_mean, encoder_logvar, decoder_hidden, decoder_out } = self;
        [encoder_hidden, encoder_mean, encoder_logvar, decoder_hidden, decoder_out]
            .into_iter()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        ["encoder_hidden", "encoder_mean", "encoder_logvar", "decoder_hidden", "decoder_out"]
            .iter()
            .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
            .collect()
    }

    fn zeros_like(other: &Self) -> Self {
        let z = |d: &Dense<T>| Dense::zeros(d.n_in, d.n_out);
        Self {
            encoder_hidden: z(&other.encoder_hidden),
            encoder_mean: z(&other.encoder_mean),
            encoder_logvar: z(&other.encoder_logvar),
            decoder_hidden: z(&other.decoder_hidden),
            decoder_out: z(&other.decoder_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel<T> {
    pub config: GeneratorConfig,
    pub params: GeneratorParams<T>,
    pub feature_mean: Vec<T>,
    pub feature_scale: Vec<T>,
    pub condition_mean: T,
    pub condition_std: T,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    /// Mean per-sample negative ELBO, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// One training pair in the network's standardized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSample<T> {
    pub encoding: Vec<T>,
    pub condition: T,
}

pub fn init_generator<T: Scalar>(config: &GeneratorConfig) -> GeneratorModel<T> {
    let mut rng = seeded(config.seed);
    let len = encoding_len(config.max_atoms);
    let (h, z) = (config.hidden_dim, config.latent_dim);
    let params = GeneratorParams {
        encoder_hidden: Dense::init(len + 1, h, &mut rng),
        encoder_mean: Dense::init(h, z, &mut rng),
        encoder_logvar: Dense::init(h, z, &mut rng),
        decoder_hidden: Dense::init(z + 1, h, &mut rng),
        decoder_out: Dense::init(h, len, &mut rng),
    };
    GeneratorModel {
        config: config.clone(),
        params,
        feature_mean: vec![T::zero(); len],
        feature_scale: vec![T::one(); len],
        condition_mean: T::zero(),
        condition_std: T::one(),
    }
}

/// KL divergence of `N(mean, exp(logvar))` from the standard normal.
pub fn kl_to_standard_normal<T: Scalar>(mean: &[T], logvar: &[T]) -> T {
    let half = lit::<T>(0.5);
    mean.iter()
        .zip(logvar)
        .map(|(&m, &lv)| half * (lv.exp() + m * m - T::one() - lv))
        .fold(T::zero(), |a, b| a + b)
}

impl<T: Scalar> GeneratorModel<T> {
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn standardize_condition(&self, c: T) -> T {
        (c - self.condition_mean) / self.condition_std
    }

    pub fn standardize_encoding(&self, v: &[T]) -> Vec<T> {
        v.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((&x, &m), &s)| (x - m) / s).collect()
    }

    fn destandardize_encoding(&self, v: &[T]) -> Vec<T> {
        v.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((&x, &m), &s)| x * s + m).collect()
    }

    /// Posterior mean and log-variance for a standardized sample.
    pub fn encode(&self, sample: &GenSample<T>) -> (Vec<T>, Vec<T>) {
        let p = &self.params;
        let mut input = sample.encoding.clone();
        input.push(sample.condition);
        let mut hidden = vec![T::zero(); p.encoder_hidden.n_out];
        p.encoder_hidden.forward(&input, &mut hidden);
        hidden.iter_mut().for_each(|x| *x = x.tanh());
        let mut mean = vec![T::zero(); self.latent_dim()];
        let mut logvar = vec![T::zero(); self.latent_dim()];
        p.encoder_mean.forward(&hidden, &mut mean);
        p.encoder_logvar.forward(&hidden, &mut logvar);
        (mean, logvar)
    }

    /// Standardized encoding decoded from a latent and standardized condition.
    pub fn decode(&self, latent: &[T], condition: T) -> Vec<T> {
        let p = &self.params;
        let mut input = latent.to_vec();
        input.push(condition);
        let mut hidden = vec![T::zero(); p.decoder_hidden.n_out];
        p.decoder_hidden.forward(&input, &mut hidden);
        hidden.iter_mut().for_each(|x| *x = x.tanh());
        let mut out = vec![T::zero(); p.decoder_out.n_out];
        p.decoder_out.forward(&hidden, &mut out);
        out
    }

    /// Deterministic reconstruction through the posterior mean, in encoding units.
    pub fn reconstruct(&self, structure: &CrystalStructure<T>, condition: T) -> Result<MaterialEncoding<T>> {
        let encoding = encode_material(structure, self.config.max_atoms)?;
        let sample = GenSample { encoding: self.standardize_encoding(&encoding), condition: self.standardize_condition(condition) };
        let (mean, _) = self.encode(&sample);
        Ok(self.destandardize_encoding(&self.decode(&mean, sample.condition)))
    }
}

/// Batch-mean negative ELBO `Σ (x̂ - x)² + kl_weight · KL` and its exact
/// gradient, with the reparameterization noise fixed by `noise`.
pub fn loss_and_gradient<T: Scalar>(
    model: &GeneratorModel<T>,
    batch: &[GenSample<T>],
    noise: &[Vec<T>],
) -> (T, GeneratorParams<T>) {
    let p = &model.params;
    let mut grad = GeneratorParams::zeros_like(p);
    let inv_b = T::one() / from_usize::<T>(batch.len().max(1));
    let beta = lit::<T>(model.config.kl_weight);
    let half = lit::<T>(0.5);
    let two = lit::<T>(2.0);
    let (h, zdim) = (model.config.hidden_dim, model.latent_dim());
    let mut loss = T::zero();
    for (sample, eps) in batch.iter().zip(noise) {
        let mut enc_in = sample.encoding.clone();
        enc_in.push(sample.condition);
        let mut enc_h = vec![T::zero(); h];
        p.encoder_hidden.forward(&enc_in, &mut enc_h);
        enc_h.iter_mut().for_each(|x| *x = x.tanh());
        let mut mean = vec![T::zero(); zdim];
        let mut logvar = vec![T::zero(); zdim];
        p.encoder_mean.forward(&enc_h, &mut mean);
        p.encoder_logvar.forward(&enc_h, &mut logvar);
        let sd: Vec<T> = logvar.iter().map(|&lv| (half * lv).exp()).collect();
        let mut dec_in: Vec<T> = (0..zdim).map(|k| mean[k] + sd[k] * eps[k]).collect();
        dec_in.push(sample.condition);
        let mut dec_h = vec![T::zero(); h];
        p.decoder_hidden.forward(&dec_in, &mut dec_h);
        dec_h.iter_mut().for_each(|x| *x = x.tanh());
        let mut recon = vec![T::zero(); sample.encoding.len()];
        p.decoder_out.forward(&dec_h, &mut recon);

        let residual: Vec<T> = recon.iter().zip(&sample.encoding).map(|(&a, &b)| a - b).collect();
        let sq = residual.iter().fold(T::zero(), |a, &r| a + r * r);
        loss += (sq + beta * kl_to_standard_normal(&mean, &logvar)) * inv_b;

        let d_recon: Vec<T> = residual.iter().map(|&r| two * r * inv_b).collect();
        let mut d_dec_h = vec![T::zero(); h];
        p.decoder_out.backward(&dec_h, &d_recon, &mut grad.decoder_out, Some(&mut d_dec_h));
        let d_dec_pre: Vec<T> = d_dec_h.iter().zip(&dec_h).map(|(&g, &a)| g * (T::one() - a * a)).collect();
        let mut d_dec_in = vec![T::zero(); zdim + 1];
        p.decoder_hidden.backward(&dec_in, &d_dec_pre, &mut grad.decoder_hidden, Some(&mut d_dec_in));
        let kl_scale = beta * inv_b;
        let d_mean: Vec<T> = (0..zdim).map(|k| d_dec_in[k] + kl_scale * mean[k]).collect();
        let d_logvar: Vec<T> = (0..zdim)
            .map(|k| d_dec_in[k] * eps[k] * half * sd[k] + kl_scale * half * (logvar[k].exp() - T::one()))
            .collect();
        let mut d_enc_h = vec![T::zero(); h];
        p.encoder_mean.backward(&enc_h, &d_mean, &mut grad.encoder_mean, Some(&mut d_enc_h));
        p.encoder_logvar.backward(&enc_h, &d_logvar, &mut grad.encoder_logvar, Some(&mut d_enc_h));
        let d_enc_pre: Vec<T> = d_enc_h.iter().zip(&enc_h).map(|(&g, &a)| g * (T::one() - a * a)).collect();
        p.encoder_hidden.backward(&enc_in, &d_enc_pre, &mut grad.encoder_hidden, None);
    }
    (loss, grad)
}

pub fn loss<T: Scalar>(model: &GeneratorModel<T>, batch: &[GenSample<T>], noise: &[Vec<T>]) -> T {
    let inv_b = T::one() / from_usize::<T>(batch.len().max(1));
    let beta = lit::<T>(model.config.kl_weight);
    batch
        .iter()
        .zip(noise)
        .map(|(s, eps)| {
            let (mean, logvar) = model.encode(s);
            let z: Vec<T> = (0..mean.len()).map(|k| mean[k] + (lit::<T>(0.5) * logvar[k]).exp() * eps[k]).collect();
            let recon = model.decode(&z, s.condition);
            let sq = recon.iter().zip(&s.encoding).fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
            (sq + beta * kl_to_standard_normal(&mean, &logvar)) * inv_b
        })
        .fold(T::zero(), |a, b| a + b)
}

fn draw_noise<T: Scalar>(rng: &mut SeededRng, dim: usize) -> Vec<T> {
    (0..dim).map(|_| standard_normal(rng)).collect()
}

/// Fits the encoding and condition standardization, then the network.
pub fn train_generator_with_report<T: Scalar>(
    records: &[PropertyRecord<T>],
    config: &GeneratorConfig,
) -> Result<(GeneratorModel<T>, GeneratorReport)> {
    if records.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let encodings =
        records.iter().map(|r| encode_material(&r.structure, config.max_atoms)).collect::<Result<Vec<_>>>()?;
    let mut model = init_generator::<T>(config);
    let len = encoding_len(config.max_atoms);
    let n = from_usize::<T>(records.len());
    for k in 0..len {
        let mean = encodings.iter().fold(T::zero(), |a, e| a + e[k]) / n;
        let var = encodings.iter().fold(T::zero(), |a, e| a + (e[k] - mean) * (e[k] - mean)) / n;
        model.feature_mean[k] = mean;
        model.feature_scale[k] = if var.sqrt() > lit(1e-8) { var.sqrt() } else { T::one() };
    }
    let (c_mean, c_std) = standardization(records.iter().map(|r| r.property));
    model.condition_mean = c_mean;
    model.condition_std = c_std;
    let samples: Vec<GenSample<T>> = encodings
        .iter()
        .zip(records)
        .map(|(e, r)| GenSample { encoding: model.standardize_encoding(e), condition: model.standardize_condition(r.property) })
        .collect();

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order_rng = seeded(mix_seed(config.seed, &[SHUFFLE_STREAM]));
    let mut noise_rng = seeded(mix_seed(config.seed, &[NOISE_STREAM]));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = GeneratorReport::default();
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut noise = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        shuffle(&mut order, &mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            noise.clear();
            for &i in chunk {
                batch.push(samples[i].clone());
                noise.push(draw_noise::<T>(&mut noise_rng, config.latent_dim));
            }
            let (l, grad) = loss_and_gradient(&model, &batch, &noise);
            total += l.to_f64_lossless() * chunk.len() as f64;
            optimizer.step(model.params.tensors_mut(), grad.tensors());
        }
        report.epoch_losses.push(total / samples.len() as f64);
    }
    Ok((model, report))
}

pub fn train_generator<T: Scalar>(records: &[PropertyRecord<T>], config: &GeneratorConfig) -> Result<GeneratorModel<T>> {
    train_generator_with_report(records, config).map(|(m, _)| m)
}

/// Decodes a standard-normal latent under `condition` (dataset units).
/// The structure has at most `max_atoms` atoms and is always valid.
pub fn sample_conditional<T: Scalar>(
    model: &GeneratorModel<T>,
    condition: T,
    max_atoms: usize,
    seed: u64,
) -> CrystalStructure<T> {
    let mut rng = seeded(seed);
    let latent = draw_noise::<T>(&mut rng, model.latent_dim());
    let out = model.decode(&latent, model.standardize_condition(condition));
    decode_capped(&model.destandardize_encoding(&out), model.config.max_atoms, max_atoms)
        .expect("decoder output has the encoding length")
}

/// `n` synthetic records: KDE-drawn conditions, one sampled structure each,
/// labeled with the condition.
pub fn generate_synthetic_set<T: Scalar>(
    model: &GeneratorModel<T>,
    kde: &KdeModel<T>,
    n: usize,
    max_atoms: usize,
    seed: u64,
) -> Vec<PropertyRecord<T>> {
    let conditions = sample_kde(kde, n, mix_seed(seed, &[CONDITION_STREAM]));
    conditions
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let mut s = sample_conditional(model, c, max_atoms, mix_seed(seed, &[k as u64]));
            s.id = format!("synthetic-{seed:016x}-{k}");
            PropertyRecord::new(s, c, LabelKind::Synthetic)
        })
        .collect()
}
