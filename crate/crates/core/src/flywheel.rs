//! Scenario and arm orchestration.
//!
//! Each run draws its own split from a seed derived from the base seed and
//! the run index. Stages shared by several arms of one run (the generator,
//! its KDE and synthetic set, the labeled-only predictor used for pseudo
//! labels) are computed once per run and round and reused; computing any
//! single arm in isolation reproduces the same numbers.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_ratios, select_by_ids, split_dataset, subsample_labeled, SplitAssignment, DEFAULT_SPLIT_RATIOS};
use crate::error::{Error, Result};
use crate::evaluation::mae;
use crate::generator::{generate_synthetic_set, train_generator, GeneratorConfig, GeneratorModel};
use crate::graph::{build_graph, CrystalGraph, NeighborParams};
use crate::kde::{fit_kde, KdeModel};
use crate::predictor::{forward, init_predictor, pseudo_label, train_on_graphs, PredictorConfig, PredictorModel, Sample, TrainReport};
use crate::rng::mix_seed;
use crate::scalar::Scalar;
use crate::structure::{validate_structure, CrystalStructure, DatasetMeta, LabelKind, PropertyRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Full,
    Semi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArmSpec {
    F,
    GF,
    #[serde(rename = "F_plus_GF")]
    FPlusGF,
    S,
    GS,
    #[serde(rename = "S_plus_GS")]
    SPlusGS,
}

impl ArmSpec {
    pub const ALL: [ArmSpec; 6] = [ArmSpec::F, ArmSpec::GF, ArmSpec::FPlusGF, ArmSpec::S, ArmSpec::GS, ArmSpec::SPlusGS];

    pub fn scenario(self) -> Scenario {
        match self {
            ArmSpec::F | ArmSpec::GF | ArmSpec::FPlusGF => Scenario::Full,
            _ => Scenario::Semi,
        }
    }

    pub fn for_scenario(scenario: Scenario) -> [ArmSpec; 3] {
        match scenario {
            Scenario::Full => [ArmSpec::F, ArmSpec::GF, ArmSpec::FPlusGF],
            Scenario::Semi => [ArmSpec::S, ArmSpec::GS, ArmSpec::SPlusGS],
        }
    }

    /// Machine key used in files.
    pub fn key(self) -> &'static str {
        match self {
            ArmSpec::F => "F",
            ArmSpec::GF => "GF",
            ArmSpec::FPlusGF => "F_plus_GF",
            ArmSpec::S => "S",
            ArmSpec::GS => "GS",
            ArmSpec::SPlusGS => "S_plus_GS",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.key() == key)
    }

    /// Table heading.
    pub fn label(self) -> &'static str {
        match self {
            ArmSpec::F => "F",
            ArmSpec::GF => "G_F",
            ArmSpec::FPlusGF => "F+G_F",
            ArmSpec::S => "S",
            ArmSpec::GS => "G_S",
            ArmSpec::SPlusGS => "S+G_S",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Non-arm stages that consume randomness.
#[derive(Clone, Copy, Debug)]
enum Stage {
    Split = 101,
    Subsample = 102,
    FullGenerator = 103,
    FullSynthetic = 104,
    SemiGenerator = 105,
    SemiSynthetic = 106,
}

const ARM_DOMAIN: u64 = 0x4152_4d53;
const STAGE_DOMAIN: u64 = 0x5354_4745;

/// SplitMix64 chain over `(domain, arm, run_index, round)` seeded by `base_seed`.
pub fn derive_seed(base_seed: u64, arm: ArmSpec, run_index: usize, round: usize) -> u64 {
    mix_seed(base_seed, &[ARM_DOMAIN, arm.tag(), run_index as u64, round as u64])
}

fn stage_seed(base_seed: u64, stage: Stage, run_index: usize, round: usize) -> u64 {
    mix_seed(base_seed, &[STAGE_DOMAIN, stage as u64, run_index as u64, round as u64])
}

fn default_ratios() -> (f64, f64, f64) {
    DEFAULT_SPLIT_RATIOS
}
fn default_labeled_fraction() -> f64 {
    0.10
}
fn default_n_synthetic() -> usize {
    1000
}
fn default_n_runs() -> usize {
    5
}
fn default_rounds() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlywheelOptions {
    /// Use run 0's split for every run instead of re-drawing.
    pub fixed_split: bool,
    /// Reuse run 0's generator and synthetic set in every run.
    pub shared_synthetic: bool,
    /// Add the pseudo-labeled records to the S+G_S training set.
    pub include_pseudo_in_final: bool,
    /// Label synthetic records with a predictor instead of their condition.
    pub relabel_synthetic: bool,
    /// Extra unlabeled structures (JSON lines) pseudo-labeled from round 2 on.
    pub external_pool_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    pub meta: DatasetMeta,
    #[serde(default = "default_ratios")]
    pub split_ratios: (f64, f64, f64),
    #[serde(default = "default_labeled_fraction")]
    pub labeled_fraction: f64,
    #[serde(default = "default_n_synthetic")]
    pub n_synthetic: usize,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub neighbor: NeighborParams<f64>,
    #[serde(default)]
    pub options: FlywheelOptions,
}

impl RunConfig {
    /// Defaults for the given dataset; the generator slot count follows
    /// `meta.max_atoms`.
    pub fn for_dataset(meta: DatasetMeta) -> Self {
        let generator = GeneratorConfig { max_atoms: meta.max_atoms, ..GeneratorConfig::default() };
        Self {
            dataset_path: None,
            meta,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            labeled_fraction: default_labeled_fraction(),
            n_synthetic: default_n_synthetic(),
            n_runs: default_n_runs(),
            base_seed: 0,
            rounds: default_rounds(),
            predictor: PredictorConfig::default(),
            generator,
            neighbor: NeighborParams::default(),
            options: FlywheelOptions::default(),
        }
    }

    /// Every violated constraint as `(field path, problem)`.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |path: &str, msg: &str| out.push((path.to_owned(), msg.to_owned()));
        if self.meta.max_atoms < 1 {
            push("meta.max_atoms", "must be at least 1");
        }
        if !(self.meta.property_range.0 < self.meta.property_range.1) {
            push("meta.property_range", "low must be below high");
        }
        if check_ratios(self.split_ratios).is_err() {
            push("split_ratios", "must be non-negative and sum to 1");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            push("labeled_fraction", "must lie in (0, 1]");
        }
        if self.n_synthetic < 1 {
            push("n_synthetic", "must be at least 1");
        }
        if self.n_runs < 1 {
            push("n_runs", "must be at least 1");
        }
        if self.rounds < 1 {
            push("rounds", "must be at least 1");
        }
        for (field, msg) in self.predictor.violations() {
            push(&format!("predictor.{field}"), &msg);
        }
        for (field, msg) in self.generator.violations() {
            push(&format!("generator.{field}"), &msg);
        }
        if self.generator.max_atoms < self.meta.max_atoms {
            push("generator.max_atoms", "must be at least meta.max_atoms");
        }
        if let Err(Error::Config(msg)) = self.neighbor.check() {
            let field = msg.split_whitespace().next().unwrap_or("neighbor").to_owned();
            push(&field, &msg);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            let text: Vec<String> = v.iter().map(|(p, m)| format!("{p}: {m}")).collect();
            Err(Error::Config(text.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub real: usize,
    pub pseudo: usize,
    pub synthetic: usize,
}

impl Composition {
    pub fn of<T>(records: &[&PropertyRecord<T>]) -> Self {
        let mut c = Composition::default();
        for r in records {
            match r.label_kind {
                LabelKind::Real => c.real += 1,
                LabelKind::Pseudo => c.pseudo += 1,
                LabelKind::Synthetic => c.synthetic += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.real + self.pseudo + self.synthetic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: ArmSpec,
    pub run_index: usize,
    pub round: usize,
    pub seed: u64,
    /// Test-split MAE in dataset units.
    pub test_metric: f64,
    pub train_set_composition: Composition,
    pub best_epoch: Option<usize>,
    /// KDE conditions that fell outside the dataset's nominal property range.
    pub synthetic_out_of_range: usize,
}

/// Test split whose labels are sealed until final evaluation. Every read is
/// counted; reads while sealed fail and are counted separately.
#[derive(Debug)]
pub struct TestSplit<T> {
    records: Vec<PropertyRecord<T>>,
    sealed: AtomicBool,
    label_reads: AtomicUsize,
    sealed_reads: AtomicUsize,
}

impl<T: Scalar> TestSplit<T> {
    fn new(records: Vec<PropertyRecord<T>>) -> Self {
        Self { records, sealed: AtomicBool::new(true), label_reads: AtomicUsize::new(0), sealed_reads: AtomicUsize::new(0) }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn structures(&self) -> impl Iterator<Item = &CrystalStructure<T>> {
        self.records.iter().map(|r| &r.structure)
    }

    pub fn labels(&self) -> Result<Vec<T>> {
        if self.sealed.load(Ordering::SeqCst) {
            self.sealed_reads.fetch_add(1, Ordering::SeqCst);
            return Err(Error::TestLeak);
        }
        self.label_reads.fetch_add(1, Ordering::SeqCst);
        Ok(self.records.iter().map(|r| r.property).collect())
    }

    fn evaluate_with<R>(&self, f: impl FnOnce(&Self) -> R) -> R {
        self.sealed.store(false, Ordering::SeqCst);
        let out = f(self);
        self.sealed.store(true, Ordering::SeqCst);
        out
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }

    pub fn sealed_reads(&self) -> usize {
        self.sealed_reads.load(Ordering::SeqCst)
    }
}

/// One run's partition of the dataset.
#[derive(Debug)]
pub struct RunSplits<T> {
    pub assignment: SplitAssignment,
    pub train: Vec<PropertyRecord<T>>,
    pub val: Vec<PropertyRecord<T>>,
    pub test: TestSplit<T>,
    pub labeled: Vec<PropertyRecord<T>>,
    pub unlabeled: Vec<PropertyRecord<T>>,
}

/// Graphs of every dataset and external-pool structure, keyed by id.
struct GraphBank<T> {
    graphs: HashMap<String, CrystalGraph<T>>,
}

impl<T: Scalar> GraphBank<T> {
    fn build(records: &[&PropertyRecord<T>], neighbor: &NeighborParams<T>) -> Result<Self> {
        let graphs = records
            .par_iter()
            .map(|r| Ok((r.id().to_owned(), build_graph(&r.structure, neighbor)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { graphs })
    }

    fn get(&self, id: &str) -> &CrystalGraph<T> {
        &self.graphs[id]
    }
}

struct SyntheticSet<T> {
    records: Vec<PropertyRecord<T>>,
    graphs: Vec<CrystalGraph<T>>,
    kde: KdeModel<T>,
    generator: GeneratorModel<T>,
    out_of_range: usize,
}

struct SemiStage<T> {
    pseudo: Vec<PropertyRecord<T>>,
    synthetic: SyntheticSet<T>,
}

struct TrainedArm<T> {
    model: PredictorModel<T>,
    report: TrainReport,
    composition: Composition,
    seed: u64,
}

/// Everything produced by one arm evaluation, for metadata and checkpoints.
pub struct ArmOutcome<T> {
    pub result: ArmResult,
    pub model: PredictorModel<T>,
    pub report: TrainReport,
}

/// Generator, KDE and pseudo labels behind one run's synthetic set.
pub struct StageOutcome<T> {
    pub scenario: Scenario,
    pub run_index: usize,
    pub round: usize,
    pub generator: GeneratorModel<T>,
    pub kde: KdeModel<T>,
    pub pseudo_labels: Vec<T>,
    pub synthetic_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub run_index: usize,
    pub round: usize,
    pub split_seed: u64,
    pub arm: ArmSpec,
    pub arm_seed: u64,
}

pub struct FlywheelOutput<T> {
    /// Sorted by (round, arm, run).
    pub results: Vec<ArmResult>,
    pub arms: Vec<ArmOutcome<T>>,
    pub stages: Vec<StageOutcome<T>>,
    pub seeds: Vec<SeedRow>,
    /// Test-label reads that happened outside final evaluation.
    pub test_leaks: usize,
    /// Test-label reads during evaluation, one per evaluated arm.
    pub test_reads: usize,
}

pub struct Flywheel<T> {
    config: RunConfig,
    neighbor: NeighborParams<T>,
    records: Vec<PropertyRecord<T>>,
    external: Vec<PropertyRecord<T>>,
    bank: GraphBank<T>,
}

impl<T: Scalar> Flywheel<T> {
    /// Validates the config and records and precomputes every graph.
    pub fn new(config: RunConfig, records: Vec<PropertyRecord<T>>, external: Vec<PropertyRecord<T>>) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for r in records.iter().chain(&external) {
            validate_structure(&r.structure, &config.meta)?;
        }
        let neighbor = config.neighbor.cast::<T>();
        let all: Vec<&PropertyRecord<T>> = records.iter().chain(&external).collect();
        let bank = GraphBank::build(&all, &neighbor)?;
        if bank.graphs.len() != all.len() {
            return Err(Error::MalformedRecord("record ids are not unique".into()));
        }
        Ok(Self { config, neighbor, records, external, bank })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn records(&self) -> &[PropertyRecord<T>] {
        &self.records
    }

    fn split_seed(&self, run_index: usize) -> u64 {
        let run = if self.config.options.fixed_split { 0 } else { run_index };
        stage_seed(self.config.base_seed, Stage::Split, run, 0)
    }

    pub fn splits(&self, run_index: usize) -> Result<RunSplits<T>> {
        let seed = self.split_seed(run_index);
        let assignment = split_dataset(&self.records, self.config.split_ratios, seed)?;
        let run = if self.config.options.fixed_split { 0 } else { run_index };
        let sub_seed = stage_seed(self.config.base_seed, Stage::Subsample, run, 0);
        let (labeled_ids, unlabeled_ids) = subsample_labeled(&assignment.train_ids, self.config.labeled_fraction, sub_seed);
        Ok(RunSplits {
            train: select_by_ids(&self.records, &assignment.train_ids),
            val: select_by_ids(&self.records, &assignment.val_ids),
            test: TestSplit::new(select_by_ids(&self.records, &assignment.test_ids)),
            labeled: select_by_ids(&self.records, &labeled_ids),
            unlabeled: select_by_ids(&self.records, &unlabeled_ids),
            assignment,
        })
    }

    /// Trains and evaluates one arm on its own; shared stages are recomputed.
    pub fn run_arm(&self, arm: ArmSpec, splits: &RunSplits<T>, run_index: usize, round: usize) -> Result<ArmResult> {
        let mut ctx = RunContext::new(self, splits, run_index);
        Ok(ctx.evaluate_arm(arm, round.max(1))?.result)
    }

    /// The scenario's three arms over `n_runs` runs, `jobs` runs at a time.
    pub fn run_scenario(&self, scenario: Scenario, jobs: usize) -> Result<FlywheelOutput<T>> {
        self.run_rounds(&[scenario], 1, jobs)
    }

    /// Semi-supervised scenario for `config.rounds` rounds. Round 1 equals
    /// [`Self::run_scenario`] on the semi scenario; later rounds pseudo-label
    /// with the previous round's S+G_S predictor.
    pub fn run_flywheel_iterations(&self, jobs: usize) -> Result<FlywheelOutput<T>> {
        self.run_rounds(&[Scenario::Semi], self.config.rounds, jobs)
    }

    /// Both scenarios in one pass, semi-supervised iterated `config.rounds` times.
    pub fn run_all(&self, scenarios: &[Scenario], jobs: usize) -> Result<FlywheelOutput<T>> {
        self.run_rounds(scenarios, self.config.rounds, jobs)
    }

    fn run_rounds(&self, scenarios: &[Scenario], rounds: usize, jobs: usize) -> Result<FlywheelOutput<T>> {
        let run_one = |run_index: usize| -> Result<RunOutput<T>> {
            let splits = self.splits(run_index)?;
            let mut ctx = RunContext::new(self, &splits, run_index);
            let mut arms = Vec::new();
            for &scenario in scenarios {
                let n_rounds = if scenario == Scenario::Semi { rounds } else { 1 };
                for round in 1..=n_rounds {
                    for arm in ArmSpec::for_scenario(scenario) {
                        arms.push(ctx.evaluate_arm(arm, round)?);
                    }
                }
            }
            let stages = ctx.take_stages();
            Ok(RunOutput {
                arms,
                stages,
                split_seed: self.split_seed(run_index),
                leaks: splits.test.sealed_reads(),
                reads: splits.test.label_reads(),
            })
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let runs: Vec<RunOutput<T>> =
            pool.install(|| (0..self.config.n_runs).into_par_iter().map(run_one).collect::<Result<Vec<_>>>())?;

        let mut out = FlywheelOutput { results: Vec::new(), arms: Vec::new(), stages: Vec::new(), seeds: Vec::new(), test_leaks: 0, test_reads: 0 };
        for run in runs {
            out.test_leaks += run.leaks;
            out.test_reads += run.reads;
            for a in &run.arms {
                out.seeds.push(SeedRow {
                    run_index: a.result.run_index,
                    round: a.result.round,
                    split_seed: run.split_seed,
                    arm: a.result.arm,
                    arm_seed: a.result.seed,
                });
            }
            out.arms.extend(run.arms);
            out.stages.extend(run.stages);
        }
        let key = |r: &ArmResult| (r.round, r.arm, r.run_index);
        out.arms.sort_by_key(|a| key(&a.result));
        out.seeds.sort_by_key(|s| (s.run_index, s.round, s.arm));
        out.stages.sort_by_key(|s| (s.scenario, s.round, s.run_index));
        out.results = out.arms.iter().map(|a| a.result.clone()).collect();
        Ok(out)
    }
}

struct RunOutput<T> {
    arms: Vec<ArmOutcome<T>>,
    stages: Vec<StageOutcome<T>>,
    split_seed: u64,
    leaks: usize,
    reads: usize,
}

/// Per-run cache of trained arms and shared stages.
struct RunContext<'a, T> {
    fw: &'a Flywheel<T>,
    splits: &'a RunSplits<T>,
    run_index: usize,
    trained: BTreeMap<(usize, ArmSpec), TrainedArm<T>>,
    full_stage: Option<SyntheticSet<T>>,
    semi_stages: BTreeMap<usize, SemiStage<T>>,
}

impl<'a, T: Scalar> RunContext<'a, T> {
    fn new(fw: &'a Flywheel<T>, splits: &'a RunSplits<T>, run_index: usize) -> Self {
        Self { fw, splits, run_index, trained: BTreeMap::new(), full_stage: None, semi_stages: BTreeMap::new() }
    }

    fn config(&self) -> &RunConfig {
        &self.fw.config
    }

    fn samples_of<'g>(&'g self, records: &[&'g PropertyRecord<T>], synthetic: Option<&'g SyntheticSet<T>>) -> Vec<Sample<'g, T>> {
        let synth_graphs: HashMap<&str, &CrystalGraph<T>> = synthetic
            .map(|s| s.records.iter().zip(&s.graphs).map(|(r, g)| (r.id(), g)).collect())
            .unwrap_or_default();
        records
            .iter()
            .map(|r| {
                let graph = match r.label_kind {
                    LabelKind::Synthetic => synth_graphs[r.id()],
                    _ => self.fw.bank.get(r.id()),
                };
                Sample { graph, target: r.property }
            })
            .collect()
    }

    fn train_arm(
        &self,
        arm: ArmSpec,
        round: usize,
        train: &[&PropertyRecord<T>],
        synthetic: Option<&SyntheticSet<T>>,
    ) -> Result<TrainedArm<T>> {
        let seed = derive_seed(self.config().base_seed, arm, self.run_index, round);
        let config = PredictorConfig { seed, ..self.config().predictor.clone() };
        let model = init_predictor(&config, &self.fw.neighbor);
        let train_samples = self.samples_of(train, synthetic);
        let val_refs: Vec<&PropertyRecord<T>> = self.splits.val.iter().collect();
        let val_samples = self.samples_of(&val_refs, None);
        log::info!(
            "stage=train_predictor arm={} run={} round={} n_train={} seed={seed}",
            arm.key(),
            self.run_index,
            round,
            train.len()
        );
        let (model, report) = train_on_graphs(model, &train_samples, &val_samples)?;
        Ok(TrainedArm { model, report, composition: Composition::of(train), seed })
    }

    fn synthesize(
        &self,
        gen_train: &[PropertyRecord<T>],
        gen_seed: u64,
        synth_seed: u64,
        labeler: Option<&PredictorModel<T>>,
    ) -> Result<SyntheticSet<T>> {
        let cfg = self.config();
        let labels: Vec<T> = gen_train.iter().map(|r| r.property).collect();
        let kde = fit_kde(&labels)?;
        let gen_config = GeneratorConfig { seed: gen_seed, ..cfg.generator.clone() };
        log::info!("stage=train_generator run={} n_train={} seed={gen_seed}", self.run_index, gen_train.len());
        let generator = train_generator(gen_train, &gen_config)?;
        let mut records = generate_synthetic_set(&generator, &kde, cfg.n_synthetic, cfg.meta.max_atoms, synth_seed);
        let out_of_range = records.iter().filter(|r| !cfg.meta.contains(r.property.to_f64_lossless())).count();
        let graphs = records
            .par_iter()
            .map(|r| build_graph(&r.structure, &self.fw.neighbor))
            .collect::<Result<Vec<_>>>()?;
        if let Some(model) = labeler {
            for (r, g) in records.iter_mut().zip(&graphs) {
                r.property = forward(model, g)?;
            }
        }
        log::info!("stage=sample run={} n_synthetic={} out_of_range={out_of_range}", self.run_index, records.len());
        Ok(SyntheticSet { records, graphs, kde, generator, out_of_range })
    }

    fn ensure_full_stage(&mut self) -> Result<()> {
        if self.full_stage.is_some() {
            return Ok(());
        }
        let base = self.config().base_seed;
        let shared = self.config().options.shared_synthetic;
        let stage_run = if shared { 0 } else { self.run_index };
        let labeler = if self.config().options.relabel_synthetic {
            self.ensure_trained(ArmSpec::F, 1)?;
            Some(self.trained[&(1, ArmSpec::F)].model.clone())
        } else {
            None
        };
        let gen_train = if shared && self.run_index != 0 { self.fw.splits(0)?.train } else { self.splits.train.clone() };
        let set = self.synthesize(
            &gen_train,
            stage_seed(base, Stage::FullGenerator, stage_run, 1),
            stage_seed(base, Stage::FullSynthetic, stage_run, 1),
            labeler.as_ref(),
        )?;
        self.full_stage = Some(set);
        Ok(())
    }

    /// Pseudo labels, generator and synthetic set for one semi round.
    fn ensure_semi_stage(&mut self, round: usize) -> Result<()> {
        if self.semi_stages.contains_key(&round) {
            return Ok(());
        }
        let labeler_key = if round == 1 { (1, ArmSpec::S) } else { (round - 1, ArmSpec::SPlusGS) };
        self.ensure_trained(labeler_key.1, labeler_key.0)?;
        let labeler = self.trained[&labeler_key].model.clone();
        let mut pool: Vec<CrystalStructure<T>> = self.splits.unlabeled.iter().map(|r| r.structure.clone()).collect();
        if round > 1 {
            pool.extend(self.fw.external.iter().map(|r| r.structure.clone()));
        }
        let pseudo = pseudo_label(&labeler, &pool)?;
        log::info!("stage=pseudo_label run={} round={round} n_pseudo={}", self.run_index, pseudo.len());
        let gen_train: Vec<PropertyRecord<T>> = self.splits.labeled.iter().cloned().chain(pseudo.iter().cloned()).collect();
        let base = self.config().base_seed;
        let shared = self.config().options.shared_synthetic;
        let stage_run = if shared { 0 } else { self.run_index };
        let relabel = self.config().options.relabel_synthetic.then_some(&labeler);
        let synthetic = self.synthesize(
            &gen_train,
            stage_seed(base, Stage::SemiGenerator, stage_run, round),
            stage_seed(base, Stage::SemiSynthetic, stage_run, round),
            relabel,
        )?;
        self.semi_stages.insert(round, SemiStage { pseudo, synthetic });
        Ok(())
    }

    fn ensure_trained(&mut self, arm: ArmSpec, round: usize) -> Result<()> {
        if self.trained.contains_key(&(round, arm)) {
            return Ok(());
        }
        let splits = self.splits;
        let trained = match arm {
            ArmSpec::F => self.train_arm(arm, round, &splits.train.iter().collect::<Vec<_>>(), None)?,
            ArmSpec::S => self.train_arm(arm, round, &splits.labeled.iter().collect::<Vec<_>>(), None)?,
            ArmSpec::GF | ArmSpec::FPlusGF => {
                self.ensure_full_stage()?;
                let set = self.full_stage.as_ref().expect("full stage");
                let mut train: Vec<&PropertyRecord<T>> = Vec::new();
                if arm == ArmSpec::FPlusGF {
                    train.extend(splits.train.iter());
                }
                train.extend(set.records.iter());
                self.train_arm(arm, round, &train, Some(set))?
            }
            ArmSpec::GS | ArmSpec::SPlusGS => {
                self.ensure_semi_stage(round)?;
                let stage = &self.semi_stages[&round];
                let mut train: Vec<&PropertyRecord<T>> = Vec::new();
                if arm == ArmSpec::SPlusGS {
                    train.extend(splits.labeled.iter());
                    if self.config().options.include_pseudo_in_final {
                        train.extend(stage.pseudo.iter());
                    }
                }
                train.extend(stage.synthetic.records.iter());
                self.train_arm(arm, round, &train, Some(&stage.synthetic))?
            }
        };
        self.trained.insert((round, arm), trained);
        Ok(())
    }

    fn evaluate_arm(&mut self, arm: ArmSpec, round: usize) -> Result<ArmOutcome<T>> {
        self.ensure_trained(arm, round)?;
        let trained = &self.trained[&(round, arm)];
        let predictions = self
            .splits
            .test
            .structures()
            .map(|s| forward(&trained.model, self.fw.bank.get(&s.id)))
            .collect::<Result<Vec<T>>>()?;
        let truths = self.splits.test.evaluate_with(|t| t.labels())?;
        let test_metric = if predictions.is_empty() { f64::NAN } else { mae(&predictions, &truths)?.to_f64_lossless() };
        let out_of_range = match arm {
            ArmSpec::GF | ArmSpec::FPlusGF => self.full_stage.as_ref().map_or(0, |s| s.out_of_range),
            ArmSpec::GS | ArmSpec::SPlusGS => self.semi_stages.get(&round).map_or(0, |s| s.synthetic.out_of_range),
            _ => 0,
        };
        log::info!(
            "stage=evaluate arm={} run={} round={round} test_mae={test_metric:.6}",
            arm.key(),
            self.run_index
        );
        Ok(ArmOutcome {
            result: ArmResult {
                arm,
                run_index: self.run_index,
                round,
                seed: trained.seed,
                test_metric,
                train_set_composition: trained.composition,
                best_epoch: trained.report.best_epoch,
                synthetic_out_of_range: out_of_range,
            },
            model: trained.model.clone(),
            report: trained.report.clone(),
        })
    }

    fn take_stages(&mut self) -> Vec<StageOutcome<T>> {
        let mut out = Vec::new();
        if let Some(set) = self.full_stage.take() {
            out.push(StageOutcome {
                scenario: Scenario::Full,
                run_index: self.run_index,
                round: 1,
                synthetic_ids: set.records.iter().map(|r| r.id().to_owned()).collect(),
                generator: set.generator,
                kde: set.kde,
                pseudo_labels: Vec::new(),
            });
        }
        for (round, stage) in std::mem::take(&mut self.semi_stages) {
            out.push(StageOutcome {
                scenario: Scenario::Semi,
                run_index: self.run_index,
                round,
                synthetic_ids: stage.synthetic.records.iter().map(|r| r.id().to_owned()).collect(),
                generator: stage.synthetic.generator,
                kde: stage.synthetic.kde,
                pseudo_labels: stage.pseudo.iter().map(|r| r.property).collect(),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn seeds_are_distinct_across_arms_runs_rounds() {
        let mut seen = HashSet::new();
        for arm in ArmSpec::ALL {
            for run in 0..5 {
                for round in 1..=2 {
                    assert!(seen.insert(derive_seed(7, arm, run, round)));
                }
            }
        }
        assert_eq!(seen.len(), 60);
        assert_eq!(derive_seed(7, ArmSpec::F, 0, 1), derive_seed(7, ArmSpec::F, 0, 1));
        assert_ne!(derive_seed(7, ArmSpec::F, 0, 1), derive_seed(7, ArmSpec::F, 1, 1));
    }

    #[test]
    fn arm_keys_round_trip() {
        for arm in ArmSpec::ALL {
            assert_eq!(ArmSpec::from_key(arm.key()), Some(arm));
            let json = serde_json::to_string(&arm).unwrap();
            assert_eq!(json, format!("\"{}\"", arm.key()));
        }
    }

    #[test]
    fn config_violations_name_fields() {
        let mut cfg = RunConfig::for_dataset(DatasetMeta::mp_poly_total());
        assert!(cfg.violations().is_empty());
        cfg.labeled_fraction = 0.0;
        cfg.predictor.learning_rate = -1.0;
        cfg.generator.max_atoms = 3;
        let names: Vec<String> = cfg.violations().into_iter().map(|(p, _)| p).collect();
        assert_eq!(names, ["labeled_fraction", "predictor.learning_rate", "generator.max_atoms"]);
    }

    #[test]
    fn sealed_test_labels_are_accounted() {
        let t: TestSplit<f64> = TestSplit::new(Vec::new());
        assert!(matches!(t.labels(), Err(Error::TestLeak)));
        assert_eq!(t.sealed_reads(), 1);
        t.evaluate_with(|t| t.labels()).unwrap();
        assert_eq!(t.label_reads(), 1);
        assert!(t.labels().is_err());
    }
}
