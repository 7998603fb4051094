use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use matwheel::checkpoint::{load_generator, save_generator, save_predictor};
use matwheel::dataset::{read_jsonl_file, split_dataset, subsample_labeled, write_jsonl_file, SplitAssignment};
use matwheel::evaluation::{aggregate, render, ReportFormat};
use matwheel::generator::{generate_synthetic_set, train_generator, GeneratorConfig};
use matwheel::kde::{fit_kde, KdeModel};
use matwheel::predictor::{init_predictor, train_predictor};
use matwheel::structure::validate_structure;
use matwheel::toy::{toy_dataset, toy_meta};
use matwheel::{rundir, DatasetMeta, Pipeline, Record, RunConfig, Scenario};

const OUTPUT_DIR_ENV: &str = "MATWHEEL_OUTPUT_DIR";

/// Marks failures that should exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

#[derive(Parser)]
#[command(name = "matwheel", version, about = "Materials data flywheel pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Jarvis2dExfoliation,
    MpPolyTotal,
    Toy,
}

impl Preset {
    fn meta(self) -> DatasetMeta {
        match self {
            Preset::Jarvis2dExfoliation => DatasetMeta::jarvis2d_exfoliation(),
            Preset::MpPolyTotal => DatasetMeta::mp_poly_total(),
            Preset::Toy => toy_meta(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ScenarioArg {
    Full,
    Semi,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

#[derive(clap::Args)]
struct MetaArgs {
    /// Built-in dataset bounds.
    #[arg(long, value_enum, conflicts_with = "meta")]
    dataset: Option<Preset>,
    /// JSON file with {"name", "max_atoms", "property_range"}.
    #[arg(long)]
    meta: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSON-lines dump and write the canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        meta: MetaArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw a train/val/test split and the labeled subset.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.10)]
        labeled_fraction: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one predictor from a run config's predictor section.
    TrainPredictor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one generator and fit the KDE over its training labels.
    TrainGenerator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        kde_output: Option<PathBuf>,
    },
    /// Sample synthetic records from a generator checkpoint.
    Sample {
        #[arg(long)]
        generator: PathBuf,
        /// KDE file written by train-generator.
        #[arg(long, conflicts_with = "condition")]
        kde: Option<PathBuf>,
        /// Fixed property condition instead of KDE draws.
        #[arg(long)]
        condition: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_atoms: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the scenarios end to end and write the run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        n_runs: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_enum, default_value_t = ScenarioArg::Both)]
        scenario: ScenarioArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-render reports from a run directory's stored results.
    Report {
        #[arg(long)]
        results_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the built-in synthetic toy dataset.
    Toy {
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Run config plus CLI-only keys.
#[derive(Serialize)]
struct CliConfig {
    #[serde(flatten)]
    run: RunConfig,
    output_dir: Option<PathBuf>,
    log_level: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CliOnly {
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default = "default_log_level")]
    log_level: String,
}

fn default_log_level() -> String {
    "info".into()
}

const CLI_ONLY_KEYS: [&str; 2] = ["output_dir", "log_level"];

fn load_config(path: &Path) -> anyhow::Result<CliConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let Value::Object(mut map) = value else {
        return Err(config_error(format!("{}: expected a JSON object", path.display())));
    };
    let mut cli_map = Map::new();
    for key in CLI_ONLY_KEYS {
        if let Some(v) = map.remove(key) {
            cli_map.insert(key.to_owned(), v);
        }
    }
    let cli: CliOnly = parse_at(Value::Object(cli_map), path)?;
    let mut run: RunConfig = parse_at(Value::Object(map), path)?;
    if let Some(data) = &run.dataset_path {
        if data.is_relative() {
            run.dataset_path = Some(path.parent().unwrap_or(Path::new(".")).join(data));
        }
    }
    if let Some(pool) = &run.options.external_pool_path {
        if pool.is_relative() {
            run.options.external_pool_path = Some(path.parent().unwrap_or(Path::new(".")).join(pool));
        }
    }
    Ok(CliConfig { run, output_dir: cli.output_dir, log_level: cli.log_level })
}

fn parse_at<T: serde::de::DeserializeOwned>(value: Value, path: &Path) -> anyhow::Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let at = e.path().to_string();
        config_error(format!("{}: {at}: {}", path.display(), e.into_inner()))
    })
}

fn check_config(run: &RunConfig) -> anyhow::Result<()> {
    let v = run.violations();
    if v.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = v.iter().map(|(p, m)| format!("{p}: {m}")).collect();
    Err(config_error(format!("invalid config:\n  {}", lines.join("\n  "))))
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| writeln!(buf, "level={} {}", record.level().as_str().to_lowercase(), record.args()))
        .try_init();
}

fn resolve_meta(args: &MetaArgs) -> anyhow::Result<DatasetMeta> {
    match (&args.dataset, &args.meta) {
        (Some(p), _) => Ok(p.meta()),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            let meta: DatasetMeta = parse_at(
                serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?,
                path,
            )?;
            meta.check().map_err(|e| config_error(e.to_string()))?;
            Ok(meta)
        }
        (None, None) => Err(config_error("one of --dataset or --meta is required")),
    }
}

fn read_records(path: &Path, meta: Option<&DatasetMeta>) -> anyhow::Result<Vec<Record>> {
    let outcome = read_jsonl_file::<f64>(path, |r| match meta {
        Some(m) => validate_structure(&r.structure, m),
        None => Ok(()),
    })
    .with_context(|| format!("reading {}", path.display()))?;
    for (line, reason) in &outcome.rejected {
        log::warn!("stage=read file={} line={line} reason={reason:?}", path.display());
    }
    Ok(outcome.records)
}

fn cmd_ingest(input: &Path, meta: &MetaArgs, output: Option<&Path>) -> anyhow::Result<()> {
    let meta = resolve_meta(meta)?;
    let outcome = read_jsonl_file::<f64>(input, |r| {
        validate_structure(&r.structure, &meta)?;
        if r.property.is_finite() {
            Ok(())
        } else {
            Err(matwheel::Error::NonFiniteInput)
        }
    })
    .with_context(|| format!("reading {}", input.display()))?;
    for (line, reason) in &outcome.rejected {
        eprintln!("rejected line {line}: {reason}");
    }
    for r in &outcome.records {
        if !meta.contains(r.property) {
            log::warn!("stage=ingest id={} property={} outside={:?}", r.id(), r.property, meta.property_range);
        }
    }
    println!("accepted {}, rejected {}", outcome.records.len(), outcome.rejected.len());
    if let Some(out) = output {
        write_jsonl_file(out, &outcome.records)?;
    }
    if outcome.records.is_empty() {
        return Err(anyhow!("no records accepted from {}", input.display()));
    }
    Ok(())
}

#[derive(Serialize)]
struct SplitFile {
    #[serde(flatten)]
    split: SplitAssignment,
    labeled_ids: Vec<String>,
    unlabeled_ids: Vec<String>,
}

fn cmd_split(input: &Path, seed: u64, labeled_fraction: f64, output: &Path) -> anyhow::Result<()> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(config_error("labeled_fraction: must lie in (0, 1]"));
    }
    let records = read_records(input, None)?;
    let split = split_dataset(&records, matwheel::dataset::DEFAULT_SPLIT_RATIOS, seed)?;
    let (labeled_ids, unlabeled_ids) = subsample_labeled(&split.train_ids, labeled_fraction, seed);
    let (a, b, c) = split.sizes();
    println!("train {a}, val {b}, test {c}, labeled {}, unlabeled {}", labeled_ids.len(), unlabeled_ids.len());
    let file = SplitFile { split, labeled_ids, unlabeled_ids };
    fs::write(output, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

fn cmd_train_predictor(config: &Path, train: &Path, val: &Path, output: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    check_config(&cfg.run)?;
    init_logging(&cfg.log_level);
    let meta = Some(&cfg.run.meta);
    let train = read_records(train, meta)?;
    let val = read_records(val, meta)?;
    let model = init_predictor(&cfg.run.predictor, &cfg.run.neighbor);
    let (model, report) = train_predictor(model, &train, &val)?;
    log::info!(
        "stage=train_predictor n_train={} best_epoch={:?} best_val_mae={:?}",
        train.len(),
        report.best_epoch,
        report.best_val_mae
    );
    save_predictor(output, &model)?;
    Ok(())
}

fn cmd_train_generator(config: &Path, train: &Path, output: &Path, kde_output: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    check_config(&cfg.run)?;
    init_logging(&cfg.log_level);
    let train = read_records(train, Some(&cfg.run.meta))?;
    let gen_config = GeneratorConfig { seed: cfg.run.base_seed, ..cfg.run.generator.clone() };
    let model = train_generator(&train, &gen_config)?;
    save_generator(output, &model)?;
    if let Some(path) = kde_output {
        let labels: Vec<f64> = train.iter().map(|r| r.property).collect();
        let kde = fit_kde(&labels)?;
        fs::write(path, serde_json::to_string_pretty(&kde)? + "\n")?;
    }
    log::info!("stage=train_generator n_train={}", train.len());
    Ok(())
}

fn cmd_sample(
    generator: &Path,
    kde: Option<&Path>,
    condition: Option<f64>,
    n: usize,
    seed: u64,
    max_atoms: Option<usize>,
    output: &Path,
) -> anyhow::Result<()> {
    let model = load_generator::<f64>(generator)?;
    let kde: KdeModel<f64> = match (kde, condition) {
        (Some(path), _) => serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?,
        (None, Some(c)) if c.is_finite() => KdeModel { points: vec![c], bandwidth: 0.0 },
        _ => return Err(config_error("one of --kde or a finite --condition is required")),
    };
    let max_atoms = max_atoms.unwrap_or(model.config.max_atoms);
    if max_atoms < 1 {
        return Err(config_error("max_atoms: must be at least 1"));
    }
    let records = generate_synthetic_set(&model, &kde, n, max_atoms, seed);
    write_jsonl_file(output, &records)?;
    println!("sampled {}", records.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config: &Path,
    output_dir: Option<PathBuf>,
    n_runs: Option<usize>,
    rounds: Option<usize>,
    scenario: ScenarioArg,
    seed: Option<u64>,
    jobs: usize,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = n_runs {
        cfg.run.n_runs = n;
    }
    if let Some(r) = rounds {
        cfg.run.rounds = r;
    }
    if let Some(s) = seed {
        cfg.run.base_seed = s;
    }
    check_config(&cfg.run)?;
    cfg.output_dir = output_dir
        .or(cfg.output_dir.take())
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from));
    let Some(out_dir) = cfg.output_dir.clone() else {
        return Err(config_error(format!("output_dir: not set (use --output-dir, the config or {OUTPUT_DIR_ENV})")));
    };
    let Some(data_path) = cfg.run.dataset_path.clone() else {
        return Err(config_error("dataset_path: required for run"));
    };
    init_logging(&cfg.log_level);

    rundir::begin(&out_dir)?;
    let records = read_records(&data_path, Some(&cfg.run.meta))?;
    let external = match &cfg.run.options.external_pool_path {
        Some(p) => read_records(p, Some(&cfg.run.meta))?,
        None => Vec::new(),
    };
    log::info!("stage=load dataset={} n_records={} n_external={}", cfg.run.meta.name, records.len(), external.len());
    let scenarios: &[Scenario] = match scenario {
        ScenarioArg::Full => &[Scenario::Full],
        ScenarioArg::Semi => &[Scenario::Semi],
        ScenarioArg::Both => &[Scenario::Full, Scenario::Semi],
    };
    let pipeline = Pipeline::new(cfg.run.clone(), records, external)?;
    let output = pipeline.run_all(scenarios, jobs)?;
    if output.test_leaks > 0 {
        return Err(anyhow!("{} test-label reads outside evaluation", output.test_leaks));
    }
    rundir::write_run(&out_dir, &cfg, &cfg.run.meta.name, &output)?;
    log::info!("stage=done output_dir={} n_results={}", out_dir.display(), output.results.len());
    Ok(())
}

fn cmd_report(results_dir: &Path, format: FormatArg, output: Option<&Path>) -> anyhow::Result<()> {
    let file = rundir::read_results(results_dir).with_context(|| format!("reading results in {}", results_dir.display()))?;
    let cells = aggregate(&file.results)?;
    let format = match format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Markdown => ReportFormat::Markdown,
    };
    let text = render(format, &file.dataset, &cells);
    match output {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_toy(n: usize, seed: u64, output: &Path) -> anyhow::Result<()> {
    if n == 0 {
        return Err(config_error("n: must be at least 1"));
    }
    write_jsonl_file(output, &toy_dataset::<f64>(n, seed))?;
    println!("wrote {n} records");
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    if !matches!(cli.command, Command::Run { .. } | Command::TrainPredictor { .. } | Command::TrainGenerator { .. }) {
        init_logging("warn");
    }
    match cli.command {
        Command::Ingest { input, meta, output } => cmd_ingest(&input, &meta, output.as_deref()),
        Command::Split { input, seed, labeled_fraction, output } => cmd_split(&input, seed, labeled_fraction, &output),
        Command::TrainPredictor { config, train, val, output } => cmd_train_predictor(&config, &train, &val, &output),
        Command::TrainGenerator { config, train, output, kde_output } => {
            cmd_train_generator(&config, &train, &output, kde_output.as_deref())
        }
        Command::Sample { generator, kde, condition, n, seed, max_atoms, output } => {
            cmd_sample(&generator, kde.as_deref(), condition, n, seed, max_atoms, &output)
        }
        Command::Run { config, output_dir, n_runs, rounds, scenario, seed, jobs } => {
            cmd_run(&config, output_dir, n_runs, rounds, scenario, seed, jobs)
        }
        Command::Report { results_dir, format, output } => cmd_report(&results_dir, format, output.as_deref()),
        Command::Toy { n, seed, output } => cmd_toy(n, seed, &output),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<matwheel::Error>(), Some(matwheel::Error::Config(_)))
    });
    if is_config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
