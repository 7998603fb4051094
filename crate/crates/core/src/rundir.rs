//! On-disk layout of one pipeline execution.
//!
//! ```text
//! <dir>/config.json        config snapshot
//! <dir>/seeds.csv          split and arm seeds per run
//! <dir>/results.json       {"dataset": .., "results": [ArmResult..]}
//! <dir>/report.csv
//! <dir>/report.md
//! <dir>/kde/<scenario>-run<r>-round<k>.json
//! <dir>/pseudo/semi-run<r>-round<k>.json
//! <dir>/checkpoints/predictor-<arm>-run<r>-round<k>.json
//! <dir>/checkpoints/generator-<scenario>-run<r>-round<k>.json
//! <dir>/DONE               written last
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_generator, save_predictor};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, render, ReportFormat};
use crate::flywheel::{ArmResult, FlywheelOutput, Scenario};
use crate::scalar::Scalar;

pub const DONE_MARKER: &str = "DONE";
pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub dataset: String,
    pub results: Vec<ArmResult>,
}

fn scenario_key(s: Scenario) -> &'static str {
    match s {
        Scenario::Full => "full",
        Scenario::Semi => "semi",
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Creates the directory and removes a stale DONE marker.
pub fn begin(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let done = dir.join(DONE_MARKER);
    if done.exists() {
        fs::remove_file(done)?;
    }
    Ok(())
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(DONE_MARKER).is_file()
}

pub fn seeds_csv<T>(output: &FlywheelOutput<T>) -> String {
    let mut out = String::from("run_index,round,arm,split_seed,arm_seed\n");
    for s in &output.seeds {
        writeln!(out, "{},{},{},{},{}", s.run_index, s.round, s.arm.key(), s.split_seed, s.arm_seed).expect("string write");
    }
    out
}

/// Writes every artifact of `output`, then the DONE marker.
pub fn write_run<T: Scalar>(dir: &Path, config: &impl Serialize, dataset: &str, output: &FlywheelOutput<T>) -> Result<()> {
    begin(dir)?;
    write_json(&dir.join("config.json"), config)?;
    fs::write(dir.join("seeds.csv"), seeds_csv(output))?;
    write_json(&dir.join(RESULTS_FILE), &ResultsFile { dataset: dataset.to_owned(), results: output.results.clone() })?;

    let kde_dir = dir.join("kde");
    let ckpt_dir = dir.join("checkpoints");
    let pseudo_dir = dir.join("pseudo");
    fs::create_dir_all(&kde_dir)?;
    fs::create_dir_all(&ckpt_dir)?;
    for stage in &output.stages {
        let stem = format!("{}-run{}-round{}", scenario_key(stage.scenario), stage.run_index, stage.round);
        write_json(&kde_dir.join(format!("{stem}.json")), &stage.kde)?;
        save_generator(&ckpt_dir.join(format!("generator-{stem}.json")), &stage.generator)?;
        if stage.scenario == Scenario::Semi {
            fs::create_dir_all(&pseudo_dir)?;
            write_json(&pseudo_dir.join(format!("{stem}.json")), &stage.pseudo_labels)?;
        }
    }
    for arm in &output.arms {
        let r = &arm.result;
        let name = format!("predictor-{}-run{}-round{}.json", r.arm.key(), r.run_index, r.round);
        save_predictor(&ckpt_dir.join(name), &arm.model)?;
    }

    write_reports(dir, dataset, &output.results)?;
    fs::write(dir.join(DONE_MARKER), "")?;
    Ok(())
}

pub fn write_reports(dir: &Path, dataset: &str, results: &[ArmResult]) -> Result<()> {
    let cells = aggregate(results)?;
    fs::write(dir.join(REPORT_CSV), render(ReportFormat::Csv, dataset, &cells))?;
    fs::write(dir.join(REPORT_MD), render(ReportFormat::Markdown, dataset, &cells))?;
    Ok(())
}

pub fn read_results(dir: &Path) -> Result<ResultsFile> {
    let path = dir.join(RESULTS_FILE);
    let text = fs::read_to_string(&path)?;
    let file: ResultsFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.results.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(file)
}
