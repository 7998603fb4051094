//! Test metrics, cross-run aggregation and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flywheel::{ArmResult, ArmSpec, Scenario};
use crate::scalar::{from_usize, Scalar};

pub fn mae<T: Scalar>(predictions: &[T], truths: &[T]) -> Result<T> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total = predictions.iter().zip(truths).fold(T::zero(), |acc, (&p, &t)| acc + (p - t).abs());
    Ok(total / from_usize(predictions.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub arm: ArmSpec,
    /// Flywheel round, 1 unless iterating.
    pub round: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 divisor); 0 for a single run.
    pub std: f64,
    pub n: usize,
}

impl AggregateCell {
    pub fn scenario_label(&self) -> String {
        scenario_label(self.arm.scenario(), self.round)
    }
}

fn scenario_label(scenario: Scenario, round: usize) -> String {
    let base = match scenario {
        Scenario::Full => "full",
        Scenario::Semi => "semi",
    };
    if round <= 1 {
        base.to_owned()
    } else {
        format!("{base}_round{round}")
    }
}

/// Table cell text: mean with the deviation in parentheses, two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.2})")
}

/// Mean and sample standard deviation per (round, arm), in canonical arm order.
pub fn aggregate(results: &[ArmResult]) -> Result<Vec<AggregateCell>> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut groups: BTreeMap<(usize, ArmSpec), Vec<f64>> = BTreeMap::new();
    for r in results {
        groups.entry((r.round, r.arm)).or_default().push(r.test_metric);
    }
    Ok(groups
        .into_iter()
        .map(|((round, arm), mut values)| {
            // Fixed summation order makes the result independent of input order.
            values.sort_by(f64::total_cmp);
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregateCell { arm, round, mean, std, n }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn render_csv(dataset: &str, cells: &[AggregateCell]) -> String {
    let mut out = String::from("dataset,scenario,arm,mean,std,n\n");
    for c in cells {
        let _ = writeln!(out, "{dataset},{},{},{:.6},{:.6},{}", c.scenario_label(), c.arm.key(), c.mean, c.std, c.n);
    }
    out
}

/// One table per scenario (and round), laid out as dataset row × three arms.
pub fn render_markdown(dataset: &str, cells: &[AggregateCell]) -> String {
    let mut blocks: BTreeMap<(usize, Scenario), Vec<&AggregateCell>> = BTreeMap::new();
    for c in cells {
        blocks.entry((c.round, c.arm.scenario())).or_default().push(c);
    }
    let mut out = String::new();
    for ((round, scenario), block) in blocks {
        let title = match scenario {
            Scenario::Full => "Fully-Supervised",
            Scenario::Semi => "Semi-Supervised",
        };
        if round > 1 {
            let _ = writeln!(out, "## {title} (round {round})\n");
        } else {
            let _ = writeln!(out, "## {title}\n");
        }
        let arms = ArmSpec::for_scenario(scenario);
        let _ = writeln!(out, "| Dataset | {} |", arms.iter().map(|a| a.label()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(arms.len()));
        let row: Vec<String> = arms
            .iter()
            .map(|a| {
                block.iter().find(|c| c.arm == *a).map(|c| format_cell(c.mean, c.std)).unwrap_or_else(|| "-".into())
            })
            .collect();
        let _ = writeln!(out, "| {dataset} | {} |\n", row.join(" | "));
    }
    let runs = cells.iter().map(|c| c.n).max().unwrap_or(0);
    let _ = writeln!(
        out,
        "Cells are mean (sample standard deviation, n - 1 divisor) of test MAE over {runs} runs, in dataset units."
    );
    out
}

pub fn render(format: ReportFormat, dataset: &str, cells: &[AggregateCell]) -> String {
    match format {
        ReportFormat::Csv => render_csv(dataset, cells),
        ReportFormat::Markdown => render_markdown(dataset, cells),
    }
}

pub fn emit_report(cells: &[AggregateCell], dataset: &str, format: ReportFormat, path: &std::path::Path) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::EmptyInput);
    }
    std::fs::write(path, render(format, dataset, cells))?;
    Ok(())
}

/// Reads a CSV written by [`render_csv`] back into `(dataset, cells)`.
pub fn parse_report_csv(text: &str) -> Result<(String, Vec<AggregateCell>)> {
    let bad = |m: &str| Error::MalformedRecord(format!("report csv: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("dataset,scenario,arm,mean,std,n") {
        return Err(bad("unexpected header"));
    }
    let mut dataset = String::new();
    let mut cells = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line));
        }
        dataset = f[0].to_owned();
        let arm = ArmSpec::from_key(f[2]).ok_or_else(|| bad(f[2]))?;
        let round = match f[1].split_once("_round") {
            Some((_, r)) => r.parse().map_err(|_| bad(f[1]))?,
            None => 1,
        };
        cells.push(AggregateCell {
            arm,
            round,
            mean: f[3].parse().map_err(|_| bad(f[3]))?,
            std: f[4].parse().map_err(|_| bad(f[4]))?,
            n: f[5].parse().map_err(|_| bad(f[5]))?,
        });
    }
    Ok((dataset, cells))
}
