//! Config-driven experiment runs and their on-disk artifacts.
//!
//! Every command writes a fresh output directory atomically. File contents
//! depend only on the configuration and seed, never on thread count or time.

pub mod config;
pub mod output;
pub mod runner;
pub mod verify;

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::world::{make_world, write_world};

pub use config::{Arm, ArmHead, ExperimentConfig};
pub use output::{commit_dir, commit_files, fmt_f64, Table};
pub use runner::{run_experiment, summarize, ResultRow, RunOutput, SummaryRow};
pub use verify::{run_verify, VerifyOutput};

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    command: &'static str,
    master_seed: u64,
    files: Vec<&'static str>,
    config: &'a ExperimentConfig,
}

fn manifest(command: &'static str, cfg: &ExperimentConfig, files: Vec<&'static str>) -> String {
    let m = Manifest { format: "ragadapt-manifest-1", command, master_seed: cfg.experiment.master_seed, files, config: cfg };
    toml::to_string(&m).expect("manifest serializes")
}

/// Generates the trial-0 world of `cfg` into `out`.
pub fn gen_world_command(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let tree = crate::rng::SeedTree::new(cfg.experiment.master_seed).child("trial", &[0]);
    let world = make_world(&cfg.world.world_config(tree.child("world", &[]).master())?)?;
    commit_dir(out, |dir| write_world(dir, &world))
}

/// Runs the experiment grid and writes `results.csv`, `summary.csv`,
/// `manifest.txt` and, with `emit_grid`, `grid.csv`.
pub fn run_command(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let result = run_experiment(cfg)?;
    let mut names = vec!["results.csv", "summary.csv"];
    let mut files = vec![
        ("results.csv", result.results_table().to_csv()),
        ("summary.csv", result.summary_table().to_csv()),
    ];
    if cfg.experiment.emit_grid {
        names.push("grid.csv");
        files.push(("grid.csv", result.grid_table().to_csv()));
    }
    files.push(("manifest.txt", manifest("run", cfg, names)));
    commit_files(out, &files)?;
    Ok(result)
}

/// Runs the theory sweep and writes `theory_report.csv`, `theory_report.txt`
/// and `manifest.txt`.
pub fn verify_command(cfg: &ExperimentConfig, out: &Path) -> Result<VerifyOutput> {
    let result = run_verify(cfg)?;
    commit_files(
        out,
        &[
            ("theory_report.csv", result.table().to_csv()),
            ("theory_report.txt", result.text()),
            ("manifest.txt", manifest("verify", cfg, vec!["theory_report.csv", "theory_report.txt"])),
        ],
    )?;
    Ok(result)
}

fn render(table: &Table, columns: &[&str], out: &mut String) {
    let idx: Vec<Option<usize>> = columns.iter().map(|c| table.column(c)).collect();
    let cells: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|row| {
            idx.iter()
                .map(|i| {
                    let v = i.map_or("", |i| row[i].as_str());
                    match v.parse::<f64>() {
                        Ok(x) if v.contains('e') => format!("{x:.4}"),
                        _ => v.to_string(),
                    }
                })
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..columns.len())
        .map(|j| cells.iter().map(|r| r[j].len()).chain([columns[j].len()]).max().unwrap_or(0))
        .collect();
    let line = |vals: Vec<&str>| {
        vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(columns.to_vec()));
    for r in &cells {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
}

/// Plain-text tables for whatever result files `dir` holds. Reads only.
pub fn report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let mut found = false;
    let summary = dir.join("summary.csv");
    if summary.exists() {
        found = true;
        let _ = writeln!(out, "summary.csv");
        render(
            &Table::read(&summary)?,
            &["K", "retrieval_mode", "head", "trials", "accuracy_mean", "accuracy_std", "ce_risk_mean"],
            &mut out,
        );
    } else if dir.join("results.csv").exists() {
        found = true;
        let _ = writeln!(out, "results.csv");
        render(&Table::read(dir.join("results.csv"))?, &runner::RESULTS_HEADER, &mut out);
    }
    let theory = dir.join("theory_report.csv");
    if theory.exists() {
        found = true;
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "theory_report.csv");
        render(&Table::read(&theory)?, &["world", "name", "lhs", "rhs", "satisfied", "applicable"], &mut out);
    }
    if !found {
        return Err(crate::error::Error::BadResultFile {
            path: dir.to_path_buf(),
            msg: "no results.csv, summary.csv or theory_report.csv".into(),
        });
    }
    Ok(out)
}
