//! Drives every theory check over a sweep of generated worlds.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::Result;
use crate::rng::SeedTree;
use crate::theory::{check_lipschitz, theory_report, BoundCheck, TheoryReport};
use crate::world::{make_world, sample_target_set};

use super::config::ExperimentConfig;
use super::output::{fmt_f64, Table};

pub const THEORY_HEADER: [&str; 7] = ["world", "name", "lhs", "rhs", "satisfied", "applicable", "params"];

#[derive(Clone, Debug)]
pub struct VerifyOutput {
    pub reports: Vec<TheoryReport>,
    /// World-independent checks.
    pub global: Vec<BoundCheck>,
}

impl VerifyOutput {
    fn all_checks(&self) -> impl Iterator<Item = (String, &BoundCheck)> {
        let per_world = self.reports.iter().enumerate().flat_map(|(w, r)| r.checks.iter().map(move |c| (w.to_string(), c)));
        per_world.chain(self.global.iter().map(|c| ("-".to_string(), c)))
    }

    /// Every applicable check is satisfied.
    pub fn passed(&self) -> bool {
        self.all_checks().all(|(_, c)| c.passed())
    }

    pub fn failures(&self) -> Vec<(String, &BoundCheck)> {
        self.all_checks().filter(|(_, c)| !c.passed()).collect()
    }

    pub fn not_applicable(&self) -> Vec<(String, &BoundCheck)> {
        self.all_checks().filter(|(_, c)| !c.applicable).collect()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&THEORY_HEADER);
        for (w, c) in self.all_checks() {
            let params: Vec<String> = c.context.iter().map(|(k, v)| format!("{k}={}", fmt_f64(*v))).collect();
            t.push(vec![
                w,
                c.name.clone(),
                fmt_f64(c.lhs),
                fmt_f64(c.rhs),
                c.satisfied.to_string(),
                c.applicable.to_string(),
                params.join(";"),
            ]);
        }
        t
    }

    /// Human-readable per-world digest of the measured geometry.
    pub fn text(&self) -> String {
        let mut s = String::new();
        for (w, r) in self.reports.iter().enumerate() {
            let st = &r.stats;
            let p = r.events.probabilities();
            let _ = writeln!(s, "world {w}");
            let _ = writeln!(
                s,
                "  nu = {:.6}  tau = {:.6}  kappa = {:.6}  rho_c_hat = {:.6}  outliers = {:.6}",
                st.nu, st.tau, st.kappa, st.rho_c_hat, st.outlier_fraction
            );
            let _ = writeln!(s, "  xi_I2I = {:.6}  xi_T2I = {:.6}", r.xi_i2i.xi_max, r.xi_t2i.xi_max);
            let _ = writeln!(
                s,
                "  Pr(E1..E4) = {:.6} {:.6} {:.6} {:.6}  z* = {:.6}  rho_d(z*) = {}",
                p[0],
                p[1],
                p[2],
                p[3],
                r.z_star,
                r.events.rho_d_at(r.z_star).map_or("n/a".into(), |v| format!("{v:.6}"))
            );
            for c in &r.checks {
                let _ = writeln!(s, "  {}", check_line(c));
            }
        }
        let _ = writeln!(s, "global");
        for c in &self.global {
            let _ = writeln!(s, "  {}", check_line(c));
        }
        let _ = writeln!(s, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

fn check_line(c: &BoundCheck) -> String {
    let status = match (c.applicable, c.satisfied) {
        (false, _) => "n/a ",
        (true, true) => "ok  ",
        (true, false) => "FAIL",
    };
    format!("{status} {:<28} lhs = {:<12.6e} rhs = {:.6e}", c.name, c.lhs, c.rhs)
}

/// Runs the theory checks on `verify.worlds` worlds built from the `[world]`
/// section, plus the world-independent Lipschitz checks.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyOutput> {
    let v = &cfg.verify;
    let tree = SeedTree::new(cfg.experiment.master_seed).child("verify", &[]);
    let reports = (0..v.worlds)
        .into_par_iter()
        .map(|w| {
            let wt = tree.child("world", &[w as u64]);
            let world = make_world(&cfg.world.world_config(wt.child("geometry", &[]).master())?)?;
            let samples = sample_target_set(&world, v.samples, wt.child("samples", &[]).master())?;
            theory_report(&world, &samples, &v.theory_params(wt.child("checks", &[]).master()))
        })
        .collect::<Result<Vec<_>>>()?;
    let global = check_lipschitz(&v.lipschitz_classes, v.lipschitz_points, tree.child("lipschitz", &[]).master())?;
    Ok(VerifyOutput { reports, global })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.classes = 4;
        cfg.world.dim = 8;
        cfg.world.db_per_cluster = 16;
        cfg.verify.worlds = 2;
        cfg.verify.samples = 300;
        cfg.verify.theorem_shots = vec![1, 4];
        cfg.verify.theorem_trials = 40;
        cfg.verify.bernstein_trials = 200;
        cfg.verify.lipschitz_points = 2000;
        cfg
    }

    #[test]
    fn table_lists_every_check_once() {
        let out = run_verify(&small()).unwrap();
        let t = out.table();
        let per_world = out.reports[0].checks.len();
        assert_eq!(t.rows.len(), 2 * per_world + out.global.len());
        assert!(t.rows.iter().all(|r| !r[6].contains(',')));
        assert!(out.text().contains("overall:"));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cfg = small();
        let run = |n| {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| run_verify(&cfg).unwrap())
        };
        assert_eq!(run(1).table().to_csv(), run(3).table().to_csv());
    }
}
