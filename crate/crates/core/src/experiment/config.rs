//! Experiment configuration: a sectioned TOML file with `[world]`,
//! `[experiment]`, `[finetune]` and `[verify]` tables. Every key has a
//! default, so an empty file is a valid configuration.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::theory::TheoryParams;
use crate::world::{max_separation, TauMode, WorldConfig};

/// A retrieval arm of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "T2I")]
    T2I,
    #[serde(rename = "I2I")]
    I2I,
    /// Items drawn directly from the class's own target cluster.
    #[serde(rename = "ORACLE")]
    Oracle,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::T2I => "T2I",
            Arm::I2I => "I2I",
            Arm::Oracle => "ORACLE",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A classifier head of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArmHead {
    #[serde(rename = "ZOC")]
    Zoc,
    #[serde(rename = "RET")]
    Ret,
    #[serde(rename = "EN")]
    En,
    /// EN with a fine-tuned cache.
    #[serde(rename = "EN_F")]
    EnF,
}

impl ArmHead {
    pub fn as_str(self) -> &'static str {
        match self {
            ArmHead::Zoc => "ZOC",
            ArmHead::Ret => "RET",
            ArmHead::En => "EN",
            ArmHead::EnF => "EN_F",
        }
    }
}

impl fmt::Display for ArmHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub classes: usize,
    pub dim: usize,
    pub kappa: f64,
    pub rho_c: f64,
    pub nu: f64,
    /// `mirror`, `perturbed` or `adversarial`.
    pub tau_mode: String,
    pub tau_scale: f64,
    pub adversarial_tilt: f64,
    pub adversarial_fraction: f64,
    pub clusters_per_class: usize,
    pub db_per_cluster: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            classes: w.classes,
            dim: w.dim,
            kappa: w.kappa,
            rho_c: w.rho_c,
            nu: w.nu,
            tau_mode: "mirror".into(),
            tau_scale: 0.2,
            adversarial_tilt: 0.5,
            adversarial_fraction: 1.0,
            clusters_per_class: w.clusters_per_class,
            db_per_cluster: w.db_per_cluster,
        }
    }
}

impl WorldSection {
    pub fn tau_mode(&self) -> Result<TauMode> {
        match self.tau_mode.as_str() {
            "mirror" => Ok(TauMode::Mirror),
            "perturbed" => Ok(TauMode::Perturbed { scale: self.tau_scale }),
            "adversarial" => {
                Ok(TauMode::Adversarial { tilt: self.adversarial_tilt, fraction: self.adversarial_fraction })
            }
            other => Err(Error::InvalidParameter(format!(
                "unknown tau_mode {other:?} (expected mirror, perturbed or adversarial)"
            ))),
        }
    }

    pub fn world_config(&self, master_seed: u64) -> Result<WorldConfig> {
        Ok(WorldConfig {
            classes: self.classes,
            dim: self.dim,
            kappa: self.kappa,
            rho_c: self.rho_c,
            nu: self.nu,
            tau_mode: self.tau_mode()?,
            clusters_per_class: self.clusters_per_class,
            db_per_cluster: self.db_per_cluster,
            master_seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub master_seed: u64,
    pub trials: usize,
    /// Retrieved items per class.
    pub shots: Vec<usize>,
    /// Seed images per class for I2I retrieval.
    pub seeds_per_class: usize,
    pub heads: Vec<ArmHead>,
    pub modes: Vec<Arm>,
    /// `γ:α` ratios searched for the EN heads.
    pub ratios: Vec<f64>,
    /// Sharpness values searched for the RET and EN heads.
    pub omegas: Vec<f64>,
    pub test_size: usize,
    pub validation_size: usize,
    /// Also write `grid.csv` with test metrics for every weight point.
    pub emit_grid: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            master_seed: 0,
            trials: 3,
            shots: vec![1, 2, 4, 8, 16],
            seeds_per_class: 1,
            heads: vec![ArmHead::Zoc, ArmHead::Ret, ArmHead::En, ArmHead::EnF],
            modes: vec![Arm::T2I, Arm::I2I, Arm::Oracle],
            ratios: vec![0.1, 0.5, 1.0, 2.0, 5.0, 7.5, 10.0, 15.0, 20.0, 50.0],
            omegas: vec![1.0, 2.0, 5.0, 10.0],
            test_size: 2000,
            validation_size: 500,
            emit_grid: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub renormalize: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self { lr: f.lr, epochs: f.epochs, weight_decay: f.weight_decay, renormalize: f.renormalize }
    }
}

impl FinetuneSection {
    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            renormalize: self.renormalize,
            ..FinetuneConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Number of worlds in the sweep.
    pub worlds: usize,
    /// Target samples per world.
    pub samples: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub delta: f64,
    pub theorem_shots: Vec<usize>,
    pub theorem_trials: usize,
    pub ensemble_shots: usize,
    pub bernstein_shots: usize,
    pub bernstein_delta: f64,
    pub bernstein_trials: usize,
    pub lipschitz_classes: Vec<usize>,
    pub lipschitz_points: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        let t = TheoryParams::default();
        Self {
            worlds: 2,
            samples: 1000,
            alpha: t.alpha,
            gamma: t.gamma,
            delta: t.delta,
            theorem_shots: t.theorem_shots,
            theorem_trials: t.theorem_trials,
            ensemble_shots: t.ensemble_shots,
            bernstein_shots: t.bernstein_shots,
            bernstein_delta: t.bernstein_delta,
            bernstein_trials: t.bernstein_trials,
            lipschitz_classes: vec![2, 10, 100],
            lipschitz_points: 100_000,
        }
    }
}

impl VerifySection {
    pub fn theory_params(&self, seed: u64) -> TheoryParams {
        TheoryParams {
            alpha: self.alpha,
            gamma: self.gamma,
            delta: self.delta,
            theorem_shots: self.theorem_shots.clone(),
            theorem_trials: self.theorem_trials,
            ensemble_shots: self.ensemble_shots,
            bernstein_shots: self.bernstein_shots,
            bernstein_delta: self.bernstein_delta,
            bernstein_trials: self.bernstein_trials,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSection,
    pub experiment: ExperimentSection,
    pub finetune: FinetuneSection,
    pub verify: VerifySection,
}

/// Line of the byte offset `pos` (1-based).
fn line_at(src: &str, pos: usize) -> usize {
    src[..pos.min(src.len())].matches('\n').count() + 1
}

/// Line where `key` is assigned inside `[section]`, if it is.
fn key_line(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (n, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(n + 1);
                }
            }
        }
    }
    None
}

fn invalid(src: &str, section: &str, key: &str, msg: impl fmt::Display) -> Error {
    match key_line(src, section, key) {
        Some(line) => Error::ConfigInvalid(format!("line {line}: [{section}] {key}: {msg}")),
        None => Error::ConfigInvalid(format!("line 0 (default value): [{section}] {key}: {msg}")),
    }
}

impl ExperimentConfig {
    /// Parses and validates configuration text.
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let span: Option<Range<usize>> = e.span();
            let line = span.map(|s| line_at(src, s.start)).unwrap_or(0);
            Error::ConfigInvalid(format!("line {line}: {}", e.message().trim()))
        })?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src).map_err(|e| match e {
            Error::ConfigInvalid(m) => Error::ConfigInvalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every value; `src` is used to point at the offending line.
    pub fn validate(&self, src: &str) -> Result<()> {
        let w = &self.world;
        let bad = |section: &str, key: &str, msg: String| Err(invalid(src, section, key, msg));
        if w.classes < 2 {
            return bad("world", "classes", format!("need at least 2 classes, got {}", w.classes));
        }
        if w.dim < 2 {
            return bad("world", "dim", format!("dimension must be at least 2, got {}", w.dim));
        }
        if w.classes > w.dim + 1 {
            return bad("world", "classes", format!("{} classes do not fit in dimension {}", w.classes, w.dim));
        }
        if !(w.kappa >= 0.0 && 4.0 * w.kappa < 2.0) {
            return bad("world", "kappa", format!("{} must satisfy 0 <= 4 kappa < 2", w.kappa));
        }
        if !(0.0..1.0).contains(&w.rho_c) {
            return bad("world", "rho_c", format!("{} outside [0, 1)", w.rho_c));
        }
        let max = max_separation(w.classes);
        if !(w.nu > 0.0 && w.nu <= 2.0 && w.nu <= max + 1e-12) {
            return bad("world", "nu", format!("{} outside (0, {}]", w.nu, max.min(2.0)));
        }
        if let Err(e) = w.tau_mode() {
            return bad("world", "tau_mode", e.to_string());
        }
        if !(w.tau_scale >= 0.0 && w.tau_scale.is_finite()) {
            return bad("world", "tau_scale", format!("{} must be finite and non-negative", w.tau_scale));
        }
        if !(0.0..=1.0).contains(&w.adversarial_tilt) {
            return bad("world", "adversarial_tilt", format!("{} outside [0, 1]", w.adversarial_tilt));
        }
        if !(w.adversarial_fraction > 0.0 && w.adversarial_fraction <= 1.0) {
            return bad("world", "adversarial_fraction", format!("{} outside (0, 1]", w.adversarial_fraction));
        }
        if w.clusters_per_class == 0 {
            return bad("world", "clusters_per_class", "must be positive".into());
        }
        if w.db_per_cluster == 0 {
            return bad("world", "db_per_cluster", "must be positive".into());
        }

        let x = &self.experiment;
        if x.trials == 0 {
            return bad("experiment", "trials", "must be positive".into());
        }
        if x.shots.is_empty() {
            return bad("experiment", "shots", "must list at least one value".into());
        }
        if let Some(k) = x.shots.iter().find(|&&k| k == 0 || k > w.db_per_cluster) {
            return bad("experiment", "shots", format!("{k} outside [1, db_per_cluster = {}]", w.db_per_cluster));
        }
        if x.seeds_per_class == 0 {
            return bad("experiment", "seeds_per_class", "must be positive".into());
        }
        if x.heads.is_empty() {
            return bad("experiment", "heads", "must list at least one head".into());
        }
        if x.modes.is_empty() {
            return bad("experiment", "modes", "must list at least one mode".into());
        }
        if x.ratios.is_empty() || x.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("experiment", "ratios", "must be a nonempty list of finite non-negative values".into());
        }
        if x.omegas.is_empty() || x.omegas.iter().any(|o| !(o.is_finite() && *o > 0.0)) {
            return bad("experiment", "omegas", "must be a nonempty list of finite positive values".into());
        }
        if x.test_size == 0 {
            return bad("experiment", "test_size", "must be positive".into());
        }
        if x.validation_size == 0 {
            return bad("experiment", "validation_size", "must be positive".into());
        }

        let f = &self.finetune;
        if !(f.lr >= 0.0 && f.lr.is_finite()) {
            return bad("finetune", "lr", format!("{} must be finite and non-negative", f.lr));
        }
        if !(f.weight_decay >= 0.0 && f.weight_decay.is_finite()) {
            return bad("finetune", "weight_decay", format!("{} must be finite and non-negative", f.weight_decay));
        }

        let v = &self.verify;
        for (key, n) in [
            ("worlds", v.worlds),
            ("samples", v.samples),
            ("theorem_trials", v.theorem_trials),
            ("bernstein_trials", v.bernstein_trials),
            ("lipschitz_points", v.lipschitz_points),
        ] {
            if n == 0 {
                return bad("verify", key, "must be positive".into());
            }
        }
        for (key, p) in [("alpha", v.alpha), ("gamma", v.gamma)] {
            if !(0.0..=1.0).contains(&p) {
                return bad("verify", key, format!("{p} outside [0, 1]"));
            }
        }
        if v.alpha + v.gamma > 1.0 + 1e-12 {
            return bad("verify", "gamma", format!("alpha + gamma = {} exceeds 1", v.alpha + v.gamma));
        }
        for (key, d) in [("delta", v.delta), ("bernstein_delta", v.bernstein_delta)] {
            if !(d > 0.0 && d < 1.0) {
                return bad("verify", key, format!("{d} outside (0, 1)"));
            }
        }
        if v.theorem_shots.is_empty() || v.theorem_shots.contains(&0) {
            return bad("verify", "theorem_shots", "must be a nonempty list of positive values".into());
        }
        for (key, k) in [("ensemble_shots", v.ensemble_shots), ("bernstein_shots", v.bernstein_shots)] {
            if k == 0 {
                return bad("verify", key, "must be positive".into());
            }
        }
        if v.ensemble_shots > w.db_per_cluster {
            return bad("verify", "ensemble_shots", format!("exceeds db_per_cluster = {}", w.db_per_cluster));
        }
        if v.lipschitz_classes.is_empty() || v.lipschitz_classes.iter().any(|&c| c < 2) {
            return bad("verify", "lipschitz_classes", "must list class counts of at least 2".into());
        }
        Ok(())
    }

    /// Canonical TOML rendering, used in manifests.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message(src: &str) -> String {
        match ExperimentConfig::parse(src) {
            Err(Error::ConfigInvalid(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = ExperimentConfig::parse(
            "[world]\nclasses = 4\ntau_mode = \"adversarial\"\n\n[experiment]\nshots = [1, 8]\nmodes = [\"I2I\", \"ORACLE\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.world.classes, 4);
        assert_eq!(cfg.world.tau_mode().unwrap(), TauMode::Adversarial { tilt: 0.5, fraction: 1.0 });
        assert_eq!(cfg.experiment.shots, vec![1, 8]);
        assert_eq!(cfg.experiment.modes, vec![Arm::I2I, Arm::Oracle]);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let m = message("[world]\nclasses = 4\ndim = = 3\n");
        assert!(m.starts_with("line 3:"), "{m}");
        let m = message("[world]\n\nclases = 4\n");
        assert!(m.starts_with("line 3:"), "{m}");
        let m = message("[experiment]\nheads = [\"ZOC\", \"XYZ\"]\n");
        assert!(m.starts_with("line 2:"), "{m}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let m = message("[world]\nclasses = 3\n\n[experiment]\n# comment\nshots = [1, 64]\n");
        assert!(m.starts_with("line 6: [experiment] shots"), "{m}");
        let m = message("[world]\nkappa = 0.7\n");
        assert!(m.starts_with("line 2: [world] kappa"), "{m}");
        let m = message("[world]\nclasses = 3\nnu = 1.9\n");
        assert!(m.starts_with("line 3:"), "{m}");
    }

    #[test]
    fn rendering_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
