//! The experiment grid: trials × K × retrieval arm × head, with weights tuned
//! on a validation split and scored on a fresh test split.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::adaptation::{
    cross_entropy, predict, ret_logits_from_similarities, EnsembleWeights, LabeledSample,
};
use crate::embedding::{dot, pairwise_sum, ClassId, UnitVector};
use crate::error::Result;
use crate::finetune::{finetune_cache, EnsembleObjective};
use crate::retrieval::{build_cache, oracle_cache, Cache, QuerySet};
use crate::rng::SeedTree;
use crate::world::{make_world, sample_target_set, ClassPointSampler, World};

use super::config::{Arm, ArmHead, ExperimentConfig};
use super::output::{fmt_f64, Table};

pub const RESULTS_HEADER: [&str; 9] = ["trial", "K", "retrieval_mode", "head", "alpha", "gamma", "omega", "accuracy", "ce_risk"];
pub const SUMMARY_HEADER: [&str; 8] =
    ["K", "retrieval_mode", "head", "trials", "accuracy_mean", "accuracy_std", "ce_risk_mean", "ce_risk_std"];

/// Test metrics of one head at one weight point.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub trial: usize,
    pub shots: usize,
    pub mode: Arm,
    pub head: ArmHead,
    pub alpha: f64,
    pub gamma: f64,
    pub omega: f64,
    pub accuracy: f64,
    pub ce_risk: f64,
}

impl ResultRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.trial.to_string(),
            self.shots.to_string(),
            self.mode.to_string(),
            self.head.to_string(),
            fmt_f64(self.alpha),
            fmt_f64(self.gamma),
            fmt_f64(self.omega),
            fmt_f64(self.accuracy),
            fmt_f64(self.ce_risk),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub shots: usize,
    pub mode: Arm,
    pub head: ArmHead,
    pub trials: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ce_risk_mean: f64,
    pub ce_risk_std: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// One row per trial, K, arm and head at the validation-tuned weights.
    pub rows: Vec<ResultRow>,
    /// Test metrics at every grid point (filled when `emit_grid` is set).
    pub grid: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl RunOutput {
    pub fn results_table(&self) -> Table {
        rows_table(&self.rows)
    }

    pub fn grid_table(&self) -> Table {
        rows_table(&self.grid)
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&SUMMARY_HEADER);
        for s in &self.summary {
            t.push(vec![
                s.shots.to_string(),
                s.mode.to_string(),
                s.head.to_string(),
                s.trials.to_string(),
                fmt_f64(s.accuracy_mean),
                fmt_f64(s.accuracy_std),
                fmt_f64(s.ce_risk_mean),
                fmt_f64(s.ce_risk_std),
            ]);
        }
        t
    }

    /// Summary entry for one cell of the grid.
    pub fn summary_for(&self, shots: usize, mode: Arm, head: ArmHead) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.shots == shots && s.mode == mode && s.head == head)
    }
}

fn rows_table(rows: &[ResultRow]) -> Table {
    let mut t = Table::new(&RESULTS_HEADER);
    rows.iter().for_each(|r| t.push(r.fields()));
    t
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, (pairwise_sum(&sq) / (n - 1.0)).sqrt())
}

type Cell = (usize, Arm, ArmHead);

/// Per-(K, arm, head) mean ± std over trials, in configuration order.
pub fn summarize(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: HashMap<Cell, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for r in rows {
        let g = groups.entry((r.shots, r.mode, r.head)).or_default();
        g.0.push(r.accuracy);
        g.1.push(r.ce_risk);
    }
    let mut out = Vec::new();
    for &shots in &cfg.experiment.shots {
        for &mode in &cfg.experiment.modes {
            for &head in &cfg.experiment.heads {
                if let Some((acc, ce)) = groups.get(&(shots, mode, head)) {
                    let (accuracy_mean, accuracy_std) = mean_std(acc);
                    let (ce_risk_mean, ce_risk_std) = mean_std(ce);
                    out.push(SummaryRow {
                        shots,
                        mode,
                        head,
                        trials: acc.len(),
                        accuracy_mean,
                        accuracy_std,
                        ce_risk_mean,
                        ce_risk_std,
                    });
                }
            }
        }
    }
    out
}

/// Samples with their precomputed zero-shot scores.
struct Split {
    samples: Vec<LabeledSample>,
    zoc: Vec<Vec<f64>>,
}

impl Split {
    fn new(world: &World, samples: Vec<LabeledSample>) -> Self {
        let zoc = samples
            .par_iter()
            .map(|s| world.text().columns().iter().map(|t| dot(t, &s.z).clamp(-1.0, 1.0)).collect())
            .collect();
        Self { samples, zoc }
    }

    /// Raw similarities of every sample to every cache column.
    fn similarities(&self, cache: &Cache) -> Vec<Vec<f64>> {
        self.samples.par_iter().map(|s| cache.columns().iter().map(|c| dot(c, &s.z)).collect()).collect()
    }

    /// Accuracy and mean cross-entropy of `α·ZOC + γ·RET_ω`.
    fn score(&self, sims: &[Vec<f64>], cache: &Cache, alpha: f64, gamma: f64, omega: f64) -> (f64, f64) {
        let (c, k) = (cache.classes(), cache.shots());
        let per: Vec<(bool, f64)> = self
            .samples
            .par_iter()
            .zip(sims.par_iter().zip(self.zoc.par_iter()))
            .map(|(s, (sim, zoc))| {
                let v: Vec<f64> = if gamma == 0.0 {
                    zoc.iter().map(|z| alpha * z).collect()
                } else {
                    let ret = ret_logits_from_similarities(sim, c, k, omega);
                    zoc.iter().zip(&ret).map(|(z, r)| alpha * z + gamma * r).collect()
                };
                (predict(&v) == s.y, cross_entropy(&v, s.y))
            })
            .collect();
        metrics(&per)
    }
}

fn metrics(per: &[(bool, f64)]) -> (f64, f64) {
    let n = per.len() as f64;
    let correct = per.iter().filter(|p| p.0).count() as f64;
    let losses: Vec<f64> = per.iter().map(|p| p.1).collect();
    (correct / n, pairwise_sum(&losses) / n)
}

/// Grid point that maximizes validation accuracy; ties go to the lower
/// validation risk, then to the earlier point.
fn select(points: &[(f64, f64, f64)], val: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for i in 1..points.len() {
        let (a, b) = (val[i], val[best]);
        if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
            best = i;
        }
    }
    best
}

/// Image seeds per class for I2I retrieval: the world's one-shot image plus
/// `seeds_per_class − 1` clean draws from the class cap.
pub fn i2i_seeds(world: &World, seeds_per_class: usize, tree: &SeedTree) -> Result<Vec<Vec<UnitVector>>> {
    let sampler = ClassPointSampler::new(world.dim(), world.kappa(), 0.0)?;
    Ok((0..world.classes())
        .map(|c| {
            let class = ClassId::from_index(c);
            let mut rng = tree.stream("i2i_seeds", &[c as u64]);
            let mut seeds = vec![world.one_shot().column(class).clone()];
            seeds.extend((1..seeds_per_class).map(|_| sampler.sample(world.prototypes().column(class), &mut rng)));
            seeds
        })
        .collect())
}

struct Trial<'a> {
    cfg: &'a ExperimentConfig,
    index: usize,
    world: World,
    val: Split,
    test: Split,
    seeds: Vec<Vec<UnitVector>>,
    tree: SeedTree,
}

impl Trial<'_> {
    fn cache(&self, mode: Arm, shots: usize) -> Result<Cache> {
        let db = self.world.database();
        match mode {
            Arm::T2I => build_cache(db, &QuerySet::text(self.world.text()), shots, 1.0),
            Arm::I2I => build_cache(db, &QuerySet::images(self.seeds.clone())?, shots, 1.0),
            Arm::Oracle => {
                let queries: Vec<&UnitVector> = self.world.prototypes().columns().iter().collect();
                let mut rng = self.tree.stream("oracle", &[shots as u64]);
                oracle_cache(&self.world, &queries, shots, 1.0, &mut rng)
            }
        }
    }

    fn row(&self, shots: usize, mode: Arm, head: ArmHead, w: (f64, f64, f64), m: (f64, f64)) -> ResultRow {
        ResultRow {
            trial: self.index,
            shots,
            mode,
            head,
            alpha: w.0,
            gamma: w.1,
            omega: w.2,
            accuracy: m.0,
            ce_risk: m.1,
        }
    }

    /// Tuned rows and grid rows for one (arm, K) cell.
    fn cell(&self, mode: Arm, shots: usize) -> Result<(Vec<ResultRow>, Vec<ResultRow>)> {
        let x = &self.cfg.experiment;
        let cache = self.cache(mode, shots)?;
        let (val_sims, test_sims) = (self.val.similarities(&cache), self.test.similarities(&cache));
        let (mut rows, mut grid) = (Vec::new(), Vec::new());

        let ret_points: Vec<(f64, f64, f64)> = x.omegas.iter().map(|&o| (0.0, 1.0, o)).collect();
        let mut en_points = Vec::new();
        for &r in &x.ratios {
            let w = EnsembleWeights::from_ratio(r)?;
            en_points.extend(x.omegas.iter().map(|&o| (w.alpha, w.gamma, o)));
        }
        let tune = |points: &[(f64, f64, f64)]| -> usize {
            let val: Vec<(f64, f64)> =
                points.iter().map(|&(a, g, o)| self.val.score(&val_sims, &cache, a, g, o)).collect();
            select(points, &val)
        };
        let tuned_en = tune(&en_points);

        for &head in &x.heads {
            match head {
                ArmHead::Zoc => {
                    let w = (1.0, 0.0, 0.0);
                    rows.push(self.row(shots, mode, head, w, self.test.score(&test_sims, &cache, 1.0, 0.0, 1.0)));
                }
                ArmHead::Ret | ArmHead::En => {
                    let (points, best) =
                        if head == ArmHead::Ret { (&ret_points, tune(&ret_points)) } else { (&en_points, tuned_en) };
                    for (i, &(a, g, o)) in points.iter().enumerate() {
                        if i == best || x.emit_grid {
                            let r = self.row(shots, mode, head, (a, g, o), self.test.score(&test_sims, &cache, a, g, o));
                            if x.emit_grid {
                                grid.push(r.clone());
                            }
                            if i == best {
                                rows.push(r);
                            }
                        }
                    }
                }
                ArmHead::EnF => {
                    let (a, g, o) = en_points[tuned_en];
                    let start = cache.clone().with_omega(o)?;
                    let train: Vec<LabeledSample> = start
                        .columns()
                        .iter()
                        .enumerate()
                        .map(|(j, col)| LabeledSample::new(UnitVector::new_unchecked(col.clone()), start.column_class(j)))
                        .collect();
                    let obj = EnsembleObjective { text: self.world.text(), alpha: a, gamma: g };
                    let tuned = finetune_cache(&start, &obj, &train, &self.cfg.finetune.finetune_config())?.cache;
                    let sims = self.test.similarities(&tuned);
                    rows.push(self.row(shots, mode, head, (a, g, o), self.test.score(&sims, &tuned, a, g, o)));
                }
            }
        }
        Ok((rows, grid))
    }
}

fn run_trial(cfg: &ExperimentConfig, index: usize) -> Result<(Vec<ResultRow>, Vec<ResultRow>)> {
    let x = &cfg.experiment;
    let tree = SeedTree::new(x.master_seed).child("trial", &[index as u64]);
    let world = make_world(&cfg.world.world_config(tree.child("world", &[]).master())?)?;
    let val = Split::new(&world, sample_target_set(&world, x.validation_size, tree.child("validation", &[]).master())?);
    let test = Split::new(&world, sample_target_set(&world, x.test_size, tree.child("test", &[]).master())?);
    let seeds = i2i_seeds(&world, x.seeds_per_class, &tree)?;
    let trial = Trial { cfg, index, world, val, test, seeds, tree };

    let cells: Vec<(Arm, usize)> = x.modes.iter().flat_map(|&m| x.shots.iter().map(move |&k| (m, k))).collect();
    let parts = cells.par_iter().map(|&(m, k)| trial.cell(m, k)).collect::<Result<Vec<_>>>()?;
    let (mut rows, mut grid) = (Vec::new(), Vec::new());
    for (r, g) in parts {
        rows.extend(r);
        grid.extend(g);
    }
    Ok((rows, grid))
}

/// Runs every trial. Output depends only on the configuration, not on the
/// number of worker threads.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let parts =
        (0..cfg.experiment.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect::<Result<Vec<_>>>()?;
    let mut out = RunOutput::default();
    for (r, g) in parts {
        out.rows.extend(r);
        out.grid.extend(g);
    }
    out.summary = summarize(cfg, &out.rows);
    Ok(out)
}
