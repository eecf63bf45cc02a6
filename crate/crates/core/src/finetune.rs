//! Cache fine-tuning: cache columns become free parameters of the EN head
//! and are trained with full-batch AdamW under a cosine learning-rate decay.

use crate::adaptation::{cross_entropy, cross_entropy_grad, exp_scale, LabeledSample};
use crate::embedding::{dot, norm, pairwise_sum};
use crate::error::{Error, Result};
use crate::retrieval::{Cache, ClassAverages};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Project columns back to the unit sphere after every step.
    pub renormalize: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 20, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8, renormalize: false }
    }
}

/// The fixed part of the EN head being trained through.
#[derive(Clone, Copy, Debug)]
pub struct EnsembleObjective<'a> {
    pub text: &'a ClassAverages,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub cache: Cache,
    /// Train risk before the first step and after each step.
    pub risk_history: Vec<f64>,
}

impl FinetuneOutcome {
    pub fn initial_risk(&self) -> f64 {
        self.risk_history[0]
    }

    pub fn final_risk(&self) -> f64 {
        *self.risk_history.last().expect("history holds the initial risk")
    }
}

fn en_scores(cache: &Cache, obj: &EnsembleObjective<'_>, z: &[f64], sims: &mut Vec<f64>) -> Vec<f64> {
    let k = cache.shots();
    sims.clear();
    sims.extend(cache.columns().iter().map(|c| dot(c, z)));
    (0..cache.classes())
        .map(|c| {
            let ret = sims[c * k..(c + 1) * k]
                .iter()
                .fold(0.0, |acc, &s| acc + exp_scale(s.clamp(-1.0, 1.0), cache.omega()))
                / k as f64;
            obj.alpha * dot(&obj.text.columns()[c], z) + obj.gamma * ret
        })
        .collect()
}

/// Mean train cross-entropy of the EN head over `cache`.
pub fn en_train_risk(cache: &Cache, obj: &EnsembleObjective<'_>, train: &[LabeledSample]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let mut sims = Vec::new();
    let losses: Vec<f64> = train.iter().map(|s| cross_entropy(&en_scores(cache, obj, &s.z, &mut sims), s.y)).collect();
    Ok(pairwise_sum(&losses) / train.len() as f64)
}

/// Train risk and its analytic gradient with respect to every cache column.
///
/// `∂/∂k_{c,i} = mean_n g_{n,c} · (γ/K) · ω · exp(ω(s − 1)) · z_n`, where `g`
/// is the cross-entropy gradient in the logits and `s = k_{c,i}ᵀz_n`; the
/// term vanishes where the similarity clamp is active.
pub fn en_risk_and_grad(
    cache: &Cache,
    obj: &EnsembleObjective<'_>,
    train: &[LabeledSample],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if train.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let (k, omega) = (cache.shots(), cache.omega());
    let scale = obj.gamma * omega / (k as f64 * train.len() as f64);
    let mut grad = vec![vec![0.0; cache.dim()]; cache.columns().len()];
    let mut losses = Vec::with_capacity(train.len());
    let mut sims = Vec::new();
    for s in train {
        let v = en_scores(cache, obj, &s.z, &mut sims);
        losses.push(cross_entropy(&v, s.y));
        let g = cross_entropy_grad(&v, s.y);
        for (j, (&sim, gcol)) in sims.iter().zip(grad.iter_mut()).enumerate() {
            if !(-1.0..=1.0).contains(&sim) {
                continue;
            }
            let coef = g[j / k] * scale * exp_scale(sim, omega);
            gcol.iter_mut().zip(s.z.iter()).for_each(|(a, zi)| *a += coef * zi);
        }
    }
    Ok((pairwise_sum(&losses) / train.len() as f64, grad))
}

/// Fine-tunes the cache columns of the EN head with AdamW.
///
/// Step `t` (1-based) uses `lr · (1 + cos(π (t − 1) / epochs)) / 2`. Without
/// `renormalize` the returned cache holds raw parameters and is flagged as not
/// normalized.
pub fn finetune_cache(
    cache: &Cache,
    obj: &EnsembleObjective<'_>,
    train: &[LabeledSample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if obj.text.classes() != cache.classes() || obj.text.dim() != cache.dim() {
        return Err(Error::ShapeMismatch("text matrix does not match cache".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate {}", cfg.lr)));
    }
    let mut cache = cache.clone();
    let n_cols = cache.columns().len();
    let dim = cache.dim();
    let mut m = vec![vec![0.0; dim]; n_cols];
    let mut v = vec![vec![0.0; dim]; n_cols];
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    history.push(en_train_risk(&cache, obj, train)?);

    for step in 1..=cfg.epochs {
        let (_, grad) = en_risk_and_grad(&cache, obj, train)?;
        if grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(step));
        }
        let lr_t = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / cfg.epochs as f64).cos());
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        for ((col, g), (mc, vc)) in cache.columns_mut().iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut())) {
            for i in 0..dim {
                mc[i] = cfg.beta1 * mc[i] + (1.0 - cfg.beta1) * g[i];
                vc[i] = cfg.beta2 * vc[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (mc[i] / bc1) / ((vc[i] / bc2).sqrt() + cfg.eps) + cfg.weight_decay * col[i];
                col[i] -= lr_t * update;
            }
        }
        if cfg.renormalize {
            for col in cache.columns_mut() {
                let n = norm(col);
                if n <= crate::embedding::ZERO_NORM_THRESHOLD {
                    return Err(Error::ZeroVector { norm: n });
                }
                col.iter_mut().for_each(|x| *x /= n);
            }
        } else if cfg.lr > 0.0 {
            cache.mark_raw();
        }
        history.push(en_train_risk(&cache, obj, train)?);
    }
    Ok(FinetuneOutcome { cache, risk_history: history })
}
