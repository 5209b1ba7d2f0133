//! Gradient-based adaptation against TACT pseudo-labels.
//!
//! Objective: `CE(p, y_tact) + λ · IM(p)` where `IM` is the information
//! maximization regularizer (mean per-sample entropy plus the negative entropy
//! of the batch-mean prediction).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logits, softmax, Model, UpdateScope};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps_per_batch: usize,
    #[serde(default)]
    pub update_scope: UpdateScope,
}

fn default_steps() -> usize {
    1
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("adapt.lambda", "must be non-negative"));
        }
        // Zero is accepted so that a no-op step can be expressed.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("adapt.learning_rate", "must be non-negative"));
        }
        if self.steps_per_batch == 0 {
            return Err(Error::config("adapt.steps_per_batch", "must be at least 1"));
        }
        Ok(())
    }
}

fn ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

fn check_rows(probs: &[Vec<f64>]) -> Result<usize> {
    let c = probs.first().ok_or(Error::EmptyInput("im_loss needs at least one row"))?.len();
    for (i, p) in probs.iter().enumerate() {
        if p.len() != c {
            return Err(Error::InvalidInput(format!("row {i} has {} classes, expected {c}", p.len())));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("row {i} sums to {s}")));
        }
    }
    Ok(c)
}

fn batch_mean(probs: &[Vec<f64>], c: usize) -> Vec<f64> {
    let mut mean = vec![0.0; c];
    for p in probs {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    let n = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `mean_x H(p_x) − H(p̄)`; lies in `[−ln c, ln c]`.
pub fn im_loss(probs: &[Vec<f64>]) -> Result<f64> {
    let c = check_rows(probs)?;
    let n = probs.len() as f64;
    let entropy: f64 = probs
        .iter()
        .map(|p| -p.iter().map(|&x| x * ln(x)).sum::<f64>())
        .sum::<f64>()
        / n;
    let mean = batch_mean(probs, c);
    let diversity: f64 = mean.iter().map(|&x| x * ln(x)).sum();
    Ok(entropy + diversity)
}

/// Gradient of [`im_loss`] with respect to each row's logits.
pub fn im_logit_grads(probs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let c = check_rows(probs)?;
    let n = probs.len() as f64;
    let mean = batch_mean(probs, c);
    let log_mean: Vec<f64> = mean.iter().map(|&x| ln(x)).collect();
    Ok(probs
        .iter()
        .map(|p| {
            let logp: Vec<f64> = p.iter().map(|&x| ln(x)).collect();
            let neg_h: f64 = p.iter().zip(&logp).map(|(x, l)| x * l).sum();
            let cross: f64 = p.iter().zip(&log_mean).map(|(x, l)| x * l).sum();
            (0..c)
                .map(|j| {
                    let d_entropy = -p[j] * (logp[j] - neg_h);
                    let d_diversity = p[j] * (log_mean[j] - cross);
                    (d_entropy + d_diversity) / n
                })
                .collect()
        })
        .collect())
}

/// Value and parameter gradient of `CE(p, labels) + λ·IM(p)` over the batch.
pub fn objective(model: &Model, xs: &[Vec<f64>], labels: &[usize], lambda: f64) -> Result<(f64, crate::model::Gradients)> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("adaptation batch is empty"));
    }
    if xs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} observations but {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let n = xs.len() as f64;
    let mut probs = Vec::with_capacity(xs.len());
    for x in xs {
        let l = logits(&model.prototypes, &model.extract(x)?)?;
        probs.push(softmax(&l));
    }
    let mut ce = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(xs.len());
    for (p, &y) in probs.iter().zip(labels) {
        if y >= model.c() {
            return Err(Error::InvalidInput(format!("label {y} out of range for {} classes", model.c())));
        }
        ce -= ln(p[y]) / n;
        let mut g: Vec<f64> = p.iter().map(|pk| pk / n).collect();
        g[y] -= 1.0 / n;
        grads.push(g);
    }
    let mut loss = ce;
    if lambda != 0.0 {
        loss += lambda * im_loss(&probs)?;
        for (g, gi) in grads.iter_mut().zip(im_logit_grads(&probs)?) {
            for (a, b) in g.iter_mut().zip(gi) {
                *a += lambda * b;
            }
        }
    }
    let pg = model.backprop(xs, &grads)?;
    Ok((loss, pg))
}

/// `steps_per_batch` full-batch gradient steps on the adaptation objective.
pub fn adapt_step(model: &Model, xs: &[Vec<f64>], labels: &[usize], cfg: &AdaptConfig) -> Result<Model> {
    cfg.validate()?;
    let mut out = model.clone();
    for _ in 0..cfg.steps_per_batch {
        let (loss, g) = objective(&out, xs, labels, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(Error::AdaptDiverged);
        }
        out.apply(&g, cfg.learning_rate, cfg.update_scope);
        if out.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::AdaptDiverged);
        }
    }
    Ok(out)
}
