//! Synthetic structural causal model.
//!
//! Causal factors `X_C ~ N(0, I)` drive the label through a logistic (or, for
//! more than two classes, softmax) link with a temperature. Non-causal factors
//! are `X_NC = ρ · s(Y) · μ + σ · ε`, so their correlation with the label is
//! controlled per domain by ρ. Observations are a linear mixing
//! `X = M · [X_C; X_NC]`.
//!
//! Classes are 0-based. The class sign `s(y)` is `cos(2πy / c)`, which is +1
//! for class 0 and −1 for class 1 in the binary case.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, Matrix};
use crate::rng::Prng;

const MIXING_STREAM: u64 = 0x6d69_7869_6e67;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub d_c: usize,
    pub d_nc: usize,
    pub d_obs: usize,
    pub w_c: Vec<f64>,
    pub temperature: f64,
    pub rho_train: f64,
    pub rho_test: f64,
    pub mu_nc: Vec<f64>,
    pub noise_nc: f64,
    /// `d_obs × (d_c + d_nc)`. Generated from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<Matrix>,
    pub seed: u64,
    /// ρ used by the augmentation distribution.
    #[serde(default)]
    pub aug_rho: f64,
    /// One weight row per class (`c × d_c`) for the multi-class extension.
    /// When absent the model is binary and driven by `w_c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Matrix>,
}

impl ScmConfig {
    /// The benchmark configuration used throughout the test suite.
    pub fn reference() -> Self {
        ScmConfig {
            d_c: 4,
            d_nc: 4,
            d_obs: 16,
            w_c: vec![1.0, 1.0, 1.0, 1.0],
            temperature: 0.25,
            rho_train: 0.95,
            rho_test: -0.95,
            mu_nc: vec![0.5, 0.5, 0.5, 0.5],
            noise_nc: 0.3,
            mixing: None,
            seed: 42,
            aug_rho: 0.0,
            class_weights: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.as_ref().map_or(2, |w| w.rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub group: usize,
    #[serde(rename = "xc", default, skip_serializing_if = "Option::is_none")]
    pub hidden_xc: Option<Vec<f64>>,
    #[serde(rename = "xnc", default, skip_serializing_if = "Option::is_none")]
    pub hidden_xnc: Option<Vec<f64>>,
}

impl LabeledSample {
    /// The only view of a sample that adaptation code receives.
    pub fn observation(&self) -> Observation {
        Observation {
            x: self.x.clone(),
            group: self.group,
        }
    }

    pub fn without_hidden(mut self) -> Self {
        self.hidden_xc = None;
        self.hidden_xnc = None;
        self
    }
}

/// An unlabeled observation as seen at test time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSet {
    pub original: Vec<f64>,
    pub variants: Vec<Vec<f64>>,
}

/// A validated SCM with its mixing matrix and a left inverse resolved.
#[derive(Clone, Debug)]
pub struct Scm {
    cfg: ScmConfig,
    mixing: Matrix,
    left_inverse: Matrix,
    classes: usize,
}

impl Scm {
    pub fn new(cfg: &ScmConfig) -> Result<Self> {
        validate(cfg)?;
        let k = cfg.d_c + cfg.d_nc;
        let mixing = match &cfg.mixing {
            Some(m) => {
                m.validate()
                    .map_err(|e| Error::config("scm.mixing", e.to_string()))?;
                if m.rows != cfg.d_obs || m.cols != k {
                    return Err(Error::config(
                        "scm.mixing",
                        format!("expected {}x{k}, got {}x{}", cfg.d_obs, m.rows, m.cols),
                    ));
                }
                m.clone()
            }
            None => {
                if cfg.d_obs < k {
                    return Err(Error::config(
                        "scm.d_obs",
                        format!("a generated mixing needs d_obs >= d_c + d_nc = {k}"),
                    ));
                }
                let mut rng = Prng::stream(cfg.seed, MIXING_STREAM);
                linalg::random_orthonormal(&mut rng, cfg.d_obs, k)?
            }
        };
        let left_inverse = left_inverse(&mixing)?;
        Ok(Scm {
            classes: cfg.num_classes(),
            cfg: cfg.clone(),
            mixing,
            left_inverse,
        })
    }

    pub fn config(&self) -> &ScmConfig {
        &self.cfg
    }

    pub fn mixing(&self) -> &Matrix {
        &self.mixing
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_groups(&self) -> usize {
        2 * self.classes
    }

    pub fn class_sign(&self, y: usize) -> f64 {
        if self.classes == 2 {
            if y == 0 {
                1.0
            } else {
                -1.0
            }
        } else {
            (std::f64::consts::TAU * y as f64 / self.classes as f64).cos()
        }
    }

    fn rho(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Train => self.cfg.rho_train,
            Domain::Test => self.cfg.rho_test,
        }
    }

    fn label_scores(&self, xc: &[f64]) -> Vec<f64> {
        match &self.cfg.class_weights {
            None => vec![dot(&self.cfg.w_c, xc)],
            Some(w) => (0..w.rows).map(|k| dot(w.row(k), xc)).collect(),
        }
    }

    fn draw_label(&self, xc: &[f64], rng: &mut Prng) -> usize {
        let scores = self.label_scores(xc);
        let u = rng.next_f64();
        let t = self.cfg.temperature;
        if self.cfg.class_weights.is_none() {
            let p0 = 1.0 / (1.0 + (-scores[0] / t).exp());
            return if u < p0 { 0 } else { 1 };
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / t).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w / total;
            if u < acc {
                return k;
            }
        }
        self.classes - 1
    }

    fn draw_noncausal(&self, rho: f64, y: usize, rng: &mut Prng) -> Vec<f64> {
        let s = self.class_sign(y);
        self.cfg
            .mu_nc
            .iter()
            .map(|m| rho * s * m + self.cfg.noise_nc * rng.normal())
            .collect()
    }

    fn mix(&self, xc: &[f64], xnc: &[f64]) -> Vec<f64> {
        let latent: Vec<f64> = xc.iter().chain(xnc).copied().collect();
        self.mixing.mul_vec(&latent).expect("latent has d_c + d_nc entries")
    }

    pub fn group_of(&self, y: usize, xnc: &[f64]) -> usize {
        let bucket = usize::from(dot(&self.cfg.mu_nc, xnc) < 0.0);
        2 * y + bucket
    }

    pub fn sample(&self, domain: Domain, rng: &mut Prng) -> LabeledSample {
        let xc = rng.normal_vec(self.cfg.d_c);
        let y = self.draw_label(&xc, rng);
        let xnc = self.draw_noncausal(self.rho(domain), y, rng);
        LabeledSample {
            x: self.mix(&xc, &xnc),
            y,
            group: self.group_of(y, &xnc),
            hidden_xc: Some(xc),
            hidden_xnc: Some(xnc),
        }
    }

    pub fn sample_batch(&self, domain: Domain, count: usize, rng: &mut Prng) -> Vec<LabeledSample> {
        (0..count).map(|_| self.sample(domain, rng)).collect()
    }

    /// `n` variants of `sample` that keep its causal factors (up to
    /// `causal_jitter`) and redraw the non-causal ones with ρ = `aug_rho`.
    pub fn augment(
        &self,
        sample: &LabeledSample,
        n: usize,
        causal_jitter: f64,
        rng: &mut Prng,
    ) -> Result<AugmentedSet> {
        let xc = sample.hidden_xc.as_ref().ok_or(Error::OracleUnavailable)?;
        let variants = (0..n)
            .map(|_| {
                let xc_v: Vec<f64> = if causal_jitter == 0.0 {
                    xc.clone()
                } else {
                    xc.iter().map(|v| v + causal_jitter * rng.normal()).collect()
                };
                let xnc_v = self.draw_noncausal(self.cfg.aug_rho, sample.y, rng);
                self.mix(&xc_v, &xnc_v)
            })
            .collect();
        Ok(AugmentedSet {
            original: sample.x.clone(),
            variants,
        })
    }

    /// Bayes rule on the causal factors; ties go to the lowest class.
    pub fn oracle_predict(&self, sample: &LabeledSample) -> Result<usize> {
        let xc = sample.hidden_xc.as_ref().ok_or(Error::OracleUnavailable)?;
        let scores = self.label_scores(xc);
        if self.cfg.class_weights.is_none() {
            return Ok(if scores[0] >= 0.0 { 0 } else { 1 });
        }
        Ok(argmax(&scores))
    }

    /// Recovers `[X_C; X_NC]` from an observation through the left inverse
    /// of the mixing matrix.
    pub fn decode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let latent = self.left_inverse.mul_vec(x)?;
        let (xc, xnc) = latent.split_at(self.cfg.d_c);
        Ok((xc.to_vec(), xnc.to_vec()))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `(MᵀM)⁻¹Mᵀ`, failing unless M has full column rank.
fn left_inverse(m: &Matrix) -> Result<Matrix> {
    let mt = m.transpose();
    let gram = mt.matmul(m)?;
    let eig = linalg::sym_eig(&gram)?;
    let max = eig.values.first().copied().unwrap_or(0.0);
    let min = eig.values.last().copied().unwrap_or(0.0);
    if max.is_nan() || max <= 0.0 || min <= 1e-8 * max {
        return Err(Error::config(
            "scm.mixing",
            format!("mixing is rank deficient (Gram eigenvalues in [{min:e}, {max:e}])"),
        ));
    }
    let k = gram.rows;
    let mut inv = Matrix::zeros(k, k);
    for (lambda, v) in eig.values.iter().zip(&eig.vectors) {
        for i in 0..k {
            for j in 0..k {
                inv[(i, j)] += v[i] * v[j] / lambda;
            }
        }
    }
    inv.matmul(&mt)
}

fn validate(cfg: &ScmConfig) -> Result<()> {
    if cfg.d_c == 0 {
        return Err(Error::config("scm.d_c", "must be at least 1"));
    }
    if cfg.d_nc == 0 {
        return Err(Error::config("scm.d_nc", "must be at least 1"));
    }
    if cfg.d_obs == 0 {
        return Err(Error::config("scm.d_obs", "must be at least 1"));
    }
    if cfg.w_c.len() != cfg.d_c {
        return Err(Error::config(
            "scm.w_c",
            format!("expected {} entries, got {}", cfg.d_c, cfg.w_c.len()),
        ));
    }
    if cfg.mu_nc.len() != cfg.d_nc {
        return Err(Error::config(
            "scm.mu_nc",
            format!("expected {} entries, got {}", cfg.d_nc, cfg.mu_nc.len()),
        ));
    }
    if cfg.w_c.iter().chain(&cfg.mu_nc).any(|x| !x.is_finite()) {
        return Err(Error::config("scm", "w_c and mu_nc must be finite"));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::config("scm.temperature", "must be positive and finite"));
    }
    if !(0.0..=1.0).contains(&cfg.rho_train) {
        return Err(Error::config("scm.rho_train", "must lie in [0, 1]"));
    }
    if !(-1.0..=1.0).contains(&cfg.rho_test) {
        return Err(Error::config("scm.rho_test", "must lie in [-1, 1]"));
    }
    if !(-1.0..=1.0).contains(&cfg.aug_rho) {
        return Err(Error::config("scm.aug_rho", "must lie in [-1, 1]"));
    }
    if !(cfg.noise_nc >= 0.0 && cfg.noise_nc.is_finite()) {
        return Err(Error::config("scm.noise_nc", "must be non-negative"));
    }
    if let Some(w) = &cfg.class_weights {
        w.validate()
            .map_err(|e| Error::config("scm.class_weights", e.to_string()))?;
        if w.rows < 2 || w.cols != cfg.d_c {
            return Err(Error::config(
                "scm.class_weights",
                format!("expected c x {} with c >= 2", cfg.d_c),
            ));
        }
    }
    Ok(())
}
