//! Linear feature extractor with a prototype classifier on top.
//!
//! `z = W·x + b` (optionally passed through `tanh`), logits `z·q_k`, softmax
//! probabilities. The classifier has no bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::Prng;
use crate::scm::{Domain, Scm};

pub const CHECKPOINT_VERSION: u32 = 1;
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Parameters a gradient step is allowed to touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    #[default]
    All,
    PrototypesOnly,
}

fn default_train_size() -> usize {
    5000
}

fn default_repr_dim() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Minibatch size; `None` means full-batch gradient descent.
    #[serde(default)]
    pub batch: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    /// Representation dimension `d`.
    #[serde(default = "default_repr_dim")]
    pub d: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl TrainConfig {
    pub fn reference() -> Self {
        TrainConfig {
            epochs: 500,
            learning_rate: 0.1,
            l2: 0.0,
            batch: None,
            seed: 42,
            train_size: 5000,
            d: 16,
            activation: Activation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config("train.l2", "must be non-negative"));
        }
        if self.batch == Some(0) {
            return Err(Error::config("train.batch", "minibatch size must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("train.d", "must be at least 1"));
        }
        if self.train_size == 0 {
            return Err(Error::config("train.train_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    d: usize,
    c: usize,
    d_obs: usize,
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "is_linear")]
    activation: Activation,
}

fn is_linear(a: &Activation) -> bool {
    *a == Activation::Linear
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &Model) -> Self {
        Gradients {
            w: Matrix::zeros(model.w.rows, model.w.cols),
            b: vec![0.0; model.b.len()],
            prototypes: vec![vec![0.0; model.d()]; model.c()],
        }
    }

    /// Same layout as [`Model::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w.entries.clone();
        v.extend_from_slice(&self.b);
        self.prototypes.iter().for_each(|q| v.extend_from_slice(q));
        v
    }
}

impl Model {
    pub fn new(w: Matrix, b: Vec<f64>, prototypes: Vec<Vec<f64>>) -> Result<Self> {
        let m = Model {
            w,
            b,
            prototypes,
            activation: Activation::Linear,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn d(&self) -> usize {
        self.w.rows
    }

    pub fn d_obs(&self) -> usize {
        self.w.cols
    }

    pub fn c(&self) -> usize {
        self.prototypes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.w.validate()?;
        if self.b.len() != self.d() {
            return Err(Error::InvalidVector(format!(
                "bias has length {}, expected d = {}",
                self.b.len(),
                self.d()
            )));
        }
        if self.c() == 0 {
            return Err(Error::InvalidInput("model needs at least one prototype".into()));
        }
        for (k, q) in self.prototypes.iter().enumerate() {
            if q.len() != self.d() {
                return Err(Error::InvalidVector(format!(
                    "prototype {k} has length {}, expected {}",
                    q.len(),
                    self.d()
                )));
            }
        }
        if self
            .b
            .iter()
            .chain(self.prototypes.iter().flatten())
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidVector("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Gaussian initialization with standard deviation `0.1 / sqrt(fan_in)`;
    /// the extractor bias starts at zero.
    pub fn init(d_obs: usize, d: usize, c: usize, activation: Activation, rng: &mut Prng) -> Self {
        let sw = 0.1 / (d_obs as f64).sqrt();
        let sq = 0.1 / (d as f64).sqrt();
        let w = Matrix {
            rows: d,
            cols: d_obs,
            entries: (0..d * d_obs).map(|_| sw * rng.normal()).collect(),
        };
        let prototypes = (0..c)
            .map(|_| (0..d).map(|_| sq * rng.normal()).collect())
            .collect();
        Model {
            w,
            b: vec![0.0; d],
            prototypes,
            activation,
        }
    }

    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.w.mul_vec(x)?;
        for (zi, bi) in z.iter_mut().zip(&self.b) {
            *zi += bi;
            if self.activation == Activation::Tanh {
                *zi = zi.tanh();
            }
        }
        Ok(z)
    }

    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let z = self.extract(x)?;
        let l = logits(&self.prototypes, &z)?;
        let p = softmax(&l);
        Ok((argmax(&l), p))
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = self.w.entries.clone();
        v.extend_from_slice(&self.b);
        self.prototypes.iter().for_each(|q| v.extend_from_slice(q));
        v
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let nw = self.w.entries.len();
        let d = self.d();
        assert_eq!(params.len(), nw + d + d * self.c(), "parameter length");
        self.w.entries.copy_from_slice(&params[..nw]);
        self.b.copy_from_slice(&params[nw..nw + d]);
        for (k, q) in self.prototypes.iter_mut().enumerate() {
            let start = nw + d + k * d;
            q.copy_from_slice(&params[start..start + d]);
        }
    }

    /// Backpropagates per-sample logit gradients `dL/dlogits` into parameter
    /// gradients. Samples are accumulated in input order.
    pub fn backprop(&self, xs: &[Vec<f64>], logit_grads: &[Vec<f64>]) -> Result<Gradients> {
        let mut g = Gradients::zeros_like(self);
        for (x, gl) in xs.iter().zip(logit_grads) {
            let z = self.extract(x)?;
            let mut dz = vec![0.0; self.d()];
            for (k, glk) in gl.iter().enumerate() {
                if *glk == 0.0 {
                    continue;
                }
                for j in 0..self.d() {
                    g.prototypes[k][j] += glk * z[j];
                    dz[j] += glk * self.prototypes[k][j];
                }
            }
            if self.activation == Activation::Tanh {
                for (dzj, zj) in dz.iter_mut().zip(&z) {
                    *dzj *= 1.0 - zj * zj;
                }
            }
            for (j, dzj) in dz.iter().enumerate() {
                g.b[j] += dzj;
                for (gw, xi) in g.w.row_mut(j).iter_mut().zip(x) {
                    *gw += dzj * xi;
                }
            }
        }
        Ok(g)
    }

    pub fn apply(&mut self, grads: &Gradients, learning_rate: f64, scope: UpdateScope) {
        if scope == UpdateScope::All {
            for (p, g) in self.w.entries.iter_mut().zip(&grads.w.entries) {
                *p -= learning_rate * g;
            }
            for (p, g) in self.b.iter_mut().zip(&grads.b) {
                *p -= learning_rate * g;
            }
        }
        for (q, gq) in self.prototypes.iter_mut().zip(&grads.prototypes) {
            for (p, g) in q.iter_mut().zip(gq) {
                *p -= learning_rate * g;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            d: self.d(),
            c: self.c(),
            d_obs: self.d_obs(),
            w: self.w.entries.clone(),
            b: self.b.clone(),
            prototypes: self.prototypes.clone(),
            activation: self.activation,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let ck: Checkpoint = serde_json::from_value(raw)?;
        if ck.prototypes.len() != ck.c {
            return Err(Error::InvalidInput(format!(
                "checkpoint declares c = {} but has {} prototypes",
                ck.c,
                ck.prototypes.len()
            )));
        }
        let w = Matrix::new(ck.d, ck.d_obs, ck.w)?;
        Ok(Model::new(w, ck.b, ck.prototypes)?.with_activation(ck.activation))
    }
}

pub fn logits(prototypes: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
    prototypes
        .iter()
        .enumerate()
        .map(|(k, q)| {
            if q.len() != z.len() {
                Err(Error::InvalidVector(format!(
                    "representation has length {}, prototype {k} has {}",
                    z.len(),
                    q.len()
                )))
            } else {
                Ok(dot(z, q))
            }
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over `(xs, ys)` plus `l2/2 · ‖θ‖²`, with its gradient.
pub fn cross_entropy(model: &Model, xs: &[Vec<f64>], ys: &[usize], l2: f64) -> Result<(f64, Gradients)> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("cross-entropy needs at least one sample"));
    }
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut logit_grads = Vec::with_capacity(xs.len());
    for (x, &y) in xs.iter().zip(ys) {
        if y >= model.c() {
            return Err(Error::InvalidInput(format!("label {y} out of range for {} classes", model.c())));
        }
        let l = logits(&model.prototypes, &model.extract(x)?)?;
        let p = softmax(&l);
        loss -= p[y].max(1e-300).ln() / n;
        let mut g: Vec<f64> = p.iter().map(|pk| pk / n).collect();
        g[y] -= 1.0 / n;
        logit_grads.push(g);
    }
    let mut grads = model.backprop(xs, &logit_grads)?;
    if l2 > 0.0 {
        let params = model.params();
        loss += 0.5 * l2 * params.iter().map(|p| p * p).sum::<f64>();
        for (g, p) in grads.w.entries.iter_mut().zip(&model.w.entries) {
            *g += l2 * p;
        }
        for (g, p) in grads.b.iter_mut().zip(&model.b) {
            *g += l2 * p;
        }
        for (gq, q) in grads.prototypes.iter_mut().zip(&model.prototypes) {
            for (g, p) in gq.iter_mut().zip(q) {
                *g += l2 * p;
            }
        }
    }
    Ok((loss, grads))
}

pub fn accuracy(model: &Model, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        if model.predict(x)?.0 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len().max(1) as f64)
}

/// Trains on `xs, ys` by (mini)batch gradient descent on mean cross-entropy.
pub fn fit(model: &mut Model, xs: &[Vec<f64>], ys: &[usize], tcfg: &TrainConfig) -> Result<()> {
    tcfg.validate()?;
    let mut shuffle = Prng::stream(tcfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..tcfg.epochs {
        match tcfg.batch {
            None => {
                let (loss, g) = cross_entropy(model, xs, ys, tcfg.l2)?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                model.apply(&g, tcfg.learning_rate, UpdateScope::All);
            }
            Some(size) => {
                shuffle.shuffle(&mut order);
                for chunk in order.chunks(size) {
                    let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
                    let by: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
                    let (loss, g) = cross_entropy(model, &bx, &by, tcfg.l2)?;
                    if !loss.is_finite() {
                        return Err(Error::TrainingDiverged { epoch });
                    }
                    model.apply(&g, tcfg.learning_rate, UpdateScope::All);
                }
            }
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(())
}

/// Empirical risk minimization on a fresh training draw from `scm`. Training
/// data comes from `rng`; initialization and shuffling from `tcfg.seed`.
pub fn train_erm(scm: &Scm, tcfg: &TrainConfig, rng: &mut Prng) -> Result<Model> {
    tcfg.validate()?;
    let data = scm.sample_batch(Domain::Train, tcfg.train_size, rng);
    let xs: Vec<Vec<f64>> = data.iter().map(|s| s.x.clone()).collect();
    let ys: Vec<usize> = data.iter().map(|s| s.y).collect();
    let mut init_rng = Prng::stream(tcfg.seed, INIT_STREAM);
    let mut model = Model::init(
        scm.config().d_obs,
        tcfg.d,
        scm.num_classes(),
        tcfg.activation,
        &mut init_rng,
    );
    fit(&mut model, &xs, &ys, tcfg)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model() -> Model {
        Model::new(Matrix::identity(2), vec![0.0, 0.0], vec![vec![2.0, 0.0], vec![0.0, 5.0]]).unwrap()
    }

    #[test]
    fn extract_examples() {
        let m = identity_model();
        assert_eq!(m.extract(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let c = Model::new(Matrix::zeros(2, 2), vec![3.0, 3.0], vec![vec![0.0; 2]]).unwrap();
        assert_eq!(c.extract(&[7.0, -1.0]).unwrap(), vec![3.0, 3.0]);
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let m2 = Model::new(w, vec![0.0, 1.0], vec![vec![0.0; 2]]).unwrap();
        assert_eq!(m2.extract(&[2.0, 3.0]).unwrap(), vec![5.0, 4.0]);
        assert!(matches!(m.extract(&[1.0]), Err(Error::InvalidVector(_))));
    }

    #[test]
    fn logits_examples() {
        let q = vec![vec![2.0, 0.0], vec![0.0, 5.0]];
        assert_eq!(logits(&q, &[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(logits(&q, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(logits(&[vec![1.0, -1.0]], &[1.0, 1.0]).unwrap(), vec![0.0]);
        assert!(logits(&q, &[1.0]).is_err());
    }

    #[test]
    fn predict_examples() {
        // logits (2, 0)
        let (k, p) = identity_model().predict(&[1.0, 0.0]).unwrap();
        assert_eq!(k, 0);
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        // equal logits
        let (k, _) = identity_model().predict(&[0.0, 0.0]).unwrap();
        assert_eq!(k, 0);
        // logits (0, 10)
        let (k, p) = identity_model().predict(&[0.0, 2.0]).unwrap();
        assert_eq!(k, 1);
        assert!(p[1] >= 0.9999);
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = [0.3, -1.2, 4.0];
        let shifted: Vec<f64> = l.iter().map(|x| x + 123.0).collect();
        let (a, b) = (softmax(&l), softmax(&shifted));
        assert_eq!(argmax(&l), argmax(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let m = Model::init(5, 3, 2, Activation::Linear, &mut Prng::new(1));
        let a = m.to_json().unwrap();
        let b = Model::from_json(&a).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"W\""));
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let m = Model::init(2, 2, 2, Activation::Linear, &mut Prng::new(1));
        let text = m.to_json().unwrap().replace("\"version\":1", "\"version\":7");
        assert!(matches!(
            Model::from_json(&text),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let scm = Scm::new(&crate::scm::ScmConfig::reference()).unwrap();
        let tcfg = TrainConfig {
            epochs: 0,
            train_size: 10,
            ..TrainConfig::reference()
        };
        let m = train_erm(&scm, &tcfg, &mut Prng::new(3)).unwrap();
        let init = Model::init(16, 16, 2, Activation::Linear, &mut Prng::stream(tcfg.seed, INIT_STREAM));
        assert_eq!(m, init);
    }

    #[test]
    fn training_is_deterministic() {
        let scm = Scm::new(&crate::scm::ScmConfig::reference()).unwrap();
        let tcfg = TrainConfig {
            epochs: 5,
            train_size: 200,
            batch: Some(32),
            ..TrainConfig::reference()
        };
        let a = train_erm(&scm, &tcfg, &mut Prng::new(3)).unwrap();
        let b = train_erm(&scm, &tcfg, &mut Prng::new(3)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let scm = Scm::new(&crate::scm::ScmConfig::reference()).unwrap();
        let tcfg = TrainConfig {
            epochs: 200,
            learning_rate: 1e6,
            train_size: 50,
            ..TrainConfig::reference()
        };
        assert!(matches!(
            train_erm(&scm, &tcfg, &mut Prng::new(3)),
            Err(Error::TrainingDiverged { .. })
        ));
    }
}
