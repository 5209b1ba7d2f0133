//! Streaming adaptation state: per-sample trimming, batch-averaged trimmed
//! prototypes and their running mean across batches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, logits, softmax, Model};
use crate::scm::Observation;
use crate::trim::{identify_noncausal, trim_prototypes, trim_representation, variance_gate, TrimDirections};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TactConfig {
    /// Augmentations per test sample.
    pub n: usize,
    /// Principal directions removed per sample.
    pub m: usize,
    /// Variance-fraction gate; 0 trims every non-degenerate sample.
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_true")]
    pub include_current_batch: bool,
}

fn default_true() -> bool {
    true
}

impl TactConfig {
    pub fn reference() -> Self {
        TactConfig {
            n: 128,
            m: 1,
            tau: 0.0,
            include_current_batch: true,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("tact.n", "must be at least 1"));
        }
        if self.m == 0 || self.m > d {
            return Err(Error::config("tact.m", format!("must lie in [1, {d}]")));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tact.tau", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Which parts of trimming enter the prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Trimmed representation against the running trimmed prototypes.
    #[default]
    Full,
    /// Trimmed representation against the untrimmed base prototypes.
    TrimZOnly,
    /// Untrimmed representation against the running trimmed prototypes.
    AvgQOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// One line of the per-batch trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch: usize,
    pub gate_pass_count: usize,
    /// `m_effective_histogram[k]` counts samples trimmed along exactly `k`
    /// directions (k = 0 for gate-failing samples).
    pub m_effective_histogram: Vec<usize>,
    pub top_variance_fraction_mean: Option<f64>,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TactSession {
    pub config: TactConfig,
    /// Number of moving-average updates so far (`i` in the recurrence).
    pub batch_index: usize,
    /// Number of batches handed to [`TactSession::process_batch`].
    pub batches_seen: usize,
    pub running_prototypes: Vec<Vec<f64>>,
    pub base_prototypes: Vec<Vec<f64>>,
}

/// Per-sample intermediate results of one batch.
#[derive(Clone, Debug)]
pub struct SampleTrim {
    pub z: Vec<f64>,
    pub directions: TrimDirections,
    pub gated: bool,
    pub z_trimmed: Vec<f64>,
    pub prototypes_trimmed: Option<Vec<Vec<f64>>>,
}

/// Representation, directions and trimmed quantities for one observation
/// and its augmented inputs.
pub fn trim_sample(model: &Model, x: &[f64], augmented: &[Vec<f64>], cfg: &TactConfig) -> Result<SampleTrim> {
    let z = model.extract(x)?;
    let reps = augmented
        .iter()
        .map(|v| model.extract(v))
        .collect::<Result<Vec<_>>>()?;
    let directions = identify_noncausal(&z, &reps, cfg.m)?;
    let gated = variance_gate(&directions, cfg.tau);
    let (z_trimmed, prototypes_trimmed) = if gated {
        (
            trim_representation(&z, &directions)?,
            Some(trim_prototypes(&model.prototypes, &directions)?),
        )
    } else {
        (z.clone(), None)
    };
    Ok(SampleTrim {
        z,
        directions,
        gated,
        z_trimmed,
        prototypes_trimmed,
    })
}

/// Softmax prediction from a (trimmed) representation and prototypes.
pub fn tact_predict(z_trimmed: &[f64], prototypes: &[Vec<f64>]) -> Result<Prediction> {
    let l = logits(prototypes, z_trimmed)?;
    Ok(Prediction {
        class: argmax(&l),
        probs: softmax(&l),
    })
}

impl TactSession {
    pub fn new(config: TactConfig, model: &Model) -> Result<Self> {
        config.validate(model.d())?;
        Ok(TactSession {
            config,
            batch_index: 0,
            batches_seen: 0,
            running_prototypes: model.prototypes.clone(),
            base_prototypes: model.prototypes.clone(),
        })
    }

    /// `q̄ ← ((i−1)/i)·q̄ + (1/i)·q̂⁽ⁱ⁾` with `i` the new batch index.
    pub fn update_moving_average(&mut self, batch_prototypes: &[Vec<f64>]) -> Result<()> {
        if batch_prototypes.len() != self.running_prototypes.len() {
            return Err(Error::InvalidVector(format!(
                "expected {} prototypes, got {}",
                self.running_prototypes.len(),
                batch_prototypes.len()
            )));
        }
        for (k, (q, r)) in batch_prototypes.iter().zip(&self.running_prototypes).enumerate() {
            if q.len() != r.len() {
                return Err(Error::InvalidVector(format!(
                    "prototype {k} has length {}, expected {}",
                    q.len(),
                    r.len()
                )));
            }
        }
        let i = (self.batch_index + 1) as f64;
        let keep = (i - 1.0) / i;
        for (running, new) in self.running_prototypes.iter_mut().zip(batch_prototypes) {
            for (r, q) in running.iter_mut().zip(new) {
                *r = keep * *r + q / i;
            }
        }
        self.batch_index += 1;
        Ok(())
    }

    pub fn process_batch(
        &mut self,
        model: &Model,
        batch: &[Observation],
        augmenter: &mut dyn FnMut(&Observation) -> Result<Vec<Vec<f64>>>,
    ) -> Result<(Vec<Prediction>, BatchReport)> {
        self.process_batch_with(model, batch, augmenter, Ablation::Full)
    }

    /// Runs one batch. `augmenter` is called exactly once per observation, in
    /// input order, and must return `config.n` augmented inputs.
    pub fn process_batch_with(
        &mut self,
        model: &Model,
        batch: &[Observation],
        augmenter: &mut dyn FnMut(&Observation) -> Result<Vec<Vec<f64>>>,
        ablation: Ablation,
    ) -> Result<(Vec<Prediction>, BatchReport)> {
        let m = self.config.m;
        if batch.is_empty() {
            return Ok((
                Vec::new(),
                BatchReport {
                    batch: self.batches_seen,
                    gate_pass_count: 0,
                    m_effective_histogram: vec![0; m + 1],
                    top_variance_fraction_mean: None,
                    predictions: Vec::new(),
                },
            ));
        }
        let augmented = batch
            .iter()
            .map(&mut *augmenter)
            .collect::<Result<Vec<_>>>()?;
        let cfg = self.config.clone();
        let trims = batch
            .par_iter()
            .zip(augmented.par_iter())
            .map(|(obs, aug)| trim_sample(model, &obs.x, aug, &cfg))
            .collect::<Result<Vec<_>>>()?;

        let mut histogram = vec![0usize; m + 1];
        let mut fraction_sum = 0.0;
        let mut fraction_count = 0usize;
        let mut sum: Option<Vec<Vec<f64>>> = None;
        let mut passed = 0usize;
        for t in &trims {
            if let Some(f) = t.directions.top_fraction() {
                fraction_sum += f;
                fraction_count += 1;
            }
            match &t.prototypes_trimmed {
                Some(q) => {
                    histogram[t.directions.dirs.len()] += 1;
                    passed += 1;
                    match &mut sum {
                        None => sum = Some(q.clone()),
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(q) {
                                for (x, y) in a.iter_mut().zip(b) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                None => histogram[0] += 1,
            }
        }

        let before = self.running_prototypes.clone();
        if let Some(mut acc) = sum {
            let count = passed as f64;
            acc.iter_mut().flatten().for_each(|x| *x /= count);
            self.update_moving_average(&acc)?;
        }
        let running = if self.config.include_current_batch {
            &self.running_prototypes
        } else {
            &before
        };

        let predictions = trims
            .iter()
            .map(|t| match ablation {
                Ablation::Full => tact_predict(&t.z_trimmed, running),
                Ablation::TrimZOnly => tact_predict(&t.z_trimmed, &self.base_prototypes),
                Ablation::AvgQOnly => tact_predict(&t.z, running),
            })
            .collect::<Result<Vec<_>>>()?;

        let report = BatchReport {
            batch: self.batches_seen,
            gate_pass_count: passed,
            m_effective_histogram: histogram,
            top_variance_fraction_mean: (fraction_count > 0).then(|| fraction_sum / fraction_count as f64),
            predictions: predictions.iter().map(|p| p.class).collect(),
        };
        self.batches_seen += 1;
        Ok((predictions, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn session(prototypes: Vec<Vec<f64>>) -> TactSession {
        let d = prototypes[0].len();
        let model = Model::new(Matrix::identity(d), vec![0.0; d], prototypes).unwrap();
        TactSession::new(TactConfig { n: 4, m: 1, tau: 0.0, include_current_batch: true }, &model).unwrap()
    }

    #[test]
    fn moving_average_examples() {
        let mut s = session(vec![vec![9.0, 9.0]]);
        s.update_moving_average(&[vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.running_prototypes, vec![vec![2.0, 0.0]]);
        s.update_moving_average(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(s.running_prototypes, vec![vec![1.0, 1.0]]);
        s.update_moving_average(&[vec![4.0, 1.0]]).unwrap();
        let r = &s.running_prototypes[0];
        assert!((r[0] - 2.0).abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        assert_eq!(s.batch_index, 3);
        assert!(matches!(
            s.update_moving_average(&[vec![1.0]]),
            Err(Error::InvalidVector(_))
        ));
    }

    #[test]
    fn predict_examples() {
        let p = tact_predict(&[1.0, 0.0], &[vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(p.class, 0);
        let p = tact_predict(&[0.0, 0.0], &[vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(p.class, 0);
        assert_eq!(p.probs, vec![0.5, 0.5]);
        let p = tact_predict(&[0.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(p.class, 1);
        let e3 = 3f64.exp();
        assert!((p.probs[1] - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert!(tact_predict(&[1.0], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn empty_batch_leaves_session_untouched() {
        let mut s = session(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let before = s.clone();
        let model = Model::new(Matrix::identity(2), vec![0.0; 2], before.base_prototypes.clone()).unwrap();
        let (preds, _) = s
            .process_batch(&model, &[], &mut |_| unreachable!("no samples"))
            .unwrap();
        assert!(preds.is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn config_validation() {
        assert!(TactConfig { n: 0, ..TactConfig::reference() }.validate(4).is_err());
        assert!(TactConfig { m: 5, ..TactConfig::reference() }.validate(4).is_err());
        assert!(TactConfig { tau: 1.5, ..TactConfig::reference() }.validate(4).is_err());
        assert!(TactConfig::reference().validate(4).is_ok());
    }
}
