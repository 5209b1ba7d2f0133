//! End-to-end runs on the synthetic benchmark: training, streaming
//! adaptation, sweeps and the ablation grid.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_step, AdaptConfig};
use crate::error::{Error, Result};
use crate::metrics::{metrics, Metrics};
use crate::model::{train_erm, Model, TrainConfig};
use crate::rng::Prng;
use crate::scm::{Domain, LabeledSample, Observation, Scm, ScmConfig};
use crate::session::{Ablation, BatchReport, TactConfig, TactSession};

const TRAIN_STREAM: u64 = 10;
const TEST_STREAM: u64 = 11;
const AUGMENT_STREAM: u64 = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Tact,
    TactAdapt,
    NoTta,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scm: ScmConfig,
    pub train: TrainConfig,
    pub tact: TactConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptConfig>,
    pub test_size: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub ablation: Ablation,
    pub seed: u64,
    /// Noise added to the causal factors of each augmentation.
    #[serde(default)]
    pub causal_jitter: f64,
}

impl RunConfig {
    /// The benchmark reference configuration.
    pub fn reference() -> Self {
        RunConfig {
            scm: ScmConfig::reference(),
            train: TrainConfig::reference(),
            tact: TactConfig::reference(),
            adapt: None,
            test_size: 8192,
            batch_size: 64,
            mode: RunMode::Tact,
            ablation: Ablation::Full,
            seed: 42,
            causal_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<Scm> {
        let scm = Scm::new(&self.scm)?;
        self.train.validate()?;
        self.tact.validate(self.train.d)?;
        if let Some(a) = &self.adapt {
            a.validate()?;
        }
        if self.mode == RunMode::TactAdapt && self.adapt.is_none() {
            return Err(Error::config("adapt", "required when mode is tact_adapt"));
        }
        if self.test_size == 0 {
            return Err(Error::config("test_size", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.causal_jitter >= 0.0 && self.causal_jitter.is_finite()) {
            return Err(Error::config("causal_jitter", "must be non-negative"));
        }
        Ok(scm)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub ablation: Ablation,
    pub metrics: Metrics,
    pub samples_consumed: usize,
    /// Per-sample predicted classes in stream order.
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    /// Per-batch trace (adaptation modes only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub batches: Vec<BatchReport>,
}

impl RunReport {
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for b in &self.batches {
            out.push_str(&serde_json::to_string(b)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Hands out consecutive batches of the test set and refuses to revisit any
/// sample.
pub struct TestStream {
    samples: Vec<LabeledSample>,
    consumed: Vec<bool>,
    cursor: usize,
}

impl TestStream {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        let n = samples.len();
        TestStream {
            samples,
            consumed: vec![false; n],
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Option<&[LabeledSample]>> {
        if self.cursor >= self.samples.len() {
            return Ok(None);
        }
        let end = (self.cursor + size).min(self.samples.len());
        for i in self.cursor..end {
            if std::mem::replace(&mut self.consumed[i], true) {
                return Err(Error::StreamAudit(format!("sample {i} consumed twice")));
            }
        }
        let batch = &self.samples[self.cursor..end];
        self.cursor = end;
        Ok(Some(batch))
    }

    pub fn consumed(&self) -> usize {
        self.consumed.iter().filter(|c| **c).count()
    }
}

pub fn train_model(cfg: &RunConfig, scm: &Scm) -> Result<Model> {
    train_erm(scm, &cfg.train, &mut Prng::stream(cfg.seed, TRAIN_STREAM))
}

pub fn test_set(cfg: &RunConfig, scm: &Scm) -> Vec<LabeledSample> {
    scm.sample_batch(Domain::Test, cfg.test_size, &mut Prng::stream(cfg.seed, TEST_STREAM))
}

/// Trains a model and runs the configured mode over the test stream.
pub fn run_adaptation(cfg: &RunConfig) -> Result<RunReport> {
    let scm = cfg.validate()?;
    let model = train_model(cfg, &scm)?;
    run_with_model(cfg, &model)
}

pub fn run_with_model(cfg: &RunConfig, model: &Model) -> Result<RunReport> {
    let scm = cfg.validate()?;
    if model.d_obs() != cfg.scm.d_obs || model.c() != scm.num_classes() {
        return Err(Error::config(
            "model",
            format!(
                "checkpoint has d_obs = {}, c = {}; config needs d_obs = {}, c = {}",
                model.d_obs(),
                model.c(),
                cfg.scm.d_obs,
                scm.num_classes()
            ),
        ));
    }
    cfg.tact.validate(model.d())?;
    let mut stream = TestStream::new(test_set(cfg, &scm));
    let mut aug_rng = Prng::stream(cfg.seed, AUGMENT_STREAM);
    let mut current = model.clone();
    let mut session = TactSession::new(cfg.tact.clone(), model)?;

    let mut predictions = Vec::with_capacity(cfg.test_size);
    let mut labels = Vec::with_capacity(cfg.test_size);
    let mut groups = Vec::with_capacity(cfg.test_size);
    let mut per_batch = Vec::new();
    let mut batches = Vec::new();

    while let Some(batch) = stream.next_batch(cfg.batch_size)? {
        let preds: Vec<usize> = match cfg.mode {
            RunMode::NoTta => batch
                .iter()
                .map(|s| model.predict(&s.x).map(|p| p.0))
                .collect::<Result<_>>()?,
            RunMode::Oracle => batch
                .iter()
                .map(|s| scm.oracle_predict(s))
                .collect::<Result<_>>()?,
            RunMode::Tact | RunMode::TactAdapt => {
                let observations: Vec<Observation> = batch.iter().map(LabeledSample::observation).collect();
                let mut next = 0usize;
                let n = cfg.tact.n;
                let jitter = cfg.causal_jitter;
                let mut augmenter = |_: &Observation| {
                    let sample = &batch[next];
                    next += 1;
                    scm.augment(sample, n, jitter, &mut aug_rng).map(|a| a.variants)
                };
                session.base_prototypes = current.prototypes.clone();
                let (preds, report) =
                    session.process_batch_with(&current, &observations, &mut augmenter, cfg.ablation)?;
                batches.push(report);
                let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
                if cfg.mode == RunMode::TactAdapt {
                    let adapt = cfg.adapt.as_ref().expect("validated");
                    let xs: Vec<Vec<f64>> = observations.into_iter().map(|o| o.x).collect();
                    current = adapt_step(&current, &xs, &classes, adapt)?;
                }
                classes
            }
        };
        let correct = preds.iter().zip(batch).filter(|(p, s)| **p == s.y).count();
        per_batch.push(correct as f64 / batch.len() as f64);
        labels.extend(batch.iter().map(|s| s.y));
        groups.extend(batch.iter().map(|s| s.group));
        predictions.extend(preds);
    }

    let mut m = metrics(&predictions, &labels, &groups)?;
    m.per_batch = per_batch;
    Ok(RunReport {
        mode: cfg.mode,
        ablation: cfg.ablation,
        metrics: m,
        samples_consumed: stream.consumed(),
        predictions,
        labels,
        groups,
        batches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    pub batch_size: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub m: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Runs every `(n, m, batch_size)` cell for each seed. The model is trained
/// once per seed and shared by that seed's cells. Failing cells are recorded,
/// not fatal.
pub fn sweep(grid: &Grid, base: &RunConfig, seeds: &[u64]) -> Result<SweepTable> {
    let seeds: Vec<u64> = if seeds.is_empty() {
        if grid.seeds.is_empty() {
            vec![base.seed]
        } else {
            grid.seeds.clone()
        }
    } else {
        seeds.to_vec()
    };
    if grid.n.is_empty() || grid.m.is_empty() || grid.batch_size.is_empty() {
        return Err(Error::InvalidInput("every grid axis needs at least one value".into()));
    }
    let scm = base.validate()?;
    let models: Vec<Result<Model>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..base.clone() };
            train_model(&cfg, &scm)
        })
        .collect();

    let mut cells = Vec::new();
    for &n in &sorted(grid.n.clone()) {
        for &m in &sorted(grid.m.clone()) {
            for &batch_size in &sorted(grid.batch_size.clone()) {
                for (si, &seed) in seeds.iter().enumerate() {
                    cells.push((n, m, batch_size, seed, si));
                }
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(n, m, batch_size, seed, si)| {
            let cfg = RunConfig {
                tact: TactConfig { n, m, ..base.tact.clone() },
                batch_size,
                seed,
                ..base.clone()
            };
            let outcome = models[si]
                .as_ref()
                .map_err(|e| Error::InvalidInput(format!("training failed: {e}")))
                .and_then(|model| run_with_model(&cfg, model).map_err(|e| Error::InvalidInput(e.to_string())));
            match outcome {
                Ok(r) => SweepRow { n, m, batch_size, seed, metrics: Some(r.metrics), error: None },
                Err(e) => SweepRow { n, m, batch_size, seed, metrics: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(SweepTable { rows })
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m,batch_size,seed,status,accuracy,macro_f1,worst_group_accuracy,error\n");
        for r in &self.rows {
            match (&r.metrics, &r.error) {
                (Some(m), _) => writeln!(
                    out,
                    "{},{},{},{},ok,{:.6},{:.6},{:.6},",
                    r.n, r.m, r.batch_size, r.seed, m.accuracy, m.macro_f1, m.worst_group_accuracy
                ),
                (None, e) => writeln!(
                    out,
                    "{},{},{},{},failed,,,,{}",
                    r.n,
                    r.m,
                    r.batch_size,
                    r.seed,
                    csv_escape(e.as_deref().unwrap_or("unknown error"))
                ),
            }
            .expect("writing to a String");
        }
        out
    }

    /// Mean accuracy over successful rows matching `filter`.
    pub fn mean_accuracy(&self, filter: impl Fn(&SweepRow) -> bool) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| filter(r))
            .filter_map(|r| r.metrics.as_ref().map(|m| m.accuracy))
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoTta,
    TrimZOnly,
    AvgQOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoTta, Variant::TrimZOnly, Variant::AvgQOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoTta => "no_tta",
            Variant::TrimZOnly => "trim_z_only",
            Variant::AvgQOnly => "avg_q_only",
            Variant::Full => "full",
        }
    }

    /// (trim z, trim q, average q̂) flags.
    fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::NoTta => (false, false, false),
            Variant::TrimZOnly => (true, false, false),
            Variant::AvgQOnly => (false, true, true),
            Variant::Full => (true, true, true),
        }
    }

    fn apply(self, base: &RunConfig) -> RunConfig {
        let (mode, ablation) = match self {
            Variant::NoTta => (RunMode::NoTta, Ablation::Full),
            Variant::TrimZOnly => (RunMode::Tact, Ablation::TrimZOnly),
            Variant::AvgQOnly => (RunMode::Tact, Ablation::AvgQOnly),
            Variant::Full => (RunMode::Tact, Ablation::Full),
        };
        RunConfig { mode, ablation, ..base.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub accuracy: Vec<f64>,
    pub macro_f1: Vec<f64>,
    pub worst_group_accuracy: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn mean_accuracy(&self) -> f64 {
        mean_std(&self.accuracy).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == v).expect("every variant has a row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,trim_z,trim_q,average_q,runs,accuracy_mean,accuracy_std,macro_f1_mean,worst_group_accuracy_mean\n",
        );
        for r in &self.rows {
            let (tz, tq, aq) = r.variant.flags();
            let (am, asd) = mean_std(&r.accuracy);
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.variant.name(),
                u8::from(tz),
                u8::from(tq),
                u8::from(aq),
                r.accuracy.len(),
                am,
                asd,
                mean_std(&r.macro_f1).0,
                mean_std(&r.worst_group_accuracy).0
            )
            .expect("writing to a String");
        }
        out
    }
}

/// The four ablation variants for every seed, one model per seed.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let scm = base.validate()?;
    let per_seed: Vec<Vec<Metrics>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..base.clone() };
            let model = train_model(&cfg, &scm)?;
            Variant::ALL
                .par_iter()
                .map(|v| run_with_model(&v.apply(&cfg), &model).map(|r| r.metrics))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = Variant::ALL
        .iter()
        .enumerate()
        .map(|(vi, &variant)| AblationRow {
            variant,
            seeds: seeds.clone(),
            accuracy: per_seed.iter().map(|m| m[vi].accuracy).collect(),
            macro_f1: per_seed.iter().map(|m| m[vi].macro_f1).collect(),
            worst_group_accuracy: per_seed.iter().map(|m| m[vi].worst_group_accuracy).collect(),
        })
        .collect();
    Ok(AblationTable { rows })
}

/// JSONL export of samples; `hidden = false` drops the causal/non-causal
/// factors.
pub fn samples_jsonl(samples: &[LabeledSample], hidden: bool) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let line = if hidden {
            serde_json::to_string(s)?
        } else {
            serde_json::to_string(&s.clone().without_hidden())?
        };
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Draws `count` samples from `domain` with the run's seeded stream for that
/// domain.
pub fn generate(cfg: &RunConfig, domain: Domain, count: usize) -> Result<Vec<LabeledSample>> {
    let scm = Scm::new(&cfg.scm)?;
    let stream = match domain {
        Domain::Train => TRAIN_STREAM,
        Domain::Test => TEST_STREAM,
    };
    Ok(scm.sample_batch(domain, count, &mut Prng::stream(cfg.seed, stream)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            train: TrainConfig {
                epochs: 50,
                train_size: 400,
                ..TrainConfig::reference()
            },
            tact: TactConfig { n: 16, ..TactConfig::reference() },
            test_size: 100,
            batch_size: 16,
            ..RunConfig::reference()
        }
    }

    #[test]
    fn stream_refuses_revisits_and_counts() {
        let scm = Scm::new(&ScmConfig::reference()).unwrap();
        let samples = scm.sample_batch(Domain::Test, 10, &mut Prng::new(1));
        let mut s = TestStream::new(samples);
        let mut sizes = Vec::new();
        while let Some(b) = s.next_batch(4).unwrap() {
            sizes.push(b.len());
        }
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(s.consumed(), 10);
        s.cursor = 0;
        assert!(matches!(s.next_batch(4), Err(Error::StreamAudit(_))));
    }

    #[test]
    fn validation_reports_field_paths() {
        let cfg = RunConfig { batch_size: 0, ..small() };
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "batch_size"),
            other => panic!("{other:?}"),
        }
        let cfg = RunConfig { mode: RunMode::TactAdapt, ..small() };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = small();
        cfg.tact.m = 0;
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "tact.m"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_accuracy_matches_prediction_log() {
        let r = run_adaptation(&small()).unwrap();
        let recomputed = r.predictions.iter().zip(&r.labels).filter(|(p, l)| p == l).count() as f64
            / r.predictions.len() as f64;
        assert_eq!(recomputed.to_bits(), r.metrics.accuracy.to_bits());
        assert_eq!(r.samples_consumed, 100);
        assert_eq!(r.batches.len(), 7);
        assert_eq!(r.metrics.per_batch.len(), 7);
    }

    #[test]
    fn sweep_counts_and_failed_cells() {
        let grid = Grid { n: vec![4], m: vec![1, 99], batch_size: vec![32], seeds: vec![] };
        let t = sweep(&grid, &small(), &[]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[0].metrics.is_some());
        assert!(t.rows[1].error.is_some());
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().contains(",failed,"));
    }
}
