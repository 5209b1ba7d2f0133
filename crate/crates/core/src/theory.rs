//! Brute-force checks of the three trimming propositions for binary
//! prototype classifiers.
//!
//! An instance is described in a principal basis `e_1..e_d`: the
//! representation `z = Σ α_i e_i`, the learned boundary `Δq = Σ γ_i e_i` and
//! the causal boundary `Δp = Σ η_i γ_i e_i`. Preconditions are evaluated on
//! these coefficients; conclusions are evaluated independently by trimming the
//! reconstructed vectors and taking dot products.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, project_out_unchecked};
use crate::rng::Prng;

/// Strict inequalities must clear this margin.
pub const MARGIN: f64 = 1e-9;
/// `|γ_i|` at or below this leaves `η_i` undefined.
pub const GAMMA_CUTOFF: f64 = 1e-9;
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub d: usize,
    pub m: usize,
    /// +1 or −1.
    pub y: f64,
    pub basis: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `y z·Δq < 0`
    Misclassified,
    /// `y z·Δp > 0`
    CausallyCorrect,
    /// `y z·Δq > 0`
    LearnedCorrect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub preconditions_met: bool,
    pub conclusion_holds: bool,
    pub per_condition: BTreeMap<String, bool>,
    /// Signed values whose sign decides each inequality on the taken path.
    pub margins: BTreeMap<String, f64>,
}

impl ConditionReport {
    /// Preconditions hold, the conclusion fails, and no inequality sits
    /// within floating-point reach of its boundary.
    pub fn is_violation(&self) -> bool {
        self.preconditions_met
            && !self.conclusion_holds
            && self.margins.values().all(|v| v.abs() > MARGIN)
    }
}

impl TheoryInstance {
    pub fn new(y: f64, m: usize, basis: Vec<Vec<f64>>, alpha: Vec<f64>, gamma: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        let d = basis.len();
        if y != 1.0 && y != -1.0 {
            return Err(Error::InvalidInput(format!("label must be ±1, got {y}")));
        }
        if d == 0 || m >= d {
            return Err(Error::InvalidInput(format!("need 0 <= m < d, got m = {m}, d = {d}")));
        }
        if alpha.len() != d || gamma.len() != d || eta.len() != d {
            return Err(Error::InvalidVector("coefficient vectors must have length d".into()));
        }
        linalg::check_orthonormal(&basis, d)?;
        if let Some((index, &value)) = gamma.iter().enumerate().find(|(_, g)| g.abs() <= GAMMA_CUTOFF) {
            return Err(Error::EtaUndefined { index, value });
        }
        Ok(TheoryInstance { d, m, y, basis, alpha, gamma, eta })
    }

    /// Instance expressed in the standard basis.
    pub fn standard(y: f64, m: usize, alpha: Vec<f64>, gamma: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        let d = alpha.len();
        let basis = linalg::Matrix::identity(d).to_rows();
        TheoryInstance::new(y, m, basis, alpha, gamma, eta)
    }

    fn combine(&self, coeffs: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        for (c, e) in coeffs.zip(&self.basis) {
            linalg::axpy(c, e, &mut v);
        }
        v
    }

    pub fn z(&self) -> Vec<f64> {
        self.combine(self.alpha.iter().copied())
    }

    pub fn dq(&self) -> Vec<f64> {
        self.combine(self.gamma.iter().copied())
    }

    pub fn dp(&self) -> Vec<f64> {
        self.combine(self.eta.iter().zip(&self.gamma).map(|(e, g)| e * g))
    }

    fn removed(&self) -> &[Vec<f64>] {
        &self.basis[..self.m]
    }

    pub fn z_trimmed(&self) -> Vec<f64> {
        project_out_unchecked(&self.z(), self.removed())
    }

    pub fn dq_trimmed(&self) -> Vec<f64> {
        project_out_unchecked(&self.dq(), self.removed())
    }

    fn learned_terms(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.gamma).map(|(a, g)| a * g).collect()
    }

    fn causal_terms(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.gamma)
            .zip(&self.eta)
            .map(|((a, g), e)| e * a * g)
            .collect()
    }

    fn split(&self, terms: &[f64]) -> (f64, f64) {
        let top: f64 = terms[..self.m].iter().sum();
        let rest: f64 = terms[self.m..].iter().sum();
        (top, rest)
    }

    pub fn satisfies(&self, mode: Mode) -> bool {
        let learned: f64 = self.y * self.learned_terms().iter().sum::<f64>();
        let causal: f64 = self.y * self.causal_terms().iter().sum::<f64>();
        match mode {
            Mode::Misclassified => learned < 0.0,
            Mode::CausallyCorrect => causal > 0.0,
            Mode::LearnedCorrect => learned > 0.0,
        }
    }
}

/// Coefficients of `z`, `Δq` and the ratio `η_i = (Δp·e_i)/(Δq·e_i)`.
pub fn decompose(z: &[f64], dq: &[f64], dp: &[f64], basis: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = z.len();
    if dq.len() != d || dp.len() != d {
        return Err(Error::InvalidVector("z, dq and dp must share a dimension".into()));
    }
    linalg::check_orthonormal(basis, d)?;
    let alpha: Vec<f64> = basis.iter().map(|e| dot(z, e)).collect();
    let gamma: Vec<f64> = basis.iter().map(|e| dot(dq, e)).collect();
    let mut eta = Vec::with_capacity(basis.len());
    for (index, (e, &g)) in basis.iter().zip(&gamma).enumerate() {
        if g.abs() <= GAMMA_CUTOFF {
            return Err(Error::EtaUndefined { index, value: g });
        }
        eta.push(dot(dp, e) / g);
    }
    Ok((alpha, gamma, eta))
}

fn report(pre: bool, concl_score: f64, conds: Vec<(&str, bool)>, margins: Vec<(&str, f64)>) -> ConditionReport {
    let mut margins: BTreeMap<String, f64> = margins.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    margins.insert("conclusion".into(), concl_score);
    ConditionReport {
        preconditions_met: pre,
        conclusion_holds: concl_score > 0.0,
        per_condition: conds.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        margins,
    }
}

/// A misclassified `z` is corrected by trimming when the top-m learned score
/// is wrong-signed, the remainder is right-signed, and the top-m part
/// dominates.
pub fn check_prop1(inst: &TheoryInstance) -> ConditionReport {
    let y = inst.y;
    let terms = inst.learned_terms();
    let (top, rest) = inst.split(&terms);
    let score = y * (top + rest);
    let dominance = top.abs() - rest.abs();
    let misclassified = score < -MARGIN;
    let top_wrong = y * top < -MARGIN;
    let rest_right = y * rest > MARGIN;
    let dominates = dominance > MARGIN;
    let conclusion = y * dot(&inst.z_trimmed(), &inst.dq_trimmed());
    report(
        misclassified && top_wrong && rest_right && dominates,
        conclusion,
        vec![
            ("misclassified", misclassified),
            ("top_m_wrong", top_wrong),
            ("rest_right", rest_right),
            ("top_m_dominates", dominates),
        ],
        vec![
            ("misclassified", score),
            ("top_m", y * top),
            ("rest", y * rest),
            ("dominance", dominance),
        ],
    )
}

struct CausalCases {
    correct: bool,
    zero: bool,
    negative: bool,
    dominated: bool,
    total: f64,
    top: f64,
}

fn causal_cases(inst: &TheoryInstance) -> CausalCases {
    let y = inst.y;
    let terms = inst.causal_terms();
    let (top, rest) = inst.split(&terms);
    let total = y * (top + rest);
    let top = y * top;
    CausalCases {
        correct: total > MARGIN,
        zero: top == 0.0,
        negative: top < -MARGIN,
        dominated: top > MARGIN && total - top > MARGIN,
        total,
        top,
    }
}

/// Trimming keeps a causally correct `z` correct under `Δp` when the top-m
/// causal contribution is zero, negative, or positive but smaller than the
/// total.
pub fn check_prop2(inst: &TheoryInstance) -> ConditionReport {
    let c = causal_cases(inst);
    let pre = c.correct && (c.zero || c.negative || c.dominated);
    let conclusion = inst.y * dot(&inst.z_trimmed(), &inst.dp());
    let mut margins = vec![("causal_total", c.total)];
    if !c.zero {
        margins.push(("causal_top_m", c.top));
    }
    if c.dominated {
        margins.push(("causal_gap", c.total - c.top));
    }
    report(
        pre,
        conclusion,
        vec![
            ("causally_correct", c.correct),
            ("case_zero", c.zero),
            ("case_negative", c.negative),
            ("case_dominated", c.dominated),
        ],
        margins,
    )
}

/// A correctly classified `z` stays correct after trimming when the removed
/// part does not help the learned score, or when it does but the instance is
/// causally preserved and the learned and causal remainders agree in sign.
pub fn check_prop3(inst: &TheoryInstance) -> ConditionReport {
    let y = inst.y;
    let learned = inst.learned_terms();
    let (top, rest) = inst.split(&learned);
    let score = y * (top + rest);
    let correct = score > MARGIN;
    let conclusion = y * dot(&inst.z_trimmed(), &inst.dq_trimmed());
    if inst.m == 0 {
        return report(correct, conclusion, vec![("learned_correct", correct)], vec![("learned", score)]);
    }
    let removed = y * top;
    let cond1 = removed < -MARGIN || removed == 0.0;
    let causal = inst.causal_terms();
    let (_, causal_rest) = inst.split(&causal);
    let preserved = check_prop2(inst).preconditions_met;
    let signs_agree = causal_rest.abs() > MARGIN && rest.abs() > MARGIN && causal_rest.signum() == rest.signum();
    let cond2 = removed > MARGIN && preserved && signs_agree;
    let mut margins = vec![("learned", score)];
    if removed != 0.0 {
        margins.push(("removed", removed));
    }
    if cond2 {
        margins.push(("causal_rest", causal_rest));
        margins.push(("learned_rest", rest));
        let c = causal_cases(inst);
        margins.push(("causal_total", c.total));
    }
    report(
        correct && (cond1 || cond2),
        conclusion,
        vec![
            ("learned_correct", correct),
            ("removed_not_helpful", cond1),
            ("causal_preservation", preserved),
            ("remainder_signs_agree", signs_agree),
            ("condition_2", cond2),
        ],
        margins,
    )
}

/// Gaussian coefficients and a random orthonormal basis, conditioned on
/// `mode` by rejection.
pub fn random_instance(rng: &mut Prng, d: usize, m: usize, mode: Mode) -> Result<TheoryInstance> {
    if m == 0 || m >= d {
        return Err(Error::InvalidInput(format!("need 1 <= m < d, got m = {m}, d = {d}")));
    }
    for _ in 0..MAX_REJECTIONS {
        let y = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        let alpha = rng.normal_vec(d);
        let gamma = rng.normal_vec(d);
        let eta = rng.normal_vec(d);
        if gamma.iter().any(|g| g.abs() <= GAMMA_CUTOFF) {
            continue;
        }
        let probe = TheoryInstance {
            d,
            m,
            y,
            basis: Vec::new(),
            alpha,
            gamma,
            eta,
        };
        if !probe.satisfies(mode) {
            continue;
        }
        let basis = linalg::random_orthonormal(rng, d, d)?;
        let basis: Vec<Vec<f64>> = (0..d).map(|j| basis.column(j)).collect();
        return Ok(TheoryInstance { basis, ..probe });
    }
    Err(Error::SamplingExhausted { draws: MAX_REJECTIONS })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum MRule {
    Fixed(usize),
    /// Uniform over `1..d`.
    Uniform,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropositionTally {
    pub sampled: usize,
    pub preconditions_met: usize,
    pub conclusions_held: usize,
    pub violations: usize,
    /// Conclusion held although the (sufficient) preconditions did not.
    pub conclusion_without_preconditions: usize,
    pub example_violation: Option<TheoryInstance>,
}

impl PropositionTally {
    fn record(&mut self, inst: &TheoryInstance, r: &ConditionReport) {
        self.sampled += 1;
        self.preconditions_met += usize::from(r.preconditions_met);
        self.conclusions_held += usize::from(r.conclusion_holds);
        if !r.preconditions_met && r.conclusion_holds {
            self.conclusion_without_preconditions += 1;
        }
        if r.is_violation() {
            self.violations += 1;
            if self.example_violation.is_none() {
                self.example_violation = Some(inst.clone());
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub prop1: PropositionTally,
    pub prop2: PropositionTally,
    pub prop3: PropositionTally,
    /// Largest `|y ẑ·Δq − y ẑ·Δq̂|` seen over all instances.
    pub trim_identity_max_error: f64,
    /// Misclassified instances where the top/rest sign condition held but
    /// dominance did not (should never happen).
    pub dominance_redundancy_failures: usize,
}

impl VerificationSummary {
    pub fn total_violations(&self) -> usize {
        self.prop1.violations + self.prop2.violations + self.prop3.violations
    }
}

fn pick_dims(rng: &mut Prng, d_range: (usize, usize), m_rule: MRule) -> Result<(usize, usize)> {
    let (lo, hi) = d_range;
    if lo < 2 || hi < lo {
        return Err(Error::InvalidInput(format!("invalid dimension range [{lo}, {hi}]")));
    }
    let d = lo + rng.below((hi - lo + 1) as u64) as usize;
    let m = match m_rule {
        MRule::Fixed(m) => m,
        MRule::Uniform => 1 + rng.below((d - 1) as u64) as usize,
    };
    if m == 0 || m >= d {
        return Err(Error::InvalidInput(format!("m = {m} must lie in [1, d) for d = {d}")));
    }
    Ok((d, m))
}

/// Samples `count` instances per proposition and tallies how often the
/// preconditions hold, the conclusions hold, and the implication fails.
pub fn verify_implications(count: usize, d_range: (usize, usize), m_rule: MRule, rng: &mut Prng) -> Result<VerificationSummary> {
    if count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()));
    }
    let mut summary = VerificationSummary::default();
    let plan = [
        (Mode::Misclassified, 0usize),
        (Mode::CausallyCorrect, 1),
        (Mode::LearnedCorrect, 2),
    ];
    for (mode, which) in plan {
        let mut stream = rng.split(which as u64);
        for _ in 0..count {
            let (d, m) = pick_dims(&mut stream, d_range, m_rule)?;
            let inst = random_instance(&mut stream, d, m, mode)?;
            let zt = inst.z_trimmed();
            let err = (inst.y * dot(&zt, &inst.dq()) - inst.y * dot(&zt, &inst.dq_trimmed())).abs();
            summary.trim_identity_max_error = summary.trim_identity_max_error.max(err);
            let r = match mode {
                Mode::Misclassified => {
                    let r = check_prop1(&inst);
                    let c = &r.per_condition;
                    if c["misclassified"] && c["top_m_wrong"] && c["rest_right"] && !c["top_m_dominates"] && r.margins["dominance"].abs() > MARGIN {
                        summary.dominance_redundancy_failures += 1;
                    }
                    r
                }
                Mode::CausallyCorrect => check_prop2(&inst),
                Mode::LearnedCorrect => check_prop3(&inst),
            };
            let tally = match which {
                0 => &mut summary.prop1,
                1 => &mut summary.prop2,
                _ => &mut summary.prop3,
            };
            tally.record(&inst, &r);
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decompose_examples() {
        let basis = linalg::Matrix::identity(2).to_rows();
        let (a, g, e) = decompose(&[3.0, 4.0], &[1.0, -1.0], &[2.0, -3.0], &basis).unwrap();
        assert_eq!(a, vec![3.0, 4.0]);
        assert_eq!(g, vec![1.0, -1.0]);
        assert_eq!(e, vec![2.0, 3.0]);
        assert!(matches!(
            decompose(&[3.0, 4.0], &[1.0, 0.0], &[2.0, -3.0], &basis),
            Err(Error::EtaUndefined { index: 1, .. })
        ));
    }

    #[test]
    fn prop1_examples() {
        let i = TheoryInstance::standard(1.0, 1, vec![-3.0, 2.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop1(&i);
        assert!(r.preconditions_met && r.conclusion_holds);
        assert_eq!(r.margins["conclusion"], 2.0);

        let i = TheoryInstance::standard(1.0, 1, vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop1(&i);
        assert!(!r.preconditions_met && !r.per_condition["misclassified"]);

        let i = TheoryInstance::standard(-1.0, 1, vec![-3.0, 2.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop1(&i);
        assert!(!r.preconditions_met);
        assert!(!r.per_condition["top_m_wrong"]);
        assert_eq!(r.margins["top_m"], 3.0);
    }

    #[test]
    fn prop2_examples() {
        let i = TheoryInstance::standard(1.0, 1, vec![-3.0, 2.0], vec![1.0, 1.0], vec![0.0, 1.0]).unwrap();
        let r = check_prop2(&i);
        assert!(r.per_condition["case_zero"] && r.preconditions_met);
        assert_eq!(r.margins["conclusion"], 2.0);

        let i = TheoryInstance::standard(1.0, 1, vec![-3.0, 2.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop2(&i);
        // y z·Δp = -1: not causally correct, although case (b) holds.
        assert!(r.per_condition["case_negative"]);
        assert!(r.conclusion_holds);
        assert_eq!(r.margins["conclusion"], 2.0);

        let i = TheoryInstance::standard(1.0, 1, vec![1.0, 2.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop2(&i);
        assert!(r.per_condition["case_dominated"] && r.preconditions_met && r.conclusion_holds);
    }

    #[test]
    fn prop3_examples() {
        let i = TheoryInstance::standard(1.0, 1, vec![-1.0, 2.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop3(&i);
        assert!(r.per_condition["removed_not_helpful"] && r.preconditions_met && r.conclusion_holds);
        assert_eq!(r.margins["conclusion"], 2.0);

        let i = TheoryInstance::standard(1.0, 1, vec![1.0, 2.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop3(&i);
        assert!(r.per_condition["condition_2"] && r.preconditions_met && r.conclusion_holds);
        assert_eq!(r.margins["causal_rest"], 2.0);
        assert_eq!(r.margins["learned_rest"], 2.0);

        let i = TheoryInstance::standard(1.0, 0, vec![1.0, 2.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = check_prop3(&i);
        assert!(r.preconditions_met && r.conclusion_holds);
        assert_eq!(i.z_trimmed(), i.z());
    }

    #[test]
    fn sampler_respects_mode_and_seed() {
        for mode in [Mode::Misclassified, Mode::CausallyCorrect, Mode::LearnedCorrect] {
            let a = random_instance(&mut Prng::new(5), 6, 2, mode).unwrap();
            let b = random_instance(&mut Prng::new(5), 6, 2, mode).unwrap();
            assert_eq!(a, b);
            assert!(a.satisfies(mode));
            assert!(a.gamma.iter().all(|g| g.abs() > GAMMA_CUTOFF));
        }
        assert!(random_instance(&mut Prng::new(5), 3, 3, Mode::Misclassified).is_err());
    }

    #[test]
    fn small_verification_run_counts() {
        let s = verify_implications(300, (4, 8), MRule::Uniform, &mut Prng::new(1)).unwrap();
        for t in [&s.prop1, &s.prop2, &s.prop3] {
            assert_eq!(t.sampled, 300);
            assert!(t.preconditions_met <= t.sampled);
            assert_eq!(t.violations, 0);
        }
    }
}
