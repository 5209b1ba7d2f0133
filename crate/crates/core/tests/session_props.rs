use proptest::prelude::*;

use tact::linalg::{self, Matrix};
use tact::model::logits;
use tact::session::{tact_predict, trim_sample};
use tact::theory::{random_instance, Mode};
use tact::trim::{identify_noncausal, trim_prototypes, trim_representation};
use tact::{Model, Observation, Prng, Result, TactConfig, TactSession};

fn identity_model(prototypes: Vec<Vec<f64>>) -> Model {
    let d = prototypes[0].len();
    Model::new(Matrix::identity(d), vec![0.0; d], prototypes).unwrap()
}

fn random_model(rng: &mut Prng, d_obs: usize, d: usize, c: usize) -> Model {
    let w = Matrix::new(d, d_obs, rng.normal_vec(d * d_obs)).unwrap();
    let prototypes = (0..c).map(|_| rng.normal_vec(d)).collect();
    Model::new(w, rng.normal_vec(d), prototypes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn logits_are_linear_in_prototypes(sets in 1usize..8, c in 1usize..5, d in 1usize..10, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let z = rng.normal_vec(d);
        let collections: Vec<Vec<Vec<f64>>> = (0..sets)
            .map(|_| (0..c).map(|_| rng.normal_vec(d)).collect())
            .collect();
        let mut mean = vec![vec![0.0; d]; c];
        for set in &collections {
            for (m, q) in mean.iter_mut().zip(set) {
                linalg::axpy(1.0 / sets as f64, q, m);
            }
        }
        let lhs = logits(&mean, &z).unwrap();
        let mut rhs = vec![0.0; c];
        for set in &collections {
            let l = logits(set, &z).unwrap();
            linalg::axpy(1.0 / sets as f64, &l, &mut rhs);
        }
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn running_prototypes_are_prefix_means(k in 1usize..50, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let d = 3;
        let mut s = TactSession::new(TactConfig { n: 2, m: 1, tau: 0.0, include_current_batch: true },
            &identity_model(vec![vec![0.0; d]; 2])).unwrap();
        let mut sum = vec![vec![0.0; d]; 2];
        for _ in 0..k {
            let batch: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(d)).collect();
            for (a, q) in sum.iter_mut().zip(&batch) {
                linalg::axpy(1.0, q, a);
            }
            s.update_moving_average(&batch).unwrap();
        }
        for (r, a) in s.running_prototypes.iter().zip(&sum) {
            for (x, y) in r.iter().zip(a) {
                prop_assert!((x - y / k as f64).abs() <= 1e-9);
            }
        }
        prop_assert_eq!(s.batch_index, k);
    }

    #[test]
    fn trimmed_boundary_identity(d in 2usize..10, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let m = 1 + rng.below((d - 1) as u64) as usize;
        let inst = random_instance(&mut rng, d, m, Mode::Misclassified).unwrap();
        let zt = inst.z_trimmed();
        let lhs = inst.y * linalg::dot(&zt, &inst.dq());
        let rhs = inst.y * linalg::dot(&zt, &inst.dq_trimmed());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn identical_variants_skip_trimming(d in 2usize..8, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let model = random_model(&mut rng, d, d, 2);
        let x = rng.normal_vec(d);
        let cfg = TactConfig { n: 5, m: 1, tau: 0.0, include_current_batch: true };
        let t = trim_sample(&model, &x, &vec![x.clone(); 5], &cfg).unwrap();
        prop_assert!(t.directions.degenerate);
        prop_assert!(!t.gated);
        prop_assert_eq!(t.z_trimmed, t.z);
    }
}

/// Recomputes a batch by composing the public per-sample operations and
/// compares with the session.
#[test]
fn process_batch_matches_composition() {
    let mut rng = Prng::new(7);
    let (d_obs, d, c, n) = (6, 5, 3, 8);
    let model = random_model(&mut rng, d_obs, d, c);
    let cfg = TactConfig { n, m: 2, tau: 0.0, include_current_batch: true };
    let mut session = TactSession::new(cfg.clone(), &model).unwrap();
    let mut expected_running = model.prototypes.clone();

    for b in 0..4 {
        let batch: Vec<Observation> = (0..5)
            .map(|_| Observation { x: rng.normal_vec(d_obs), group: 0 })
            .collect();
        let augmented: Vec<Vec<Vec<f64>>> = batch
            .iter()
            .map(|o| (0..n).map(|_| o.x.iter().map(|v| v + 0.3 * rng.normal()).collect()).collect())
            .collect();

        let mut mean = vec![vec![0.0; d]; c];
        let mut zs = Vec::new();
        for (o, aug) in batch.iter().zip(&augmented) {
            let z = model.extract(&o.x).unwrap();
            let reps: Vec<Vec<f64>> = aug.iter().map(|v| model.extract(v).unwrap()).collect();
            let dirs = identify_noncausal(&z, &reps, cfg.m).unwrap();
            zs.push(trim_representation(&z, &dirs).unwrap());
            for (acc, q) in mean.iter_mut().zip(trim_prototypes(&model.prototypes, &dirs).unwrap()) {
                linalg::axpy(1.0 / batch.len() as f64, &q, acc);
            }
        }
        let i = (b + 1) as f64;
        for (r, q) in expected_running.iter_mut().zip(&mean) {
            for (x, y) in r.iter_mut().zip(q) {
                *x = (i - 1.0) / i * *x + y / i;
            }
        }

        let mut idx = 0;
        let mut augmenter = |_: &Observation| -> Result<Vec<Vec<f64>>> {
            idx += 1;
            Ok(augmented[idx - 1].clone())
        };
        let (preds, report) = session.process_batch(&model, &batch, &mut augmenter).unwrap();
        assert_eq!(report.gate_pass_count, batch.len());
        for (r, e) in session.running_prototypes.iter().zip(&expected_running) {
            for (x, y) in r.iter().zip(e) {
                assert!((x - y).abs() <= 1e-12, "batch {b}: {x} vs {y}");
            }
        }
        for (p, z) in preds.iter().zip(&zs) {
            let expected = tact_predict(z, &expected_running).unwrap();
            assert_eq!(p.class, expected.class);
        }
    }
}

#[test]
fn gate_closed_keeps_prototypes_and_predicts_plainly() {
    let mut rng = Prng::new(3);
    let model = random_model(&mut rng, 4, 4, 2);
    let cfg = TactConfig { n: 6, m: 1, tau: 1.0, include_current_batch: true };
    let mut session = TactSession::new(cfg, &model).unwrap();
    let batch: Vec<Observation> = (0..3).map(|_| Observation { x: rng.normal_vec(4), group: 0 }).collect();
    let mut noise = Prng::new(4);
    let mut augmenter = |o: &Observation| -> Result<Vec<Vec<f64>>> {
        Ok((0..6).map(|_| o.x.iter().map(|v| v + 0.1 * noise.normal()).collect()).collect())
    };
    let (preds, report) = session.process_batch(&model, &batch, &mut augmenter).unwrap();
    assert_eq!(report.gate_pass_count, 0);
    assert_eq!(report.m_effective_histogram[0], 3);
    assert_eq!(session.batch_index, 0);
    assert_eq!(session.batches_seen, 1);
    assert_eq!(session.running_prototypes, model.prototypes);
    for (p, o) in preds.iter().zip(&batch) {
        assert_eq!(p.class, model.predict(&o.x).unwrap().0);
    }
}
