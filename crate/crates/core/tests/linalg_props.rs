use proptest::prelude::*;

use tact::linalg::{self, pca_direct, pca_gram, project_out, sym_eig, Matrix};
use tact::Prng;

fn symmetric(d: usize, seed: u64) -> Matrix {
    let mut rng = Prng::new(seed);
    let mut s = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = rng.normal();
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

fn samples(k: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = Prng::new(seed);
    let rows: Vec<Vec<f64>> = (0..k).map(|_| rng.normal_vec(d)).collect();
    Matrix::from_rows(&rows).unwrap()
}

fn gram_error(q: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in q.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((linalg::dot(a, b) - target).abs());
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eigen_decomposition_invariants(d in 1usize..24, seed in any::<u64>()) {
        let s = symmetric(d, seed);
        let e = sym_eig(&s).unwrap();
        prop_assert!(gram_error(&e.vectors) <= 1e-8);
        for w in e.values.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        let mut recon = Matrix::zeros(d, d);
        for (lambda, v) in e.values.iter().zip(&e.vectors) {
            for i in 0..d {
                for j in 0..d {
                    recon[(i, j)] += lambda * v[i] * v[j];
                }
            }
        }
        let mut err = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                err = err.max((recon[(i, j)] - s[(i, j)]).abs());
            }
        }
        prop_assert!(err <= 1e-8 * (1.0 + s.inf_norm()));
        let trace: f64 = e.values.iter().sum();
        prop_assert!((trace - s.trace()).abs() <= 1e-9 * (1.0 + s.frobenius()));
    }

    #[test]
    fn gram_and_direct_paths_agree(k in 2usize..12, d in 12usize..40, seed in any::<u64>()) {
        let x = samples(k, d, seed);
        let a = pca_direct(&x).unwrap();
        let b = pca_gram(&x).unwrap();
        prop_assert!((a.total_variance - b.total_variance).abs() <= 1e-6 * (1.0 + a.total_variance));
        let eps = linalg::degeneracy_epsilon(&x);
        let usable = a.usable(eps).min(b.usable(eps));
        for i in 0..usable {
            prop_assert!((a.directions.values[i] - b.directions.values[i]).abs() <= 1e-6 * (1.0 + a.directions.values[0]));
        }
        // Compare directions only where the spectrum is well separated.
        for i in 0..usable {
            let vals = &a.directions.values;
            let gap_prev = if i == 0 { f64::INFINITY } else { vals[i - 1] - vals[i] };
            let gap_next = if i + 1 < vals.len() { vals[i] - vals[i + 1] } else { f64::INFINITY };
            if gap_prev.min(gap_next) > 1e-3 * (1.0 + vals[0]) {
                let c = linalg::dot(&a.directions.vectors[i], &b.directions.vectors[i]).abs();
                prop_assert!((1.0 - c) <= 1e-6, "direction {i}: |cos| = {c}");
            }
        }
    }

    #[test]
    fn trimming_identities(d in 2usize..16, seed in any::<u64>(), m_frac in 0.0f64..1.0) {
        let mut rng = Prng::new(seed);
        let m = 1 + ((d - 1) as f64 * m_frac) as usize;
        let basis = linalg::random_orthonormal(&mut rng, d, d).unwrap();
        let dirs: Vec<Vec<f64>> = (0..m).map(|j| basis.column(j)).collect();
        let z = rng.normal_vec(d);
        let t = project_out(&z, &dirs).unwrap();
        for e in &dirs {
            prop_assert!(linalg::dot(&t, e).abs() <= 1e-9 * (1.0 + linalg::norm(&z)));
        }
        let tt = project_out(&t, &dirs).unwrap();
        prop_assert!(t.iter().zip(&tt).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + linalg::norm(&z))));
        let removed: f64 = dirs.iter().map(|e| linalg::dot(&z, e).powi(2)).sum();
        let lhs = linalg::norm(&z).powi(2);
        let rhs = linalg::norm(&t).powi(2) + removed;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs));
    }
}
