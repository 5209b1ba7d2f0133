//! Non-causal direction identification and causal trimming.
//!
//! The representation of a test sample and those of its augmented variants
//! are stacked and decomposed with PCA; the top-m directions of variance are
//! treated as non-causal and projected out of both the representation and the
//! class prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, degeneracy_epsilon, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimDirections {
    pub dirs: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub total_variance: f64,
    pub degenerate: bool,
}

impl TrimDirections {
    pub fn none() -> Self {
        TrimDirections {
            dirs: Vec::new(),
            variances: Vec::new(),
            total_variance: 0.0,
            degenerate: true,
        }
    }

    /// Fraction of the total variance carried by the retained directions.
    pub fn top_fraction(&self) -> Option<f64> {
        if self.degenerate || self.total_variance <= 0.0 {
            None
        } else {
            Some(self.variances.iter().sum::<f64>() / self.total_variance)
        }
    }
}

/// Top-`m` principal directions of the stack `[z; variants]`. Directions with
/// variance at or below the degeneracy threshold are never returned, so fewer
/// than `m` may come back.
pub fn identify_noncausal(z: &[f64], variants: &[Vec<f64>], m: usize) -> Result<TrimDirections> {
    if m == 0 {
        return Err(Error::InvalidInput("trim count m must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(variants.len() + 1);
    rows.push(z.to_vec());
    rows.extend(variants.iter().cloned());
    let stack = Matrix::from_rows(&rows)?;
    let eps = degeneracy_epsilon(&stack);
    let pca = linalg::pca_from_samples(&stack)?;
    if pca.degenerate {
        return Ok(TrimDirections {
            total_variance: pca.total_variance,
            ..TrimDirections::none()
        });
    }
    let keep = pca.usable(eps).min(m);
    Ok(TrimDirections {
        dirs: pca.directions.vectors[..keep].to_vec(),
        variances: pca.directions.values[..keep].to_vec(),
        total_variance: pca.total_variance,
        degenerate: false,
    })
}

/// `z - Σ (z·e_i) e_i`; identity when the directions are degenerate.
pub fn trim_representation(z: &[f64], dirs: &TrimDirections) -> Result<Vec<f64>> {
    if dirs.degenerate {
        return Ok(z.to_vec());
    }
    linalg::project_out(z, &dirs.dirs)
}

pub fn trim_prototypes(prototypes: &[Vec<f64>], dirs: &TrimDirections) -> Result<Vec<Vec<f64>>> {
    prototypes
        .iter()
        .map(|q| trim_representation(q, dirs))
        .collect()
}

/// Trim only when the retained directions explain at least `tau` of the
/// total variance.
pub fn variance_gate(dirs: &TrimDirections, tau: f64) -> bool {
    match dirs.top_fraction() {
        Some(f) => f >= tau,
        None => false,
    }
}
