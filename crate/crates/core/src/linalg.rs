//! Small dense linear algebra: symmetric eigendecomposition by cyclic Jacobi
//! rotations, PCA over a stack of row vectors, and orthogonal projection
//! removal.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; `Matrix` is a row-major buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;

/// Jacobi stops once the off-diagonal Frobenius norm falls below
/// `JACOBI_TOL * (1 + ‖S‖_F)`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Orthonormality tolerance accepted by [`project_out`].
pub const BASIS_TOL: f64 = 1e-8;
/// Relative tolerance used to decide that two coordinates tie in magnitude
/// when fixing eigenvector signs.
const SIGN_TIE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::InvalidMatrix(format!(
                "row {bad} has length {} but row 0 has length {cols}",
                rows[bad].len()
            )));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            entries: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        let m = Matrix { rows, cols, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows * self.cols != self.entries.len() {
            return Err(Error::InvalidMatrix(format!(
                "{}x{} matrix carries {} entries",
                self.rows,
                self.cols,
                self.entries.len()
            )));
        }
        if self.entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::InvalidVector(format!(
                "expected length {}, got {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidMatrix(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.entries[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.entries[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidVector("non-finite entry".into()))
    }
}

/// Eigenpairs of a symmetric matrix, values sorted non-increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Flips `v` so its largest-magnitude coordinate is positive. Coordinates
/// within a relative `SIGN_TIE_TOL` of the maximum tie, and the lowest index
/// among them decides.
pub fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max * (1.0 - SIGN_TIE_TOL))
        .expect("max attained");
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(s: &Matrix) -> Result<EigenPairs> {
    s.validate()?;
    if s.rows != s.cols {
        return Err(Error::InvalidMatrix(format!(
            "expected a square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    let n = s.rows;
    let scale = s.max_abs();
    let mut a = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let asym = (s[(i, j)] - s[(j, i)]).abs();
            if asym > 1e-9 * scale {
                return Err(Error::InvalidMatrix(format!(
                    "asymmetric at ({i},{j}): |S_ij - S_ji| = {asym:e}"
                )));
            }
            let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }

    let mut v = Matrix::identity(n);
    let tol = JACOBI_TOL * (1.0 + a.frobenius());
    let off_norm = |a: &Matrix| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[(i, j)] * a[(i, j)];
                }
            }
        }
        acc.sqrt()
    };

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                a[(p, p)] -= t * apq;
                a[(q, q)] += t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        let new_kp = c * akp - sn * akq;
                        let new_kq = sn * akp + c * akq;
                        a[(k, p)] = new_kp;
                        a[(p, k)] = new_kp;
                        a[(k, q)] = new_kq;
                        a[(q, k)] = new_kq;
                    }
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let residual = off_norm(&a);
        if residual > tol {
            return Err(Error::ConvergenceFailure {
                sweeps: JACOBI_MAX_SWEEPS,
                residual,
            });
        }
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut col = v.column(j);
            fix_sign(&mut col);
            (a[(j, j)], col)
        })
        .collect();
    // sort_by is stable: equal eigenvalues keep emission order.
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite eigenvalues"));
    let (values, vectors) = pairs.into_iter().unzip();
    Ok(EigenPairs { values, vectors })
}

/// Mean, principal directions and spectrum of a set of row vectors, using the
/// unnormalized scatter matrix `(Z - Z̄)ᵀ(Z - Z̄)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalComponents {
    pub mean: Vec<f64>,
    pub directions: EigenPairs,
    pub total_variance: f64,
    pub degenerate: bool,
}

impl PrincipalComponents {
    /// Directions whose variance exceeds `epsilon`, in order.
    pub fn usable(&self, epsilon: f64) -> usize {
        self.directions
            .values
            .iter()
            .take_while(|&&v| v > epsilon)
            .count()
    }
}

/// `1e-10 * (1 + mean squared row norm)`
pub fn degeneracy_epsilon(rows: &Matrix) -> f64 {
    let k = rows.rows.max(1) as f64;
    let msq: f64 = (0..rows.rows).map(|i| dot(rows.row(i), rows.row(i))).sum::<f64>() / k;
    1e-10 * (1.0 + msq)
}

fn centered(rows: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    rows.validate()?;
    if rows.rows == 0 {
        return Err(Error::EmptyInput("pca needs at least one row"));
    }
    if rows.cols == 0 {
        return Err(Error::InvalidMatrix("rows have dimension 0".into()));
    }
    let k = rows.rows;
    let d = rows.cols;
    let mut mean = vec![0.0; d];
    for i in 0..k {
        axpy(1.0, rows.row(i), &mut mean);
    }
    mean.iter_mut().for_each(|x| *x /= k as f64);
    let mut c = rows.clone();
    for i in 0..k {
        for (x, m) in c.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    Ok((mean, c))
}

fn finish(mean: Vec<f64>, mut pairs: EigenPairs, epsilon: f64) -> PrincipalComponents {
    // The scatter matrix is PSD; negative values are rounding noise.
    pairs.values.iter_mut().for_each(|v| *v = v.max(0.0));
    let total_variance: f64 = pairs.values.iter().sum();
    PrincipalComponents {
        mean,
        directions: pairs,
        total_variance,
        degenerate: total_variance <= epsilon,
    }
}

/// PCA through the d×d scatter matrix. Returns all d eigenpairs.
pub fn pca_direct(rows: &Matrix) -> Result<PrincipalComponents> {
    let eps = degeneracy_epsilon(rows);
    let (mean, c) = centered(rows)?;
    let d = c.cols;
    let mut scatter = Matrix::zeros(d, d);
    for i in 0..c.rows {
        let r = c.row(i);
        for a in 0..d {
            let ra = r[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..d {
                scatter[(a, b)] += ra * r[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            scatter[(a, b)] = scatter[(b, a)];
        }
    }
    Ok(finish(mean, sym_eig(&scatter)?, eps))
}

/// PCA through the k×k Gram matrix of centered rows (snapshot method). Only
/// directions with eigenvalue above the degeneracy epsilon are returned.
pub fn pca_gram(rows: &Matrix) -> Result<PrincipalComponents> {
    let eps = degeneracy_epsilon(rows);
    let (mean, c) = centered(rows)?;
    let k = c.rows;
    let mut gram = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let g = dot(c.row(i), c.row(j));
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let eig = sym_eig(&gram)?;
    let mut values = Vec::new();
    let mut vectors = Vec::new();
    for (lambda, u) in eig.values.iter().zip(&eig.vectors) {
        if *lambda <= eps {
            continue;
        }
        let mut dir = vec![0.0; c.cols];
        for (i, ui) in u.iter().enumerate() {
            axpy(*ui, c.row(i), &mut dir);
        }
        let len = norm(&dir);
        if len == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|x| *x /= len);
        fix_sign(&mut dir);
        values.push(*lambda);
        vectors.push(dir);
    }
    Ok(finish(mean, EigenPairs { values, vectors }, eps))
}

/// PCA of `rows` (k samples of dimension d). Uses the Gram path when the
/// centered rows span fewer than d dimensions (k - 1 < d).
pub fn pca_from_samples(rows: &Matrix) -> Result<PrincipalComponents> {
    if rows.rows == 0 {
        return Err(Error::EmptyInput("pca needs at least one row"));
    }
    if rows.rows - 1 < rows.cols {
        pca_gram(rows)
    } else {
        pca_direct(rows)
    }
}

pub fn check_orthonormal(dirs: &[Vec<f64>], dim: usize) -> Result<()> {
    for (i, e) in dirs.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::InvalidVector(format!(
                "direction {i} has length {}, expected {dim}",
                e.len()
            )));
        }
        let n = norm(e);
        if (n - 1.0).abs() > BASIS_TOL {
            return Err(Error::InvalidBasis(format!("direction {i} has norm {n}")));
        }
        for (j, f) in dirs.iter().enumerate().take(i) {
            let c = dot(e, f);
            if c.abs() > BASIS_TOL {
                return Err(Error::InvalidBasis(format!(
                    "directions {j} and {i} have inner product {c:e}"
                )));
            }
        }
    }
    Ok(())
}

/// `v - Σ (v·e_i) e_i` for orthonormal `dirs`.
pub fn project_out(v: &[f64], dirs: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_orthonormal(dirs, v.len())?;
    Ok(project_out_unchecked(v, dirs))
}

pub(crate) fn project_out_unchecked(v: &[f64], dirs: &[Vec<f64>]) -> Vec<f64> {
    let coeffs: Vec<f64> = dirs.iter().map(|e| dot(v, e)).collect();
    let mut out = v.to_vec();
    for (c, e) in coeffs.iter().zip(dirs) {
        axpy(-c, e, &mut out);
    }
    out
}

/// Orthonormal `rows × cols` matrix (cols ≤ rows) from the QR factor of a
/// seeded Gaussian matrix, via twice-applied modified Gram–Schmidt.
pub fn random_orthonormal(rng: &mut Prng, rows: usize, cols: usize) -> Result<Matrix> {
    if cols > rows {
        return Err(Error::InvalidMatrix(format!(
            "cannot fit {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = rng.normal_vec(rows);
        for _ in 0..2 {
            for e in &basis {
                let c = dot(&v, e);
                axpy(-c, e, &mut v);
            }
        }
        let n = norm(&v);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut m = Matrix::zeros(rows, cols);
    for (j, e) in basis.iter().enumerate() {
        for (i, x) in e.iter().enumerate() {
            m[(i, j)] = *x;
        }
    }
    Ok(m)
}
