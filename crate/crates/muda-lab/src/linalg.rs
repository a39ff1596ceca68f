//! Dense real linear algebra for feature-covariance analysis: symmetric
//! eigendecomposition (cyclic Jacobi), Frobenius norms, effective rank, and
//! top-k subspace projectors.
//!
//! Everything here is deterministic and single-threaded; matrices are
//! row-major `f64`. Only the C×C covariance path is supported — no general
//! rectangular SVD.

use thiserror::Error;

/// Errors from linear-algebra operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {delta:e} exceeds tolerance")]
    NonSymmetric { i: usize, j: usize, delta: f64 },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("Jacobi sweep budget of {sweeps} exhausted (off-diagonal norm {offdiag:e})")]
    NoConvergence { sweeps: usize, offdiag: f64 },
    #[error("all eigenvalues are zero; effective rank undefined")]
    AllZero,
    #[error("eigenvalue {value:e} below the negative clamp threshold")]
    NegativeEigenvalue { value: f64 },
    #[error("k = {k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },
    #[error("dimension mismatch: {context}")]
    DimMismatch { context: String },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadShape { len: usize, rows: usize, cols: usize },
}

/// Row-major dense real matrix. Carrier for feature matrices and all
/// covariance linear algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Build from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadShape { len: data.len(), rows, cols });
        }
        let m = DenseMatrix { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Build without the finiteness scan. Shape is still enforced.
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        DenseMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul inner dims: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow.iter()) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// Gram matrix of column-sample features: `self * self^T` (C×C for C×n input).
    pub fn gram(&self) -> DenseMatrix {
        let c = self.rows;
        let n = self.cols;
        let mut out = DenseMatrix::zeros(c, c);
        for i in 0..c {
            for j in i..c {
                let mut s = 0.0;
                let ri = &self.data[i * n..(i + 1) * n];
                let rj = &self.data[j * n..(j + 1) * n];
                for k in 0..n {
                    s += ri[k] * rj[k];
                }
                out.data[i * c + j] = s;
                out.data[j * c + i] = s;
            }
        }
        out
    }

    fn check_finite(&self) -> Result<(), LinalgError> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.data[r * self.cols + c].is_finite() {
                    return Err(LinalgError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(())
    }
}

/// Eigendecomposition of a symmetric matrix: eigenvalues sorted descending,
/// eigenvector columns orthonormal and paired with the eigenvalue of the
/// same index.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_REL_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Stops when the off-diagonal Frobenius norm falls below `1e-12 * ||A||_F`,
/// with a budget of 100 sweeps. Output eigenvalues are sorted descending.
pub fn sym_eig(a: &DenseMatrix) -> Result<EigenDecomposition, LinalgError> {
    let n = a.rows();
    if n != a.cols() {
        return Err(LinalgError::NonSquare { rows: a.rows(), cols: a.cols() });
    }
    a.check_finite()?;
    let scale = frobenius_norm(a).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (a.get(i, j) - a.get(j, i)).abs();
            if delta > SYMMETRY_REL_TOL * scale {
                return Err(LinalgError::NonSymmetric { i, j, delta });
            }
        }
    }

    let norm_a = frobenius_norm(a);
    let threshold = 1e-12 * norm_a;
    let mut m = a.clone();
    // Symmetrize exactly so rotations preserve symmetry bit-for-bit.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
    let mut v = DenseMatrix::identity(n);

    let mut converged = n <= 1 || off_diag_norm(&m) <= threshold;
    if !converged {
        for _ in 0..JACOBI_MAX_SWEEPS {
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m.get(p, q);
                    if apq == 0.0 {
                        continue;
                    }
                    let app = m.get(p, p);
                    let aqq = m.get(q, q);
                    // Rotation angle per Numerical Recipes: stable tangent formula.
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    apply_rotation(&mut m, &mut v, p, q, c, s);
                }
            }
            if off_diag_norm(&m) <= threshold {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            offdiag: off_diag_norm(&m),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

fn apply_rotation(m: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m.get(k, p);
        let mkq = m.get(k, q);
        m.set(k, p, c * mkp - s * mkq);
        m.set(k, q, s * mkp + c * mkq);
    }
    for k in 0..n {
        let mpk = m.get(p, k);
        let mqk = m.get(q, k);
        m.set(p, k, c * mpk - s * mqk);
        m.set(q, k, s * mpk + c * mqk);
    }
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

fn off_diag_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let x = m.get(i, j);
                s += x * x;
            }
        }
    }
    s.sqrt()
}

/// Frobenius norm: sqrt of the sum of squared entries.
pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Checked Frobenius norm, rejecting non-finite inputs.
pub fn frobenius_norm_checked(m: &DenseMatrix) -> Result<f64, LinalgError> {
    m.check_finite()?;
    Ok(frobenius_norm(m))
}

/// Negative eigenvalues below this magnitude are treated as exact zeros
/// (covariances are PSD in exact arithmetic).
pub const EIGENVALUE_CLAMP: f64 = 1e-12;

/// Effective rank: exp of the Shannon entropy of the normalized eigenvalue
/// distribution, computed over strictly positive entries. Tiny negatives
/// (>= -1e-12) are clamped to zero.
pub fn effective_rank(eigenvalues: &[f64]) -> Result<f64, LinalgError> {
    let mut clamped = Vec::with_capacity(eigenvalues.len());
    for &lam in eigenvalues {
        if lam < -EIGENVALUE_CLAMP {
            return Err(LinalgError::NegativeEigenvalue { value: lam });
        }
        clamped.push(lam.max(0.0));
    }
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Err(LinalgError::AllZero);
    }
    let mut entropy = 0.0;
    for &lam in &clamped {
        if lam > 0.0 {
            let p = lam / total;
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Orthogonal projector onto the span of the top-k eigenvector columns:
/// `P = U_k * U_k^T`.
pub fn top_k_projector(decomp: &EigenDecomposition, k: usize) -> Result<DenseMatrix, LinalgError> {
    let c = decomp.eigenvectors.rows();
    if k < 1 || k > c {
        return Err(LinalgError::KOutOfRange { k, max: c });
    }
    let mut p = DenseMatrix::zeros(c, c);
    for col in 0..k {
        for i in 0..c {
            let vi = decomp.eigenvectors.get(i, col);
            if vi == 0.0 {
                continue;
            }
            for j in 0..c {
                let x = p.get(i, j) + vi * decomp.eigenvectors.get(j, col);
                p.set(i, j, x);
            }
        }
    }
    Ok(p)
}

/// k for the top-k projector: ceil(effective rank), clamped to [1, C].
pub fn subspace_dim(eigenvalues: &[f64]) -> Result<usize, LinalgError> {
    let er = effective_rank(eigenvalues)?;
    Ok((er.ceil() as usize).clamp(1, eigenvalues.len().max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-2.0..2.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn reconstruction_residual(a: &DenseMatrix, d: &EigenDecomposition) -> f64 {
        let n = a.rows();
        let mut lam = DenseMatrix::zeros(n, n);
        for i in 0..n {
            lam.set(i, i, d.eigenvalues[i]);
        }
        let rec = d.eigenvectors.matmul(&lam).matmul(&d.eigenvectors.transpose());
        let mut diff = rec.clone();
        for i in 0..n * n {
            diff.data_mut()[i] -= a.data()[i];
        }
        frobenius_norm(&diff)
    }

    /// Roots of det(A - xI) = 0 for a symmetric 3x3, via the trigonometric
    /// closed form. Independent of the Jacobi path.
    fn cubic_eigenvalues_3x3(a: &DenseMatrix) -> Vec<f64> {
        assert_eq!(a.rows(), 3);
        let p1 = a.get(0, 1).powi(2) + a.get(0, 2).powi(2) + a.get(1, 2).powi(2);
        let q = (a.get(0, 0) + a.get(1, 1) + a.get(2, 2)) / 3.0;
        let p2 = (a.get(0, 0) - q).powi(2)
            + (a.get(1, 1) - q).powi(2)
            + (a.get(2, 2) - q).powi(2)
            + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = a.clone();
        for i in 0..3 {
            b.set(i, i, b.get(i, i) - q);
        }
        // det(B) / p^3 with B = (A - qI)
        let det = b.get(0, 0) * (b.get(1, 1) * b.get(2, 2) - b.get(1, 2) * b.get(2, 1))
            - b.get(0, 1) * (b.get(1, 0) * b.get(2, 2) - b.get(1, 2) * b.get(2, 0))
            + b.get(0, 2) * (b.get(1, 0) * b.get(2, 1) - b.get(1, 1) * b.get(2, 0));
        let r = (det / 2.0 / p.powi(3)).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        let mut v = vec![e1, e2, e3];
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v
    }

    #[test]
    fn sym_eig_identity() {
        let d = sym_eig(&DenseMatrix::identity(2)).unwrap();
        assert!((d.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((d.eigenvalues[1] - 1.0).abs() < 1e-12);
        // Orthonormality, not fixed vectors: eigenvectors are non-unique here.
        let vtv = d.eigenvectors.transpose().matmul(&d.eigenvectors);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv.get(i, j) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sym_eig_diagonal() {
        let a = DenseMatrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let d = sym_eig(&a).unwrap();
        assert!((d.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((d.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!(d.eigenvectors.get(0, 0).abs() > 1.0 - 1e-8);
        assert!(d.eigenvectors.get(1, 1).abs() > 1.0 - 1e-8);
    }

    #[test]
    fn sym_eig_matches_cubic_oracle() {
        for seed in 0..20 {
            let a = random_symmetric(3, seed);
            let d = sym_eig(&a).unwrap();
            let oracle = cubic_eigenvalues_3x3(&a);
            let scale = frobenius_norm(&a).max(1.0);
            for (got, want) in d.eigenvalues.iter().zip(oracle.iter()) {
                assert!(
                    (got - want).abs() <= 1e-8 * scale,
                    "seed {seed}: {got} vs oracle {want}"
                );
            }
            assert!(reconstruction_residual(&a, &d) <= 1e-7 * scale);
        }
    }

    #[test]
    fn sym_eig_rejects_bad_inputs() {
        let rect = DenseMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&rect), Err(LinalgError::NonSquare { .. })));
        let asym = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(sym_eig(&asym), Err(LinalgError::NonSymmetric { .. })));
        let mut nan = DenseMatrix::zeros(2, 2);
        nan.set(0, 1, f64::NAN);
        nan.set(1, 0, f64::NAN);
        assert!(matches!(sym_eig(&nan), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&DenseMatrix::zeros(3, 3)), 0.0);
        let n = 7;
        assert!((frobenius_norm(&DenseMatrix::identity(n)) - (n as f64).sqrt()).abs() < 1e-12);
        let m = DenseMatrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert!((frobenius_norm(&m) - 5.0).abs() < 1e-12);
        let mut bad = DenseMatrix::zeros(1, 1);
        bad.set(0, 0, f64::INFINITY);
        assert!(matches!(frobenius_norm_checked(&bad), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn effective_rank_cases() {
        assert!((effective_rank(&[1.0, 1.0, 1.0, 1.0, 0.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!((effective_rank(&[7.0]).unwrap() - 1.0).abs() < 1e-12);
        // Frozen from an independent evaluation of exp(-sum p ln p).
        assert!((effective_rank(&[4.0, 2.0, 1.0]).unwrap() - 2.6004900059896596).abs() < 1e-3);
        assert!(matches!(effective_rank(&[0.0, 0.0]), Err(LinalgError::AllZero)));
        // Tiny negatives clamp to zero; larger ones are rejected.
        assert!((effective_rank(&[1.0, -1e-13]).unwrap() - 1.0).abs() < 1e-12);
        assert!(effective_rank(&[1.0, -1e-6]).is_err());
    }

    #[test]
    fn projector_cases() {
        let a = DenseMatrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let d = sym_eig(&a).unwrap();
        let full = top_k_projector(&d, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((full.get(i, j) - want).abs() < 1e-8);
            }
        }
        let p1 = top_k_projector(&d, 1).unwrap();
        assert!((p1.get(0, 0) - 1.0).abs() < 1e-8);
        assert!(p1.get(0, 1).abs() < 1e-8);
        assert!(p1.get(1, 1).abs() < 1e-8);
        assert!(matches!(top_k_projector(&d, 0), Err(LinalgError::KOutOfRange { .. })));
        assert!(matches!(top_k_projector(&d, 3), Err(LinalgError::KOutOfRange { .. })));
    }

    #[test]
    fn projector_idempotent_and_trace_k() {
        let a = random_symmetric(4, 99);
        let d = sym_eig(&a).unwrap();
        for k in 1..=4 {
            let p = top_k_projector(&d, k).unwrap();
            let pp = p.matmul(&p);
            let mut diff = 0.0f64;
            let mut trace = 0.0;
            for i in 0..4 {
                trace += p.get(i, i);
                for j in 0..4 {
                    diff = diff.max((pp.get(i, j) - p.get(i, j)).abs());
                    assert!((p.get(i, j) - p.get(j, i)).abs() < 1e-10);
                }
            }
            assert!(diff < 1e-8, "k={k} idempotency defect {diff}");
            assert!((trace - k as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn projector_nesting() {
        let a = random_symmetric(5, 7);
        let d = sym_eig(&a).unwrap();
        for k1 in 1..4 {
            for k2 in (k1 + 1)..=5 {
                // Random spectra have nonzero gaps almost surely.
                let p1 = top_k_projector(&d, k1).unwrap();
                let p2 = top_k_projector(&d, k2).unwrap();
                let prod = p2.matmul(&p1);
                for i in 0..5 {
                    for j in 0..5 {
                        assert!((prod.get(i, j) - p1.get(i, j)).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn subspace_dim_clamps() {
        assert_eq!(subspace_dim(&[4.0, 2.0, 1.0]).unwrap(), 3); // ceil(2.6005)
        assert_eq!(subspace_dim(&[1.0, 0.0, 0.0]).unwrap(), 1);
        assert_eq!(subspace_dim(&[1.0, 1.0, 1.0]).unwrap(), 3);
    }

    proptest! {
        #[test]
        fn effective_rank_scale_invariant(scale in 1e-6f64..1e6, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..8usize);
            let lam: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0) + 1e-9).collect();
            let scaled: Vec<f64> = lam.iter().map(|x| x * scale).collect();
            let a = effective_rank(&lam).unwrap();
            let b = effective_rank(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * a.max(1.0));
        }

        #[test]
        fn projection_contracts_frobenius(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.gen_range(2..6usize);
            let a = random_symmetric(c, seed.wrapping_mul(31).wrapping_add(1));
            let d = sym_eig(&a).unwrap();
            let k = rng.gen_range(1..=c);
            let p = top_k_projector(&d, k).unwrap();
            let mut m = DenseMatrix::zeros(rng.gen_range(1..5usize), c);
            for i in 0..m.rows() * c {
                m.data_mut()[i] = rng.gen_range(-3.0..3.0);
            }
            let mp = m.matmul(&p);
            prop_assert!(frobenius_norm(&mp) <= frobenius_norm(&m) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn sym_eig_reconstruction(seed in 0u64..150) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let n = rng.gen_range(1..8usize);
            let a = random_symmetric(n, seed);
            let d = sym_eig(&a).unwrap();
            let scale = frobenius_norm(&a).max(1.0);
            prop_assert!(reconstruction_residual(&a, &d) <= 1e-7 * scale);
            for w in d.eigenvalues.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }
    }
}
