//! Dense real matrices, a one-sided Jacobi SVD, and the effective rank of a
//! singular spectrum.

use crate::error::{MoirError, Result};

/// Sweep cap for the Jacobi iteration. Small dense matrices converge in
/// well under 20 sweeps; hitting the cap means the input is pathological.
pub const MAX_JACOBI_SWEEPS: usize = 80;

/// Singular values at or below this fraction of the largest one do not count
/// towards the nonzero rank.
pub const RANK_NOISE_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MoirError::input(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(MoirError::input(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MoirError::input(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(MoirError::input("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a column-major buffer.
    fn from_col_major(rows: usize, cols: usize, cm: &[f64]) -> Self {
        let mut values = vec![0.0; rows * cols];
        for j in 0..cols {
            for i in 0..rows {
                values[i * cols + j] = cm[j * rows + i];
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.values[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(MoirError::input(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(&self.values)
    }
}

/// Frobenius (Euclidean) norm of a flat buffer, scaled to avoid overflow.
pub fn frobenius_norm(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v / scale).powi(2)).sum();
    scale * ss.sqrt()
}

/// Thin SVD factors: `left` is rows x r, `right` is cols x r with the right
/// singular vectors as columns, and `singular` is sorted descending.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub left: Matrix,
    pub singular: Vec<f64>,
    pub right: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    /// `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n, r) = (self.left.rows(), self.right.rows(), self.rank());
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.left.get(i, k) * self.singular[k] * self.right.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Returns `r = min(rows, cols)` singular triplets. Left singular vectors for
/// numerically zero singular values are completed to an orthonormal set.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if m.values.iter().any(|v| !v.is_finite()) {
        return Err(MoirError::input("svd input contains non-finite entries"));
    }
    if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(SvdFactors {
            left: t.right,
            singular: t.singular,
            right: t.left,
        })
    }
}

fn svd_tall(a: &Matrix) -> Result<SvdFactors> {
    if a.rows <= a.cols + a.cols / 2 {
        return jacobi_svd(a);
    }
    // Tall input: factor A = QR with Householder reflections, run Jacobi on
    // the small triangular factor, then lift its left vectors through Q.
    let (m, n) = (a.rows, a.cols);
    let mut r = a.values.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let norm = frobenius_norm(&(k..m).map(|i| r[i * n + k]).collect::<Vec<_>>());
        let mut v: Vec<f64> = (k..m).map(|i| r[i * n + k]).collect();
        if norm > 0.0 {
            v[0] += if v[0] >= 0.0 { norm } else { -norm };
            let vn = frobenius_norm(&v);
            v.iter_mut().for_each(|x| *x /= vn);
            for j in k..n {
                let dot: f64 = (k..m).map(|i| v[i - k] * r[i * n + j]).sum();
                for i in k..m {
                    r[i * n + j] -= 2.0 * dot * v[i - k];
                }
            }
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        reflectors.push(v);
    }
    let mut tri = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            tri.set(i, j, r[i * n + j]);
        }
    }
    let small = jacobi_svd(&tri)?;
    // Q [U_r; 0] applied right to left.
    let mut u = vec![0.0; m * n];
    for i in 0..n {
        u[i * n..(i + 1) * n].copy_from_slice(small.left.row(i));
    }
    for (k, v) in reflectors.iter().enumerate().rev() {
        for j in 0..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * u[i * n + j]).sum();
            if dot != 0.0 {
                for i in k..m {
                    u[i * n + j] -= 2.0 * dot * v[i - k];
                }
            }
        }
    }
    Ok(SvdFactors {
        left: Matrix {
            rows: m,
            cols: n,
            values: u,
        },
        singular: small.singular,
        right: small.right,
    })
}

fn jacobi_svd(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = (a.rows, a.cols);
    // Column-major working copies: columns of `w` get orthogonalised, `v`
    // accumulates the rotations.
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = a.get(i, j);
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let tol = f64::EPSILON * (m as f64).sqrt();
    let mut converged = n == 1;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &w[p * m..(p + 1) * m];
                    let cq = &w[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, m, p, q, c, s);
                rotate_columns(&mut v, n, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MoirError::NumericalFailure(format!(
            "jacobi svd did not converge within {MAX_JACOBI_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = (0..n).map(|j| frobenius_norm(&w[j * m..(j + 1) * m])).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    let mut u_cm = vec![0.0; m * n];
    let mut v_cm = vec![0.0; n * n];
    let mut singular = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        singular.push(s);
        v_cm[k * n..(k + 1) * n].copy_from_slice(&v[j * n..(j + 1) * n]);
        if s > 0.0 && s > sigma_max * 1e-14 {
            for i in 0..m {
                u_cm[k * m + i] = w[j * m + i] / s;
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u_cm, m, n, &missing)?;

    Ok(SvdFactors {
        left: Matrix::from_col_major(m, n, &u_cm),
        singular,
        right: Matrix::from_col_major(n, n, &v_cm),
    })
}

fn rotate_columns(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = buf.split_at_mut(q * len);
    let cp = &mut lo[p * len..(p + 1) * len];
    let cq = &mut hi[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed columns of a column-major m x n buffer with unit vectors
/// orthogonal to every other column.
fn complete_orthonormal(u: &mut [f64], m: usize, n: usize, missing: &[usize]) -> Result<()> {
    let mut filled: Vec<bool> = vec![true; n];
    for &k in missing {
        filled[k] = false;
    }
    for &k in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _ in 0..2 {
                for j in (0..n).filter(|&j| filled[j]) {
                    let col = &u[j * m..(j + 1) * m];
                    let dot: f64 = col.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (c, a) in cand.iter_mut().zip(col) {
                        *c -= dot * a;
                    }
                }
            }
            let norm = frobenius_norm(&cand);
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("m >= 1");
        if norm < 1e-8 {
            return Err(MoirError::NumericalFailure(
                "could not complete orthonormal left basis".into(),
            ));
        }
        for i in 0..m {
            u[k * m + i] = cand[i] / norm;
        }
        filled[k] = true;
    }
    Ok(())
}

/// Effective rank: `exp` of the Shannon entropy of the singular values
/// normalised to sum to one, with `0 ln 0 = 0`.
pub fn effective_rank(singular: &[f64]) -> Result<f64> {
    if singular.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(MoirError::input(
            "singular values must be finite and nonnegative",
        ));
    }
    let top = singular.iter().fold(0.0_f64, |m, s| m.max(*s));
    if top == 0.0 {
        return Err(MoirError::DegenerateSpectrum);
    }
    let floor = top * RANK_NOISE_FLOOR;
    let kept = || singular.iter().copied().filter(move |&s| s > floor);
    let count = kept().count() as f64;
    // A flat spectrum has entropy ln(count); skip the exp/ln round trip.
    if kept().all(|s| s == top) {
        return Ok(count);
    }
    let total: f64 = kept().sum();
    let entropy: f64 = kept()
        .map(|s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp().clamp(1.0, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, values).unwrap()
    }

    fn max_orthonormality_error(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q).unwrap();
        let mut worst = 0.0_f64;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.singular, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_with_zero() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let f = svd(&m).unwrap();
        assert_eq!(f.singular, vec![3.0, 0.0]);
        assert!(max_orthonormality_error(&f.left) < 1e-12);
        assert!(max_orthonormality_error(&f.right) < 1e-12);
    }

    #[test]
    fn random_5x4_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 5, 4);
        let f = svd(&m).unwrap();
        assert_eq!(f.rank(), 4);
        let rec = f.reconstruct();
        let diff: Vec<f64> = rec.values().iter().zip(m.values()).map(|(a, b)| a - b).collect();
        assert!(frobenius_norm(&diff) / m.frobenius_norm() <= 1e-8);
    }

    #[test]
    fn tall_matrices_take_the_qr_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (rows, cols) in [(96, 32), (40, 3), (17, 1)] {
            let m = random_matrix(&mut rng, rows, cols);
            let f = svd(&m).unwrap();
            let rec = f.reconstruct();
            let diff: Vec<f64> = rec.values().iter().zip(m.values()).map(|(a, b)| a - b).collect();
            assert!(frobenius_norm(&diff) / m.frobenius_norm() <= 1e-12);
            assert!(max_orthonormality_error(&f.left) < 1e-12);
            assert!(max_orthonormality_error(&f.right) < 1e-12);
        }
        // Rank-deficient tall input still gets an orthonormal left basis.
        let f = svd(&Matrix::from_rows(&vec![vec![1.0, -2.0]; 9]).unwrap()).unwrap();
        assert!(f.singular[1] < 1e-12);
        assert!(max_orthonormality_error(&f.left) < 1e-10);
    }

    #[test]
    fn wide_matrix_uses_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 3, 7);
        let f = svd(&m).unwrap();
        assert_eq!((f.left.rows(), f.left.cols()), (3, 3));
        assert_eq!((f.right.rows(), f.right.cols()), (7, 3));
        assert!(max_orthonormality_error(&f.right) < 1e-8);
    }

    #[test]
    fn rank_deficient_left_basis_is_completed() {
        // Every row identical: rank one.
        let m = Matrix::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        let f = svd(&m).unwrap();
        assert!(f.singular[1] < 1e-12 * f.singular[0]);
        assert!(max_orthonormality_error(&f.left) < 1e-8);
    }

    #[test]
    fn zero_matrix_is_fine() {
        let f = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(f.singular, vec![0.0, 0.0]);
        assert!(max_orthonormality_error(&f.left) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(MoirError::InvalidInput(_))
        ));
        let bad = Matrix {
            rows: 1,
            cols: 1,
            values: vec![f64::INFINITY],
        };
        assert!(matches!(svd(&bad), Err(MoirError::InvalidInput(_))));
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[1.0, 1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(effective_rank(&[5.0, 0.0, 0.0]).unwrap(), 1.0);
        // exp(-(2/3)ln(2/3) - (1/3)ln(1/3))
        let oracle = (-(2.0_f64 / 3.0) * (2.0_f64 / 3.0).ln() - (1.0_f64 / 3.0) * (1.0_f64 / 3.0).ln()).exp();
        assert!((effective_rank(&[2.0, 1.0]).unwrap() - oracle).abs() < 1e-14);
        assert!((oracle - 1.88988).abs() < 1e-4);
    }

    #[test]
    fn effective_rank_rejects_zero_spectrum() {
        assert!(matches!(
            effective_rank(&[0.0, 0.0]),
            Err(MoirError::DegenerateSpectrum)
        ));
    }

    #[test]
    fn noise_floor_does_not_count() {
        let r = effective_rank(&[1.0, 1e-14]).unwrap();
        assert_eq!(r, 1.0);
    }
}
