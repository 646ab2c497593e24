//! Dense linear algebra and finite-difference helpers.
//!
//! Factorizations are delegated to `nalgebra`; this module owns the
//! contracts (finite entries, rank detection, symmetric inputs) that the
//! rest of the crate relies on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative singular-value threshold below which a matrix is declared
/// rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("function returned a non-finite value when stepping coordinate {0}")]
    NonFiniteEvaluation(usize),
}

/// Row-major dense real matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    inner: DMatrix<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, NumError> {
        if entries.len() != rows * cols {
            return Err(NumError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        Self::from_dmatrix(DMatrix::from_row_slice(rows, cols, &entries))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            inner: DMatrix::zeros(rows, cols),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            inner: DMatrix::identity(n, n),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self, NumError> {
        Self::from_dmatrix(DMatrix::from_fn(rows, cols, f))
    }

    pub fn from_dmatrix(inner: DMatrix<f64>) -> Result<Self, NumError> {
        for j in 0..inner.ncols() {
            for i in 0..inner.nrows() {
                if !inner[(i, j)].is_finite() {
                    return Err(NumError::NonFiniteEntry { row: i, col: j });
                }
            }
        }
        Ok(Self { inner })
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.inner[(row, col)]
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols()).map(|j| self.inner[(i, j)]).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, NumError> {
        if v.len() != self.cols() {
            return Err(NumError::Dimension(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols()
            )));
        }
        let out = &self.inner * DVector::from_column_slice(v);
        Ok(out.iter().copied().collect())
    }

    pub fn transpose(&self) -> Self {
        Self {
            inner: self.inner.transpose(),
        }
    }

    /// (A + Aᵀ)/2.
    pub fn symmetrized(&self) -> Result<Self, NumError> {
        if self.rows() != self.cols() {
            return Err(NumError::NotSquare {
                rows: self.rows(),
                cols: self.cols(),
            });
        }
        Ok(Self {
            inner: (&self.inner + self.inner.transpose()) * 0.5,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSolution {
    pub solution: Vec<f64>,
    /// ‖Gᵀ(Gx − d)‖₂
    pub normal_residual: f64,
    pub rank_ok: bool,
}

/// Numerical column rank test: smallest singular value against
/// `RANK_TOL` times the largest.
pub fn has_full_column_rank(g: &DenseMatrix) -> bool {
    if g.cols() == 0 {
        return true;
    }
    if g.rows() < g.cols() {
        return false;
    }
    let sv = g.inner.clone().singular_values();
    let max = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    let min = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    max > 0.0 && min > RANK_TOL * max
}

/// Minimizes ‖Gx − d‖₂ through a Householder QR factorization of G.
///
/// Rank deficiency is reported through `rank_ok`; the returned solution in
/// that case is the minimum-norm SVD solution and should not be trusted
/// as unique.
pub fn least_squares_apply(g: &DenseMatrix, d: &[f64]) -> Result<LeastSquaresSolution, NumError> {
    if g.rows() < g.cols() {
        return Err(NumError::Dimension(format!(
            "least squares needs rows >= cols, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    if d.len() != g.rows() {
        return Err(NumError::Dimension(format!(
            "right-hand side of length {} against {} rows",
            d.len(),
            g.rows()
        )));
    }
    let rhs = DVector::from_column_slice(d);
    let rank_ok = has_full_column_rank(g);
    let x = if rank_ok {
        let qr = g.inner.clone().qr();
        let qtd = qr.q().transpose() * &rhs;
        let r = qr.r();
        r.solve_upper_triangular(&qtd)
    } else {
        None
    };
    let x = match x {
        Some(x) => x,
        None => {
            let svd = g.inner.clone().svd(true, true);
            let smax = svd.singular_values.iter().fold(0.0_f64, |m, v| m.max(*v));
            svd.solve(&rhs, (RANK_TOL * smax).max(f64::MIN_POSITIVE))
                .unwrap_or_else(|_| DVector::zeros(g.cols()))
        }
    };
    let resid = &g.inner * &x - &rhs;
    let normal_residual = (g.inner.transpose() * resid).norm();
    Ok(LeastSquaresSolution {
        solution: x.iter().copied().collect(),
        normal_residual,
        rank_ok,
    })
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64, NumError> {
    if a.rows() != a.cols() {
        return Err(NumError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let scale = a.max_abs();
    if scale > 0.0 {
        let asym = (&a.inner - a.inner.transpose()).amax() / scale;
        if asym > 1e-10 {
            return Err(NumError::NotSymmetric(asym));
        }
    }
    let eig = a.inner.clone().symmetric_eigen();
    Ok(eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Default per-coordinate finite-difference step, 1e-4·max(1, |xᵢ|).
pub fn default_steps(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect()
}

fn check_steps(x: &[f64], steps: &[f64]) -> Result<(), NumError> {
    if steps.len() != x.len() {
        return Err(NumError::Dimension(format!(
            "{} steps for {} coordinates",
            steps.len(),
            x.len()
        )));
    }
    if let Some(i) = steps.iter().position(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(NumError::Dimension(format!("step {i} must be positive")));
    }
    Ok(())
}

fn eval_at<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], coord: usize) -> Result<f64, NumError> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumError::NonFiniteEvaluation(coord))
    }
}

/// Central-difference gradient.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], steps: &[f64]) -> Result<Vec<f64>, NumError> {
    check_steps(x, steps)?;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = steps[i];
        probe[i] = x[i] + h;
        let plus = eval_at(&f, &probe, i)?;
        probe[i] = x[i] - h;
        let minus = eval_at(&f, &probe, i)?;
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Second-difference Hessian, symmetrized on output.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], steps: &[f64]) -> Result<DenseMatrix, NumError> {
    check_steps(x, steps)?;
    let n = x.len();
    let center = eval_at(&f, x, 0)?;
    let mut probe = x.to_vec();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let hi = steps[i];
        probe[i] = x[i] + hi;
        let plus = eval_at(&f, &probe, i)?;
        probe[i] = x[i] - hi;
        let minus = eval_at(&f, &probe, i)?;
        probe[i] = x[i];
        h[(i, i)] = (plus - 2.0 * center + minus) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| -> Result<f64, NumError> {
                probe[i] = x[i] + si * hi;
                probe[j] = x[j] + sj * hj;
                let v = eval_at(&f, &probe, i);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            let v = (pp - pm - mp + mm) / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    DenseMatrix::from_dmatrix(h)?.symmetrized()
}

/// Nonnegative least squares, min ‖Ax − b‖₂ subject to x ≥ 0
/// (Lawson–Hanson active-set method).
pub fn nnls(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, NumError> {
    let (m, n) = (a.rows(), a.cols());
    if b.len() != m {
        return Err(NumError::Dimension(format!(
            "right-hand side of length {} against {m} rows",
            b.len()
        )));
    }
    let am = &a.inner;
    let bv = DVector::from_column_slice(b);
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * am.amax().max(1.0) * bv.amax().max(1.0);
    let max_outer = 3 * n + 10;

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let mut z = DVector::zeros(n);
        if idx.is_empty() {
            return z;
        }
        let sub = DMatrix::from_fn(m, idx.len(), |i, k| am[(i, idx[k])]);
        let svd = sub.svd(true, true);
        let smax = svd.singular_values.iter().fold(0.0_f64, |acc, v| acc.max(*v));
        if let Ok(sol) = svd.solve(&bv, (RANK_TOL * smax).max(f64::MIN_POSITIVE)) {
            for (k, &j) in idx.iter().enumerate() {
                z[j] = sol[k];
            }
        }
        z
    };

    for _ in 0..max_outer {
        let w = am.transpose() * (&bv - am * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        passive[t] = true;
        loop {
            let z = solve_passive(&passive);
            let bad: Vec<usize> = (0..n).filter(|&j| passive[j] && z[j] <= 0.0).collect();
            if bad.is_empty() {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &j in &bad {
                let denom = x[j] - z[j];
                if denom > 0.0 {
                    alpha = alpha.min(x[j] / denom);
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x = &x + (z - &x) * alpha;
            for j in 0..n {
                if passive[j] && x[j] <= 1e-15 * x.amax().max(1.0) {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            if !passive.iter().any(|p| *p) {
                break;
            }
        }
    }
    Ok(x.iter().copied().collect())
}

/// Elementwise relative error with a floor of `1e-6·‖reference‖∞` on the
/// denominator.
pub fn max_relative_error(actual: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
    actual
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0_f64, f64::max)
}
