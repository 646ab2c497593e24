//! Post-optimal sensitivity of the baseline.
//!
//! At a KKT point the stacked residual
//! `H(x, w; λ) = [∇ₓJ + Σλᵢ∇ₓhᵢ ; λᵢhᵢ]` vanishes. Its Jacobians with
//! respect to x and w give a linear map from an exogenous perturbation δw
//! to a primal shift δx, and `K(δw) = J(x₀+δx, w₀+δw) − J₀` approximates
//! the change in optimal cost. Worst-case `|K|` over a box of
//! perturbations is bounded analytically from a quadratic model of K and
//! estimated by sampling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::baseline_opt::{decision_scales, independent_rows, row_scales, KktPoint, SolveError};
use crate::hvac_model::{self, derivatives_selected, DecisionVector, ExogenousVector, ModelError, RowLayout};
use crate::numkit::{
    default_steps, has_full_column_rank, least_squares_apply, max_relative_error, spectral_norm, DenseMatrix,
    NumError,
};

/// Vertex sweep covers at most this many coordinates exhaustively.
pub const MAX_VERTEX_DIM: usize = 12;
/// Tolerance on analytic-vs-finite-difference Jacobians of H.
pub const JACOBIAN_TOL: f64 = 1e-6;
pub const FD_PROBES: usize = 50;
const SAMPLE_CHUNK: usize = 1024;
const MAX_SKIP_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("unknown mask label `{0}`")]
    UnknownLabel(String),
    #[error("invalid uncertainty specification: {0}")]
    InvalidSpec(String),
    #[error(
        "sensitivity matrix is rank deficient ({0}); the shifted optimum is not unique and \
         parameterized solution families are not supported"
    )]
    RankDeficient(&'static str),
    #[error("KKT residual at the anchor is {0:.3e}, above tolerance")]
    AnchorNotStationary(f64),
    #[error("analytic {block} disagrees with finite differences (max relative error {error:.3e})")]
    DerivativeMismatch { block: &'static str, error: f64 },
    #[error("perturbation is outside the model domain ({0}); try a smaller alpha")]
    ShiftOutOfDomain(String),
    #[error("perturbation exceeds the uncertainty box on coordinate {0}")]
    OutsideBox(usize),
    #[error("non-finite cost change at a finite-difference stencil point")]
    NonFinite,
    #[error("{skipped} of {total} samples left the model domain")]
    TooManySkipped { skipped: usize, total: usize },
}

/// Coordinates of w allowed to vary and the half-widths of the box.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySpec {
    pub labels: Vec<String>,
    pub indices: Vec<usize>,
    pub alpha: f64,
    pub delta: Vec<f64>,
}

/// Expands group names (`c_f`, `Q_zone`, ...) into registry labels.
pub fn expand_mask(w0: &ExogenousVector, mask: &[&str]) -> Result<Vec<String>, SensitivityError> {
    let labels = w0.labels();
    let mut out: Vec<String> = Vec::new();
    for &item in mask {
        if labels.iter().any(|l| l == item) {
            if !out.iter().any(|o| o == item) {
                out.push(item.to_string());
            }
            continue;
        }
        let prefix = format!("{item}_");
        let group: Vec<&String> = labels
            .iter()
            .filter(|l| l.strip_prefix(&prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
            .collect();
        if group.is_empty() {
            return Err(SensitivityError::UnknownLabel(item.to_string()));
        }
        for l in group {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
    }
    Ok(out)
}

impl UncertaintySpec {
    /// Box `Δᵢ = α·|w₀ᵢ|` over the masked coordinates.
    pub fn new(w0: &ExogenousVector, mask: &[&str], alpha: f64) -> Result<Self, SensitivityError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(SensitivityError::InvalidSpec(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        let labels = expand_mask(w0, mask)?;
        let layout = w0.layout();
        let flat = w0.to_flat();
        let indices: Vec<usize> = labels
            .iter()
            .map(|l| layout.index_of(l).expect("expanded labels exist"))
            .collect();
        let delta = indices.iter().map(|&i| alpha * flat[i].abs()).collect();
        Ok(Self {
            labels,
            indices,
            alpha,
            delta,
        })
    }

    /// Replaces the half-width of one masked coordinate.
    pub fn with_delta(mut self, label: &str, value: f64) -> Result<Self, SensitivityError> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(SensitivityError::InvalidSpec(format!("half-width for {label} must be non-negative")));
        }
        let pos = self
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| SensitivityError::UnknownLabel(label.to_string()))?;
        self.delta[pos] = value;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn delta_inf(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, v| m.max(*v))
    }

    /// Full-length exogenous vector with `dw` scattered into the mask.
    pub fn apply(&self, w0: &ExogenousVector, dw: &[f64]) -> ExogenousVector {
        let mut flat = w0.to_flat();
        for (&i, d) in self.indices.iter().zip(dw) {
            flat[i] += d;
        }
        w0.with_flat(&flat)
    }
}

/// How a perturbation is mapped to a primal shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftRoute {
    /// `δx = G⁺(−∇_wH·δw)` with the multipliers frozen at the anchor.
    PseudoInverse,
    /// Joint linearization in `(x, λ)` over the strongly active rows.
    PrimalDual,
}

impl ShiftRoute {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftRoute::PseudoInverse => "pseudo_inverse",
            ShiftRoute::PrimalDual => "primal_dual",
        }
    }
}

impl std::str::FromStr for ShiftRoute {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pseudo_inverse" | "pseudo-inverse" => Ok(ShiftRoute::PseudoInverse),
            "primal_dual" | "primal-dual" => Ok(ShiftRoute::PrimalDual),
            other => Err(format!("unknown shift route `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityOperator {
    pub anchor: KktPoint,
    pub w0: ExogenousVector,
    pub spec: UncertaintySpec,
    /// `∇ₓH`, (m+n)×m.
    pub g: DenseMatrix,
    /// `∇_wH` restricted to the mask, (m+n)×p.
    pub w_jac: DenseMatrix,
    pub rank_ok: bool,
    pub route: ShiftRoute,
    /// `‖H(x₀, w₀; λ)‖` in the scaled residual norms of the KKT check.
    pub anchor_residual: f64,
    pub fd_error_g: f64,
    pub fd_error_w: f64,
    /// Rows held active by the primal-dual route.
    pub strongly_active: Vec<usize>,
    pd_matrix: DenseMatrix,
    pd_rhs: DenseMatrix,
    pd_scale: Vec<f64>,
    /// `δx = shift·δw` for the selected route, m×p.
    shift: DenseMatrix,
}

/// Stacked KKT residual at `(x, w)` with λ frozen.
pub fn kkt_residual(x: &DecisionVector, w: &ExogenousVector, lambda: &[f64]) -> Vec<f64> {
    let d = derivatives_selected(x, w, &[]);
    let m = d.objective.grad_x.len();
    let mut out = d.objective.grad_x.clone();
    for (l, row) in lambda.iter().zip(&d.rows) {
        for j in 0..m {
            out[j] += l * row.grad_x[j];
        }
    }
    out.extend(lambda.iter().zip(&d.rows).map(|(l, row)| l * row.value));
    out
}

fn kkt_jacobians(
    x: &DecisionVector,
    w: &ExogenousVector,
    lambda: &[f64],
    w_idx: &[usize],
) -> Result<(DenseMatrix, DenseMatrix), NumError> {
    let d = derivatives_selected(x, w, w_idx);
    let m = d.objective.grad_x.len();
    let n = d.rows.len();
    let q = w_idx.len();
    let mut g = DMatrix::<f64>::zeros(m + n, m);
    let mut wj = DMatrix::<f64>::zeros(m + n, q);
    for i in 0..m {
        for j in 0..m {
            let mut v = d.objective.hess_xx[i * m + j];
            for (l, row) in lambda.iter().zip(&d.rows) {
                v += l * row.hess_xx[i * m + j];
            }
            g[(i, j)] = v;
        }
        for k in 0..q {
            let mut v = d.objective.hess_xw[i * q + k];
            for (l, row) in lambda.iter().zip(&d.rows) {
                v += l * row.hess_xw[i * q + k];
            }
            wj[(i, k)] = v;
        }
    }
    for (r, (l, row)) in lambda.iter().zip(&d.rows).enumerate() {
        for j in 0..m {
            g[(m + r, j)] = l * row.grad_x[j];
        }
        for k in 0..q {
            wj[(m + r, k)] = l * row.grad_w[k];
        }
    }
    Ok((DenseMatrix::from_dmatrix(g)?, DenseMatrix::from_dmatrix(wj)?))
}

/// Compares `J·v` against finite differences of `f` along `v` for random
/// probe directions scaled by the default per-coordinate steps.
fn probe_jacobian<F>(jac: &DenseMatrix, base: &[f64], f: F, probes: usize, seed: u64) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let steps = default_steps(base);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        let v: Vec<f64> = steps.iter().map(|s| s * rng.random_range(-1.0..=1.0)).collect();
        let at = |t: f64| -> Vec<f64> {
            let p: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a + t * b).collect();
            f(&p)
        };
        let (p1, m1, p2, m2) = (at(0.5), at(-0.5), at(1.0), at(-1.0));
        // Fourth-order central stencil on the steps h/2 and h.
        let fd: Vec<f64> = (0..p1.len())
            .map(|i| (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / 6.0)
            .collect();
        let an = jac.mul_vec(&v).expect("probe dimension matches");
        worst = worst.max(max_relative_error(&an, &fd));
    }
    worst
}

/// Strongly active rows: active with a multiplier clearly above zero,
/// reduced to a subset with linearly independent gradients. The balance
/// pair acts as one equality and is always kept.
fn strongly_active_rows(anchor: &KktPoint, w0: &ExogenousVector) -> Result<Vec<usize>, ModelError> {
    let scales = row_scales(w0)?;
    let sx = decision_scales(w0);
    let j_scale = anchor.j0.abs().max(1.0);
    let layout = RowLayout {
        zones: w0.params.zone_count,
    };
    let mut rows: Vec<usize> = anchor
        .active_set
        .iter()
        .copied()
        .filter(|&r| r != layout.balance_pos() && r != layout.balance_neg())
        .filter(|&r| anchor.lambda[r] * scales[r] / j_scale > 1e-8)
        .collect();
    rows.sort_by(|&a, &b| (anchor.lambda[b] * scales[b]).total_cmp(&(anchor.lambda[a] * scales[a])));
    rows.insert(0, layout.balance_pos());
    let d = derivatives_selected(&anchor.x0, w0, &[]);
    let grads: Vec<(usize, DVector<f64>)> = rows
        .iter()
        .map(|&r| {
            let g = d.rows[r].grad_x.iter().zip(&sx).map(|(a, s)| a * s / scales[r]);
            (r, DVector::from_iterator(sx.len(), g))
        })
        .collect();
    let refs: Vec<(usize, &DVector<f64>)> = grads.iter().map(|(r, g)| (*r, g)).collect();
    let mut chosen = independent_rows(&refs, sx.len());
    chosen.sort_unstable();
    Ok(chosen)
}

impl SensitivityOperator {
    pub fn build(anchor: &KktPoint, w0: &ExogenousVector, spec: &UncertaintySpec) -> Result<Self, SensitivityError> {
        Self::build_with_route(anchor, w0, spec, ShiftRoute::PrimalDual)
    }

    pub fn build_with_route(
        anchor: &KktPoint,
        w0: &ExogenousVector,
        spec: &UncertaintySpec,
        route: ShiftRoute,
    ) -> Result<Self, SensitivityError> {
        let kkt_tol = 1e-6;
        let anchor_residual = anchor.stationarity_residual.max(anchor.complementarity_residual);
        if anchor_residual > kkt_tol {
            return Err(SensitivityError::AnchorNotStationary(anchor_residual));
        }
        let x0 = &anchor.x0;
        let lambda = &anchor.lambda;
        let (g, w_jac) = kkt_jacobians(x0, w0, lambda, &spec.indices)?;
        let m = g.cols();

        let x_base = x0.to_vec();
        let fd_error_g = probe_jacobian(
            &g,
            &x_base,
            |x| kkt_residual(&DecisionVector::from_slice(x), w0, lambda),
            FD_PROBES,
            0x6b6b_7401,
        );
        if !(fd_error_g <= JACOBIAN_TOL) {
            return Err(SensitivityError::DerivativeMismatch {
                block: "G",
                error: fd_error_g,
            });
        }
        let flat = w0.to_flat();
        let w_base: Vec<f64> = spec.indices.iter().map(|&i| flat[i]).collect();
        let fd_error_w = probe_jacobian(
            &w_jac,
            &w_base,
            |wm| {
                let dw: Vec<f64> = wm.iter().zip(&w_base).map(|(a, b)| a - b).collect();
                kkt_residual(x0, &spec.apply(w0, &dw), lambda)
            },
            FD_PROBES,
            0x6b6b_7402,
        );
        if !(fd_error_w <= JACOBIAN_TOL) {
            return Err(SensitivityError::DerivativeMismatch {
                block: "W_jac",
                error: fd_error_w,
            });
        }

        let sx = decision_scales(w0);
        let g_scaled = DenseMatrix::from_fn(g.rows(), m, |i, j| g.get(i, j) * sx[j])?;
        let rank_ok = has_full_column_rank(&g_scaled);

        let strongly_active = strongly_active_rows(anchor, w0)?;
        let (pd_matrix, pd_rhs, pd_scale) =
            primal_dual_system(x0, w0, anchor.j0, &strongly_active, &spec.indices, &g, &w_jac)?;
        match route {
            ShiftRoute::PseudoInverse if !rank_ok => return Err(SensitivityError::RankDeficient("GᵀG is singular")),
            ShiftRoute::PrimalDual if !has_full_column_rank(&pd_matrix) => {
                return Err(SensitivityError::RankDeficient("the active-set KKT matrix is singular"))
            }
            _ => {}
        }
        Self {
            anchor: anchor.clone(),
            w0: w0.clone(),
            spec: spec.clone(),
            g,
            w_jac,
            rank_ok,
            route,
            anchor_residual,
            fd_error_g,
            fd_error_w,
            strongly_active,
            pd_matrix,
            pd_rhs,
            pd_scale,
            shift: DenseMatrix::zeros(m, spec.dim()),
        }
        .with_shift()
    }

    /// Rebuilds the operator around the same anchor with another route.
    pub fn with_route(&self, route: ShiftRoute) -> Result<Self, SensitivityError> {
        Self {
            route,
            ..self.clone()
        }
        .with_shift()
    }

    /// Solves for the shift of each unit perturbation once.
    fn with_shift(mut self) -> Result<Self, SensitivityError> {
        let m = self.g.cols();
        let q = self.spec.dim();
        let mut shift = DMatrix::<f64>::zeros(m, q);
        for k in 0..q {
            let column = match self.route {
                ShiftRoute::PseudoInverse => {
                    let d: Vec<f64> = (0..self.w_jac.rows()).map(|i| -self.w_jac.get(i, k)).collect();
                    let sol = least_squares_apply(&self.g, &d)?;
                    if !sol.rank_ok {
                        return Err(SensitivityError::RankDeficient("GᵀG is singular"));
                    }
                    sol.solution
                }
                ShiftRoute::PrimalDual => {
                    let d: Vec<f64> = (0..self.pd_rhs.rows()).map(|i| -self.pd_rhs.get(i, k)).collect();
                    let sol = least_squares_apply(&self.pd_matrix, &d)?;
                    if !sol.rank_ok {
                        return Err(SensitivityError::RankDeficient("the active-set KKT matrix is singular"));
                    }
                    sol.solution[..m].iter().zip(&self.pd_scale).map(|(y, c)| y * c).collect()
                }
            };
            for j in 0..m {
                shift[(j, k)] = column[j];
            }
        }
        self.shift = DenseMatrix::from_dmatrix(shift)?;
        Ok(self)
    }

    fn check_box(&self, dw: &[f64]) -> Result<(), SensitivityError> {
        if dw.len() != self.spec.dim() {
            return Err(SensitivityError::InvalidSpec(format!(
                "perturbation has {} entries, mask has {}",
                dw.len(),
                self.spec.dim()
            )));
        }
        for (i, (d, b)) in dw.iter().zip(&self.spec.delta).enumerate() {
            if d.abs() > b * (1.0 + 1e-12) {
                return Err(SensitivityError::OutsideBox(i));
            }
        }
        Ok(())
    }

    /// Primal shift for a perturbation inside the box.
    pub fn predict_shift(&self, dw: &[f64]) -> Result<Vec<f64>, SensitivityError> {
        self.check_box(dw)?;
        self.shift_unchecked(dw)
    }

    fn shift_unchecked(&self, dw: &[f64]) -> Result<Vec<f64>, SensitivityError> {
        if dw.iter().all(|v| *v == 0.0) {
            return Ok(vec![0.0; self.g.cols()]);
        }
        Ok(self.shift.mul_vec(dw)?)
    }

    /// `K(δw)`: full nonlinear cost at the shifted point minus `J₀`.
    pub fn delta_cost(&self, dw: &[f64]) -> Result<f64, SensitivityError> {
        self.check_box(dw)?;
        self.cost_unchecked(dw)
    }

    fn cost_unchecked(&self, dw: &[f64]) -> Result<f64, SensitivityError> {
        let dx = self.shift_unchecked(dw)?;
        let x: Vec<f64> = self.anchor.x0.to_vec().iter().zip(&dx).map(|(a, b)| a + b).collect();
        let w = self.spec.apply(&self.w0, dw);
        let j = hvac_model::objective(&DecisionVector::from_slice(&x), &w)
            .map_err(|e| SensitivityError::ShiftOutOfDomain(e.to_string()))?;
        Ok(j - self.anchor.j0)
    }

    /// Cost changes at `±Δ∘sign(w₀)`.
    pub fn signed_shift_pair(&self) -> Result<(f64, f64), SensitivityError> {
        let flat = self.w0.to_flat();
        let dir: Vec<f64> = self
            .spec
            .indices
            .iter()
            .zip(&self.spec.delta)
            .map(|(&i, d)| if flat[i] < 0.0 { -d } else { *d })
            .collect();
        let neg: Vec<f64> = dir.iter().map(|v| -v).collect();
        Ok((self.delta_cost(&dir)?, self.delta_cost(&neg)?))
    }

    pub fn quadratic_model(&self) -> Result<QuadraticModel, SensitivityError> {
        let flat = self.w0.to_flat();
        let base: Vec<f64> = self.spec.indices.iter().map(|&i| flat[i]).collect();
        let steps = default_steps(&base);
        QuadraticModel::from_function(|dw| self.cost_unchecked(dw), &steps)
    }

    /// Worst `|K|` over the box vertices and uniform draws.
    pub fn sample_bound(&self, n_samples: usize, seed: u64) -> Result<BoundResult, SensitivityError> {
        sample_bound_of(|dw| self.cost_unchecked(dw), &self.spec.delta, n_samples, seed)
    }
}

/// Active-set KKT system `[[∇²L, A_Sᵀ], [A_S, 0]]` and its right-hand
/// side block, equilibrated with the solver's variable and row scales.
/// Returns the scaled matrix, scaled right-hand side and column scales.
fn primal_dual_system(
    x0: &DecisionVector,
    w0: &ExogenousVector,
    j0: f64,
    rows: &[usize],
    w_idx: &[usize],
    g: &DenseMatrix,
    w_jac: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, Vec<f64>), SensitivityError> {
    let d = derivatives_selected(x0, w0, w_idx);
    let sx = decision_scales(w0);
    let sh = row_scales(w0)?;
    let s_j = j0.abs().max(1.0);
    let m = g.cols();
    let q = w_idx.len();
    let k = rows.len();
    let mut col_scale = sx.clone();
    col_scale.extend(rows.iter().map(|&r| s_j / sh[r]));
    let mut row_scale: Vec<f64> = sx.iter().map(|v| v / s_j).collect();
    row_scale.extend(rows.iter().map(|&r| 1.0 / sh[r]));
    let mut a = DMatrix::<f64>::zeros(m + k, m + k);
    let mut b = DMatrix::<f64>::zeros(m + k, q);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = g.get(i, j);
        }
        for c in 0..q {
            b[(i, c)] = w_jac.get(i, c);
        }
    }
    for (r, &row) in rows.iter().enumerate() {
        for j in 0..m {
            let v = d.rows[row].grad_x[j];
            a[(m + r, j)] = v;
            a[(j, m + r)] = v;
        }
        for c in 0..q {
            b[(m + r, c)] = d.rows[row].grad_w[c];
        }
    }
    for i in 0..m + k {
        for j in 0..m + k {
            a[(i, j)] *= row_scale[i] * col_scale[j];
        }
        for c in 0..q {
            b[(i, c)] *= row_scale[i];
        }
    }
    Ok((DenseMatrix::from_dmatrix(a)?, DenseMatrix::from_dmatrix(b)?, col_scale))
}

/// Gradient and Hessian of K at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub g: Vec<f64>,
    pub h_k: DenseMatrix,
    pub fd_step_used: Vec<f64>,
    /// Max relative gap between gradients at steps h and h/2.
    pub richardson_gap: f64,
}

impl QuadraticModel {
    /// Central-difference gradient and Hessian of `k` at the origin.
    pub fn from_function<E, F>(k: F, steps: &[f64]) -> Result<Self, E>
    where
        F: Fn(&[f64]) -> Result<f64, E>,
        E: From<SensitivityError>,
    {
        let p = steps.len();
        let eval = |v: &[f64]| -> Result<f64, E> {
            let r = k(v)?;
            if r.is_finite() {
                Ok(r)
            } else {
                Err(SensitivityError::NonFinite.into())
            }
        };
        let at = |pairs: &[(usize, f64)]| -> Result<f64, E> {
            let mut v = vec![0.0; p];
            for &(i, d) in pairs {
                v[i] += d;
            }
            eval(&v)
        };
        let k0 = eval(&vec![0.0; p])?;
        let gradient = |scale: f64| -> Result<Vec<f64>, E> {
            (0..p)
                .map(|i| {
                    let h = steps[i] * scale;
                    Ok((at(&[(i, h)])? - at(&[(i, -h)])?) / (2.0 * h))
                })
                .collect()
        };
        let g = gradient(1.0)?;
        let g_half = gradient(0.5)?;
        let richardson_gap = max_relative_error(&g_half, &g);
        let mut h = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            let hi = steps[i];
            h[(i, i)] = (at(&[(i, hi)])? - 2.0 * k0 + at(&[(i, -hi)])?) / (hi * hi);
            for j in (i + 1)..p {
                let hj = steps[j];
                let v = (at(&[(i, hi), (j, hj)])? - at(&[(i, hi), (j, -hj)])? - at(&[(i, -hi), (j, hj)])?
                    + at(&[(i, -hi), (j, -hj)])?)
                    / (4.0 * hi * hj);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        let h_k = DenseMatrix::from_dmatrix(h).map_err(SensitivityError::Num)?;
        Ok(Self {
            g,
            h_k,
            fd_step_used: steps.to_vec(),
            richardson_gap,
        })
    }

    /// `g·δw + ½δwᵀH_Kδw`.
    pub fn evaluate(&self, dw: &[f64]) -> f64 {
        let hv = self.h_k.mul_vec(dw).expect("dimension matches");
        let lin: f64 = self.g.iter().zip(dw).map(|(a, b)| a * b).sum();
        let quad: f64 = hv.iter().zip(dw).map(|(a, b)| a * b).sum();
        lin + 0.5 * quad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMethod {
    HolderHalf,
    HolderPaperLiteral,
    MonteCarlo,
}

impl BoundMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BoundMethod::HolderHalf => "holder_half",
            BoundMethod::HolderPaperLiteral => "holder_paper_literal",
            BoundMethod::MonteCarlo => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub beta: f64,
    pub method: BoundMethod,
    pub samples: usize,
    pub skipped: usize,
    pub argmax_dw: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

/// Analytic bound on `|K|` over the box from the quadratic model:
/// `‖g‖₁‖Δ‖∞ + c·p·σ(H_K)·‖Δ‖∞²` with `c = ½` (holder_half) or `c = 1`
/// (holder_paper_literal).
pub fn holder_bound(qm: &QuadraticModel, delta: &[f64], method: BoundMethod) -> Result<BoundResult, SensitivityError> {
    let factor = match method {
        BoundMethod::HolderHalf => 0.5,
        BoundMethod::HolderPaperLiteral => 1.0,
        BoundMethod::MonteCarlo => {
            return Err(SensitivityError::InvalidSpec("holder_bound needs an analytic method".into()))
        }
    };
    let p = delta.len();
    let d_inf = delta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let g1: f64 = qm.g.iter().map(|v| v.abs()).sum();
    let sigma = if p == 0 { 0.0 } else { spectral_norm(&qm.h_k.symmetrized()?)? };
    Ok(BoundResult {
        beta: g1 * d_inf + factor * p as f64 * sigma * d_inf * d_inf,
        method,
        samples: 0,
        skipped: 0,
        argmax_dw: None,
        seed: None,
    })
}

fn vertex(delta: &[f64], pattern: u64, dims: usize) -> Vec<f64> {
    delta
        .iter()
        .enumerate()
        .map(|(i, d)| if i < dims && (pattern >> i) & 1 == 1 { -d } else { *d })
        .collect()
}

/// Sampling estimate of `max |k|` over the box `[−Δ, Δ]`.
///
/// All sign vertices are visited when the box has at most
/// [`MAX_VERTEX_DIM`] coordinates; otherwise `2^MAX_VERTEX_DIM` sign
/// patterns are drawn. The remaining budget is uniform draws. Draws are
/// generated in fixed-size chunks, each with its own stream, so the result
/// does not depend on the number of worker threads.
pub fn sample_bound_of<F>(k: F, delta: &[f64], n_samples: usize, seed: u64) -> Result<BoundResult, SensitivityError>
where
    F: Fn(&[f64]) -> Result<f64, SensitivityError> + Sync,
{
    if n_samples == 0 {
        return Err(SensitivityError::InvalidSpec("n_samples must be at least 1".into()));
    }
    let p = delta.len();
    let n_vertices = 1usize << p.min(MAX_VERTEX_DIM);
    let mut vertex_rng = ChaCha8Rng::seed_from_u64(seed);
    vertex_rng.set_stream(u64::MAX);
    let vertices: Vec<Vec<f64>> = (0..n_vertices as u64)
        .map(|pattern| {
            if p <= MAX_VERTEX_DIM {
                vertex(delta, pattern, p)
            } else {
                delta
                    .iter()
                    .map(|d| if vertex_rng.random_bool(0.5) { -d } else { *d })
                    .collect()
            }
        })
        .collect();
    let n_uniform = n_samples.saturating_sub(n_vertices);
    let n_chunks = n_uniform.div_ceil(SAMPLE_CHUNK);

    // (index, |K|, dw) of the best sample, and the number skipped.
    type Best = (Option<(usize, f64, Vec<f64>)>, usize);
    let merge = |a: Best, b: Best| -> Best {
        let best = match (a.0, b.0) {
            (Some(x), Some(y)) => {
                if y.1 > x.1 || (y.1 == x.1 && y.0 < x.0) {
                    Some(y)
                } else {
                    Some(x)
                }
            }
            (x, None) => x,
            (None, y) => y,
        };
        (best, a.1 + b.1)
    };
    let score = |idx: usize, dw: Vec<f64>| -> Result<Best, SensitivityError> {
        match k(&dw) {
            Ok(v) if v.is_finite() => Ok((Some((idx, v.abs(), dw)), 0)),
            Ok(_) | Err(SensitivityError::ShiftOutOfDomain(_)) | Err(SensitivityError::Model(_)) => Ok((None, 1)),
            Err(e) => Err(e),
        }
    };

    let vertex_best = vertices
        .into_par_iter()
        .enumerate()
        .map(|(i, dw)| score(i, dw))
        .try_reduce(|| (None, 0), |a, b| Ok(merge(a, b)))?;
    let uniform_best = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<Best, SensitivityError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let start = c * SAMPLE_CHUNK;
            let end = (start + SAMPLE_CHUNK).min(n_uniform);
            let mut acc: Best = (None, 0);
            for s in start..end {
                let dw: Vec<f64> = delta
                    .iter()
                    .map(|d| if *d > 0.0 { rng.random_range(-*d..=*d) } else { 0.0 })
                    .collect();
                acc = merge(acc, score(n_vertices + s, dw)?);
            }
            Ok(acc)
        })
        .try_reduce(|| (None, 0), |a, b| Ok(merge(a, b)))?;
    let (best, skipped) = merge(vertex_best, uniform_best);
    let total = n_vertices + n_uniform;
    if skipped as f64 > MAX_SKIP_FRACTION * total as f64 {
        return Err(SensitivityError::TooManySkipped { skipped, total });
    }
    let (_, beta, dw) = best.ok_or(SensitivityError::TooManySkipped { skipped, total })?;
    Ok(BoundResult {
        beta,
        method: BoundMethod::MonteCarlo,
        samples: total,
        skipped,
        argmax_dw: Some(dw),
        seed: Some(seed),
    })
}

/// Outcome of checking a predicted cost change against a full re-solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolveCheck {
    pub dw: Vec<f64>,
    pub k: f64,
    pub delta_j: f64,
    pub abs_error: f64,
}

/// Re-solves the baseline at `w₀ + δw` and compares with `K(δw)`.
pub fn resolve_check(
    op: &SensitivityOperator,
    dw: &[f64],
    cfg: &crate::baseline_opt::SolverConfig,
) -> Result<ResolveCheck, SensitivityError> {
    let k = op.delta_cost(dw)?;
    let w = op.spec.apply(&op.w0, dw);
    let point = crate::baseline_opt::solve_baseline(&w, cfg)?;
    let delta_j = point.j0 - op.anchor.j0;
    Ok(ResolveCheck {
        dw: dw.to_vec(),
        k,
        delta_j,
        abs_error: (k - delta_j).abs(),
    })
}

/// Least-squares optimality residual `‖Gᵀ(Gδx − d)‖` of a shift.
pub fn normal_residual(op: &SensitivityOperator, dw: &[f64], dx: &[f64]) -> Result<(f64, f64), SensitivityError> {
    let d: Vec<f64> = op.w_jac.mul_vec(dw)?.iter().map(|v| -v).collect();
    let g = op.g.as_dmatrix();
    let r = g * DVector::from_column_slice(dx) - DVector::from_column_slice(&d);
    let gtr = g.transpose() * r;
    let gtd = g.transpose() * DVector::from_column_slice(&d);
    Ok((gtr.norm(), gtd.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline_opt::{solve_baseline, SolverConfig};
    use crate::hvac_model::{HvacParameters, ZoneInputs};

    fn hot_hour() -> ExogenousVector {
        let p = HvacParameters::default();
        let zones = ZoneInputs {
            q_zone: vec![-3900.0, -2400.0, -3000.0, -3450.0, -2100.0],
            t_sp: vec![22.0; 5],
            m_oa_min: vec![0.05; 5],
        };
        ExogenousVector::new(35.0, zones, p).unwrap()
    }

    #[test]
    fn holder_bound_one_dimensional_example() {
        let qm = QuadraticModel {
            g: vec![2.0],
            h_k: DenseMatrix::new(1, 1, vec![4.0]).unwrap(),
            fd_step_used: vec![1e-4],
            richardson_gap: 0.0,
        };
        let half = holder_bound(&qm, &[0.5], BoundMethod::HolderHalf).unwrap();
        assert!((half.beta - 1.5).abs() < 1e-15);
        let literal = holder_bound(&qm, &[0.5], BoundMethod::HolderPaperLiteral).unwrap();
        assert!(literal.beta >= half.beta);
        let truth = [0.5, -0.5].iter().map(|d: &f64| (2.0 * d + 2.0 * d * d).abs()).fold(0.0, f64::max);
        assert!((truth - half.beta).abs() < 1e-15);
        let zero = QuadraticModel {
            g: vec![0.0],
            h_k: DenseMatrix::zeros(1, 1),
            fd_step_used: vec![1e-4],
            richardson_gap: 0.0,
        };
        assert_eq!(holder_bound(&zero, &[0.5], BoundMethod::HolderHalf).unwrap().beta, 0.0);
    }

    #[test]
    fn quadratic_seam_is_recovered() {
        let g = [1.5, -0.25, 3.0];
        let h = [[2.0, 0.5, -1.0], [0.5, -3.0, 0.25], [-1.0, 0.25, 1.0]];
        let f = |v: &[f64]| -> Result<f64, SensitivityError> {
            let mut s = 0.0;
            for i in 0..3 {
                s += g[i] * v[i];
                for j in 0..3 {
                    s += 0.5 * v[i] * h[i][j] * v[j];
                }
            }
            Ok(s)
        };
        let qm = QuadraticModel::from_function(f, &[1e-3, 1e-3, 1e-3]).unwrap();
        for i in 0..3 {
            assert!((qm.g[i] - g[i]).abs() < 1e-8);
            for j in 0..3 {
                assert!((qm.h_k.get(i, j) - h[i][j]).abs() < 1e-6 * 10.0);
            }
        }
    }

    #[test]
    fn vertex_sweep_finds_box_maximum() {
        // 1-D quadratic 3δ + 5δ² on [−0.2, 0.2]: maximum at +0.2.
        let f = |v: &[f64]| -> Result<f64, SensitivityError> { Ok(3.0 * v[0] + 5.0 * v[0] * v[0]) };
        let r = sample_bound_of(f, &[0.2], 10, 7).unwrap();
        assert!((r.beta - (0.6 + 0.2)).abs() < 1e-15);
        assert_eq!(r.argmax_dw.as_deref(), Some(&[0.2][..]));
        let zero = sample_bound_of(f, &[0.0], 100, 7).unwrap();
        assert_eq!(zero.beta, 0.0);
    }

    #[test]
    fn sampling_is_thread_count_independent() {
        let f = |v: &[f64]| -> Result<f64, SensitivityError> { Ok((v[0] * 3.0).sin() + v[1] * v[2] - v[0] * v[1]) };
        let delta = [0.4, 0.7, 0.2];
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample_bound_of(f, &delta, 5000, 11).unwrap());
        let b = four.install(|| sample_bound_of(f, &delta, 5000, 11).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mask_expansion() {
        let w = hot_hour();
        let spec = UncertaintySpec::new(&w, &["c_f"], 0.05).unwrap();
        assert_eq!(spec.labels, vec!["c_f_1", "c_f_2", "c_f_3", "c_f_4"]);
        assert!(UncertaintySpec::new(&w, &["nope"], 0.05).is_err());
        let toa = UncertaintySpec::new(&w, &["T_oa"], 0.05).unwrap();
        assert!((toa.delta[0] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn operator_basics_on_hot_hour() {
        let w = hot_hour();
        let anchor = solve_baseline(&w, &SolverConfig::default()).unwrap();
        let spec = UncertaintySpec::new(&w, &["T_oa"], 0.05).unwrap();
        let op = SensitivityOperator::build(&anchor, &w, &spec).unwrap();
        assert_eq!(op.w_jac.cols(), 1);
        let m = op.g.cols();
        for (i, l) in anchor.lambda.iter().enumerate() {
            if *l == 0.0 {
                assert!(op.g.row(m + i).iter().all(|v| *v == 0.0));
            }
        }
        assert_eq!(op.delta_cost(&[0.0]).unwrap(), 0.0);
        let a = op.predict_shift(&[0.5]).unwrap();
        let b = op.predict_shift(&[-0.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() <= 1e-10 * x.abs().max(1e-300));
        }
        let h = kkt_residual(&anchor.x0, &w, &anchor.lambda);
        assert!(h.iter().all(|v| v.is_finite()));
    }
}
