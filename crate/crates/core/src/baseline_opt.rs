//! Hourly baseline solve: minimum source power subject to the air-loop and
//! plant constraints, returned as a verified KKT point.
//!
//! The solver is a primal-dual interior-point method on slack-augmented
//! inequalities, run from several seeded starts. The AHU balance pair is
//! handled internally as one equality with a free multiplier. Each
//! interior-point result is finished by a Newton solve on the identified
//! active set so that complementarity holds to machine precision.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ad::Jet;
use crate::hvac_model::{
    self, apply_flow_floor, constraints_generic, derivatives_selected, smooth_objective_generic, DecisionLayout,
    DecisionVector, ExogenousVector, ModelError, RowLayout, T_DA_MAX, T_SA_MAX, T_SA_MIN,
};
use crate::numkit::{nnls, DenseMatrix};

/// Name of the pseudo-random generator used for multistart points.
pub const PRNG_NAME: &str = "ChaCha8Rng";

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSchedule {
    pub mu_init: f64,
    pub mu_min: f64,
    /// A barrier subproblem is solved once its error is below `kappa_eps·μ`.
    pub kappa_eps: f64,
    pub kappa_mu: f64,
    pub theta_mu: f64,
    /// Fraction-to-boundary parameter.
    pub tau: f64,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        Self {
            mu_init: 0.1,
            mu_min: 1e-11,
            kappa_eps: 10.0,
            kappa_mu: 0.2,
            theta_mu: 1.5,
            tau: 0.995,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub act_tol: f64,
    pub multistart_count: usize,
    pub rng_seed: u64,
    pub max_iterations: usize,
    pub barrier: BarrierSchedule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            feas_tol: 1e-8,
            act_tol: 1e-6,
            multistart_count: 8,
            rng_seed: 0,
            max_iterations: 300,
            barrier: BarrierSchedule::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let tols = [("kkt_tol", self.kkt_tol), ("feas_tol", self.feas_tol), ("act_tol", self.act_tol)];
        for (name, v) in tols {
            if !(v > 0.0) {
                return Err(SolveError::Config(format!("{name} must be positive")));
            }
        }
        if self.multistart_count == 0 {
            return Err(SolveError::Config("multistart_count must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(SolveError::Config("max_iterations must be at least 1".into()));
        }
        let b = &self.barrier;
        if !(b.mu_init > 0.0 && b.mu_min > 0.0 && b.kappa_mu > 0.0 && b.kappa_mu < 1.0 && b.tau > 0.0 && b.tau < 1.0)
        {
            return Err(SolveError::Config("barrier schedule out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("infeasible hour: {0}")]
    Infeasible(String),
    #[error(
        "no start converged; best residuals: stationarity {stationarity:.3e}, \
         complementarity {complementarity:.3e}, feasibility {feasibility:.3e}"
    )]
    NoConvergence {
        stationarity: f64,
        complementarity: f64,
        feasibility: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum KktFlag {
    Stationarity(f64),
    Complementarity(f64),
    Feasibility { row: usize, value: f64 },
    NegativeMultiplier { row: usize, value: f64 },
    Degenerate { row: usize },
    LicqFailure,
}

impl std::fmt::Display for KktFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KktFlag::Stationarity(v) => write!(f, "stationarity residual {v:.3e} above tolerance"),
            KktFlag::Complementarity(v) => write!(f, "complementarity residual {v:.3e} above tolerance"),
            KktFlag::Feasibility { row, value } => write!(f, "row {row} violated by {value:.3e}"),
            KktFlag::NegativeMultiplier { row, value } => {
                write!(f, "dual feasibility violated: multiplier {row} = {value:.3e}")
            }
            KktFlag::Degenerate { row } => write!(f, "row {row} is active with a vanishing multiplier"),
            KktFlag::LicqFailure => write!(f, "active constraint gradients are linearly dependent"),
        }
    }
}

/// Residuals of the four KKT groups, recomputed from model derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Per-coordinate relative stationarity, max over coordinates.
    pub stationarity_residual: f64,
    /// `max |λᵢhᵢ| / max(1, |J|)`.
    pub complementarity_residual: f64,
    /// `max max(0, hᵢ)`, raw units.
    pub feasibility_violation: f64,
    pub min_multiplier: f64,
    pub active_set: Vec<usize>,
    pub strict_complementarity_ok: bool,
    pub licq_ok: bool,
    /// `min(q_h, q_c)`, W.
    pub heat_cool_overlap: f64,
    pub flags: Vec<KktFlag>,
}

impl KktReport {
    /// True when stationarity, complementarity, feasibility, and dual
    /// feasibility all hold within tolerance.
    pub fn within_tolerance(&self) -> bool {
        !self.flags.iter().any(|f| {
            matches!(
                f,
                KktFlag::Stationarity(_)
                    | KktFlag::Complementarity(_)
                    | KktFlag::Feasibility { .. }
                    | KktFlag::NegativeMultiplier { .. }
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub x0: DecisionVector,
    /// One multiplier per constraint row, zero for inactive rows.
    pub lambda: Vec<f64>,
    /// Reported source power at `x0`, W.
    pub j0: f64,
    pub stationarity_residual: f64,
    pub complementarity_residual: f64,
    pub feasibility_violation: f64,
    pub active_set: Vec<usize>,
    pub strict_complementarity_ok: bool,
    pub licq_ok: bool,
    pub rng_seed: u64,
    pub start_index: usize,
    pub iterations: usize,
    pub starts_converged: usize,
    /// Largest relative J spread between converged starts.
    pub multistart_spread: f64,
    pub warnings: Vec<String>,
}

/// Typical magnitude of each decision variable, used for scaling.
pub fn decision_scales(w: &ExogenousVector) -> Vec<f64> {
    let n = w.params.zone_count;
    let mut s = vec![10.0, 1.0];
    s.extend(std::iter::repeat_n(1.0, n));
    s.push(w.params.boiler.q_b_rated);
    s.push(w.params.chiller.q_e_rated);
    s
}

/// Lower and upper box used to place starting points.
fn start_box(w: &ExogenousVector) -> (Vec<f64>, Vec<f64>) {
    let p = &w.params;
    let n = p.zone_count;
    let vent: f64 = w.zones.m_oa_min.iter().sum();
    let mut lo = vec![T_SA_MIN, vent];
    let mut hi = vec![T_SA_MAX, p.fan.m_design];
    lo.extend(std::iter::repeat_n(p.flow_floor, n));
    hi.extend(std::iter::repeat_n(p.fan.m_design / n as f64, n));
    (lo, hi)
}

/// Completes a start point with a coil split satisfying the AHU balance.
fn complete_start(head: &[f64], w: &ExogenousVector) -> Result<DecisionVector, ModelError> {
    let mut x = DecisionVector::from_slice(&[head, &[0.0, 0.0]].concat());
    let q_ahu = hvac_model::evaluate(&x, w)?.q_ahu;
    x.q_h = q_ahu.max(0.0);
    x.q_c = (-q_ahu).max(0.0);
    Ok(x)
}

/// Start 0 is the centre of the box; the rest are uniform draws.
pub fn start_points(w: &ExogenousVector, count: usize, seed: u64) -> Result<Vec<DecisionVector>, ModelError> {
    let (lo, hi) = start_box(w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(count);
    let centre: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
    starts.push(complete_start(&centre, w)?);
    for _ in 1..count {
        let head: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..=*b)).collect();
        starts.push(complete_start(&head, w)?);
    }
    Ok(starts)
}

/// Per-row magnitude `max(1, max_j |∂hᵢ/∂x_j|·s_j)` at the centre start.
pub fn row_scales(w: &ExogenousVector) -> Result<Vec<f64>, ModelError> {
    let x0 = start_points(w, 1, 0)?.remove(0);
    let sx = decision_scales(w);
    let d = derivatives_selected(&x0, w, &[]);
    Ok(d.rows
        .iter()
        .map(|r| {
            r.grad_x
                .iter()
                .zip(&sx)
                .fold(1.0_f64, |m, (g, s)| m.max((g * s).abs()))
        })
        .collect())
}

/// Checks each zone can meet its load inside the discharge window at
/// some flow, and that the flows needed fit under the design flow.
fn precheck(w: &ExogenousVector) -> Result<(), SolveError> {
    let p = &w.params;
    let mut needed = 0.0;
    for i in 0..p.zone_count {
        let q = w.zones.q_zone[i];
        let t_sp = w.zones.t_sp[i];
        let m_req = if q > 0.0 {
            if t_sp >= T_DA_MAX {
                return Err(SolveError::Infeasible(format!("zone {} setpoint leaves no heating window", i + 1)));
            }
            q / (p.c_p * (T_DA_MAX - t_sp))
        } else if q < 0.0 {
            if t_sp <= T_SA_MIN {
                return Err(SolveError::Infeasible(format!("zone {} setpoint leaves no cooling window", i + 1)));
            }
            -q / (p.c_p * (t_sp - T_SA_MIN))
        } else {
            0.0
        };
        needed += m_req.max(p.flow_floor).max(w.zones.m_oa_min[i]);
    }
    if needed > p.fan.m_design {
        return Err(SolveError::Infeasible(format!(
            "zones need {needed:.4} kg/s in total, design flow is {:.4} kg/s",
            p.fan.m_design
        )));
    }
    Ok(())
}

struct Eval {
    f: f64,
    g: DVector<f64>,
    hf: DMatrix<f64>,
    c: Vec<f64>,
    a: Vec<DVector<f64>>,
    hc: Vec<DMatrix<f64>>,
}

/// Problem in scaled variables `z = x / sx`, objective `J / s_j`, and rows
/// `hᵢ / shᵢ`.
struct Scaled<'a> {
    w: &'a ExogenousVector,
    w_flat: Vec<f64>,
    zones: usize,
    sx: Vec<f64>,
    s_j: f64,
    sh: Vec<f64>,
    eq: usize,
    ineq: Vec<usize>,
}

impl<'a> Scaled<'a> {
    fn new(w: &'a ExogenousVector, x_ref: &DecisionVector) -> Result<Self, ModelError> {
        let zones = w.params.zone_count;
        let layout = RowLayout { zones };
        let sh = row_scales(w)?;
        let sx = decision_scales(w);
        let w_flat = w.to_flat();
        let f_ref = smooth_objective_generic(&x_ref.to_vec(), &w_flat, zones);
        let eq = layout.balance_pos();
        let ineq = (0..layout.count())
            .filter(|&k| k != layout.balance_pos() && k != layout.balance_neg())
            .collect();
        Ok(Self {
            w,
            w_flat,
            zones,
            sx,
            s_j: f_ref.abs().max(1.0),
            sh,
            eq,
            ineq,
        })
    }

    fn to_x(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.sx).map(|(a, b)| a * b).collect()
    }

    fn to_z(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.sx).map(|(a, b)| a / b).collect()
    }

    fn values(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        let x = self.to_x(z);
        let f = smooth_objective_generic(&x, &self.w_flat, self.zones) / self.s_j;
        let mut c = constraints_generic(&x, &self.w_flat, self.zones);
        apply_flow_floor(&mut c, self.zones, self.w.params.flow_floor);
        for (ci, s) in c.iter_mut().zip(&self.sh) {
            *ci /= s;
        }
        (f.is_finite() && c.iter().all(|v| v.is_finite())).then_some((f, c))
    }

    fn eval(&self, z: &[f64]) -> Option<Eval> {
        let m = z.len();
        let xj: Vec<Jet> = z
            .iter()
            .enumerate()
            .map(|(i, &zi)| Jet::variable(zi, i, m) * self.sx[i])
            .collect();
        let wj: Vec<Jet> = self.w_flat.iter().map(|&v| Jet::constant(v, m)).collect();
        let obj = smooth_objective_generic(&xj, &wj, self.zones);
        let mut rows = constraints_generic(&xj, &wj, self.zones);
        apply_flow_floor(&mut rows, self.zones, self.w.params.flow_floor);
        let grad = |j: &Jet, s: f64| DVector::from_iterator(m, j.g.iter().map(|v| v / s));
        let hess = |j: &Jet, s: f64| DMatrix::from_row_iterator(m, m, j.h.iter().map(|v| v / s));
        let ev = Eval {
            f: obj.v / self.s_j,
            g: grad(&obj, self.s_j),
            hf: hess(&obj, self.s_j),
            c: rows.iter().zip(&self.sh).map(|(r, s)| r.v / s).collect(),
            a: rows.iter().zip(&self.sh).map(|(r, s)| grad(r, *s)).collect(),
            hc: rows.iter().zip(&self.sh).map(|(r, s)| hess(r, *s)).collect(),
        };
        let finite = ev.f.is_finite()
            && ev.g.iter().all(|v| v.is_finite())
            && ev.c.iter().all(|v| v.is_finite())
            && ev.a.iter().all(|a| a.iter().all(|v| v.is_finite()));
        finite.then_some(ev)
    }
}

struct IpmState {
    z: Vec<f64>,
    s: Vec<f64>,
    lam: Vec<f64>,
    y: f64,
    iterations: usize,
}

fn fraction_to_boundary(v: &[f64], dv: &[f64], tau: f64) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -tau * x / d)
        .fold(1.0_f64, f64::min)
}

fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

fn interior_point(p: &Scaled, z0: Vec<f64>, cfg: &SolverConfig) -> Option<IpmState> {
    let b = &cfg.barrier;
    let m = z0.len();
    let ni = p.ineq.len();
    let mut z = z0;
    let mut ev = p.eval(&z)?;
    let mut s: Vec<f64> = p.ineq.iter().map(|&k| (-ev.c[k]).max(1e-2)).collect();
    let mut mu = b.mu_init;
    let mut lam: Vec<f64> = s.iter().map(|si| mu / si).collect();
    let mut y = 0.0;
    let mut filter: Vec<(f64, f64)> = Vec::new();
    let mut filter_mu = f64::NAN;
    let mut theta_bounds: Option<(f64, f64)> = None;
    let mut delta_last: f64 = 0.0;
    let mut stalls = 0;
    const S_MAX: f64 = 100.0;
    const TOL: f64 = 1e-9;

    for it in 0..cfg.max_iterations {
        let mut r_d = ev.g.clone() + &ev.a[p.eq] * y;
        for (k, &row) in p.ineq.iter().enumerate() {
            r_d += &ev.a[row] * lam[k];
        }
        let r_p: Vec<f64> = p.ineq.iter().zip(&s).map(|(&row, si)| ev.c[row] + si).collect();
        let r_e = ev.c[p.eq];
        let lam_l1: f64 = lam.iter().sum();
        let s_d = (lam_l1 + y.abs()) / (ni + 1) as f64;
        let s_d = s_d.max(S_MAX) / S_MAX;
        let s_c = (lam_l1 / ni as f64).max(S_MAX) / S_MAX;
        let error = |mu: f64| {
            let comp = s.iter().zip(&lam).map(|(a, l)| (a * l - mu).abs()).fold(0.0, f64::max);
            let feas = r_p.iter().fold(r_e.abs(), |acc, v| acc.max(v.abs()));
            (r_d.amax() / s_d).max(feas).max(comp / s_c)
        };
        if error(0.0) <= TOL {
            return Some(IpmState {
                z,
                s,
                lam,
                y,
                iterations: it,
            });
        }
        while mu > b.mu_min && error(mu) <= b.kappa_eps * mu {
            mu = b.mu_min.max((b.kappa_mu * mu).min(mu.powf(b.theta_mu)));
        }
        let r_c: Vec<f64> = s.iter().zip(&lam).map(|(a, l)| a * l - mu).collect();

        let mut w_l = ev.hf.clone() + &ev.hc[p.eq] * y;
        let mut mmat = DMatrix::<f64>::zeros(m, m);
        let mut rhs = -r_d.clone();
        for (k, &row) in p.ineq.iter().enumerate() {
            let a = &ev.a[row];
            w_l += &ev.hc[row] * lam[k];
            mmat.ger(lam[k] / s[k], a, a, 1.0);
            rhs += a * ((r_c[k] - lam[k] * r_p[k]) / s[k]);
        }
        mmat += &w_l;
        let mut delta: f64 = 0.0;
        if !is_positive_definite(&mmat) {
            delta = if delta_last == 0.0 { 1e-4 } else { (delta_last / 3.0).max(1e-20) };
            while !is_positive_definite(&(&mmat + DMatrix::<f64>::identity(m, m) * delta)) {
                delta *= 8.0;
                if delta > 1e40 {
                    return None;
                }
            }
            delta_last = delta;
        }
        let mreg = &mmat + DMatrix::<f64>::identity(m, m) * delta;
        let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
        kkt.view_mut((0, 0), (m, m)).copy_from(&mreg);
        for j in 0..m {
            kkt[(j, m)] = ev.a[p.eq][j];
            kkt[(m, j)] = ev.a[p.eq][j];
        }
        let mut full_rhs = DVector::<f64>::zeros(m + 1);
        full_rhs.rows_mut(0, m).copy_from(&rhs);
        full_rhs[m] = -r_e;
        let sol = match kkt.clone().lu().solve(&full_rhs) {
            Some(v) => v,
            None => {
                kkt[(m, m)] = -1e-8;
                kkt.lu().solve(&full_rhs)?
            }
        };
        let dx = sol.rows(0, m).into_owned();
        let dy = sol[m];
        let ds: Vec<f64> = p
            .ineq
            .iter()
            .enumerate()
            .map(|(k, &row)| -r_p[k] - ev.a[row].dot(&dx))
            .collect();
        let dlam: Vec<f64> = (0..ni).map(|k| (-r_c[k] - lam[k] * ds[k]) / s[k]).collect();
        let alpha_max = fraction_to_boundary(&s, &ds, b.tau);
        let alpha_d = fraction_to_boundary(&lam, &dlam, b.tau);

        let theta: f64 = r_p.iter().map(|v| v.abs()).sum::<f64>() + r_e.abs();
        if theta_bounds.is_none() {
            theta_bounds = Some((1e4 * theta.max(1.0), 1e-4 * theta.max(1.0)));
        }
        let (theta_max, theta_min) = theta_bounds.expect("set above");
        if mu != filter_mu {
            filter.clear();
            filter_mu = mu;
        }
        let barrier = |f: f64, s: &[f64]| f - mu * s.iter().map(|v| v.ln()).sum::<f64>();
        let infeasibility = |c: &[f64], s: &[f64]| {
            p.ineq.iter().zip(s).map(|(&row, si)| (c[row] + si).abs()).sum::<f64>() + c[p.eq].abs()
        };
        let phi0 = barrier(ev.f, &s);
        let slope = ev.g.dot(&dx) - mu * ds.iter().zip(&s).map(|(d, a)| d / a).sum::<f64>();
        let trial = |alpha: f64| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
            let zt: Vec<f64> = z.iter().zip(dx.iter()).map(|(a, d)| a + alpha * d).collect();
            let st: Vec<f64> = s.iter().zip(&ds).map(|(a, d)| a + alpha * d).collect();
            let (ft, ct) = p.values(&zt)?;
            let phi = barrier(ft, &st);
            let th = infeasibility(&ct, &st);
            Some((zt, st, ct, th, phi))
        };
        // Filter line search: accept a trial point that improves either
        // infeasibility or the barrier objective and is not dominated by
        // earlier iterates.
        const GAMMA_THETA: f64 = 1e-5;
        const GAMMA_PHI: f64 = 1e-5;
        const ETA: f64 = 1e-4;
        let mut alpha = alpha_max;
        let mut accepted = None;
        while alpha > 1e-12 {
            if let Some((zt, st, ct, th, phi)) = trial(alpha) {
                let dominated = th > theta_max || filter.iter().any(|(ft, fp)| th >= *ft && phi >= *fp);
                if !dominated {
                    let switching = slope < 0.0 && alpha * (-slope).powf(2.3) > theta.powf(1.1);
                    if theta <= theta_min && switching {
                        if phi <= phi0 + ETA * alpha * slope {
                            accepted = Some((zt, st, ct, alpha));
                            break;
                        }
                    } else if th <= (1.0 - GAMMA_THETA) * theta || phi <= phi0 - GAMMA_PHI * theta {
                        if !(switching && phi <= phi0 + ETA * alpha * slope) {
                            filter.push(((1.0 - GAMMA_THETA) * theta, phi0 - GAMMA_PHI * theta));
                        }
                        accepted = Some((zt, st, ct, alpha));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let (zt, mut st, ct, alpha) = match accepted {
            Some(a) => {
                stalls = 0;
                a
            }
            None => {
                stalls += 1;
                if stalls > 5 {
                    return None;
                }
                filter.clear();
                let (zt, st, ct, _, _) = trial(alpha_max)?;
                (zt, st, ct, alpha_max)
            }
        };
        for (k, &row) in p.ineq.iter().enumerate() {
            st[k] = st[k].max(-ct[row]);
        }
        z = zt;
        s = st;
        y += alpha * dy;
        for k in 0..ni {
            let l = lam[k] + alpha_d * dlam[k];
            lam[k] = l.clamp(mu / (1e10 * s[k]), 1e10 * mu / s[k]);
        }
        ev = p.eval(&z)?;
    }
    None
}

/// Picks, in order, rows whose gradients extend the span of those
/// already chosen.
pub(crate) fn independent_rows(grads: &[(usize, &DVector<f64>)], m: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for &(row, g) in grads {
        if chosen.len() == m {
            break;
        }
        let norm = g.norm();
        if norm == 0.0 {
            continue;
        }
        // Gram-Schmidt residual against the chosen set, applied twice.
        let mut r = g / norm;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&r);
                r -= q * proj;
            }
        }
        let rn = r.norm();
        if rn > 1e-8 {
            basis.push(r / rn);
            chosen.push(row);
        }
    }
    chosen
}

struct Polished {
    z: Vec<f64>,
    /// Scaled multipliers per row; the equality uses `y`.
    lam: Vec<f64>,
    y: f64,
}

fn newton_on_active(p: &Scaled, z0: &[f64], rows: &[usize], lam0: &[f64], y0: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let m = z0.len();
    let b = rows.len();
    let dim = m + b + 1;
    let mut z = z0.to_vec();
    let mut lam = lam0.to_vec();
    let mut y = y0;
    let mut best = f64::INFINITY;
    for _ in 0..50 {
        let ev = p.eval(&z)?;
        let mut f = DVector::<f64>::zeros(dim);
        let mut stat = ev.g.clone() + &ev.a[p.eq] * y;
        let mut w_l = ev.hf.clone() + &ev.hc[p.eq] * y;
        for (j, &row) in rows.iter().enumerate() {
            stat += &ev.a[row] * lam[j];
            w_l += &ev.hc[row] * lam[j];
        }
        f.rows_mut(0, m).copy_from(&stat);
        for (j, &row) in rows.iter().enumerate() {
            f[m + j] = ev.c[row];
        }
        f[m + b] = ev.c[p.eq];
        let norm = f.amax();
        if norm < 1e-15 || (norm < 1e-12 && norm >= 0.5 * best) {
            return Some((z, lam, y));
        }
        best = best.min(norm);
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        jac.view_mut((0, 0), (m, m)).copy_from(&w_l);
        for (j, &row) in rows.iter().chain(std::iter::once(&p.eq)).enumerate() {
            for i in 0..m {
                jac[(i, m + j)] = ev.a[row][i];
                jac[(m + j, i)] = ev.a[row][i];
            }
        }
        let step = jac.lu().solve(&(-f))?;
        for i in 0..m {
            z[i] += step[i];
        }
        for j in 0..b {
            lam[j] += step[m + j];
        }
        y += step[m + b];
    }
    let ev = p.eval(&z)?;
    let mut resid = (ev.g.clone() + &ev.a[p.eq] * y).amax();
    for (j, &row) in rows.iter().enumerate() {
        resid = resid.max(ev.c[row].abs());
        let _ = j;
    }
    (resid < 1e-10).then_some((z, lam, y))
}

/// Newton refinement on the active set, with add/drop rounds for rows
/// that turn out violated or carry negative multipliers.
fn polish(p: &Scaled, state: &IpmState, feas_tol: f64) -> Option<Polished> {
    let m = state.z.len();
    let n = p.sh.len();
    let mut active: Vec<usize> = p
        .ineq
        .iter()
        .enumerate()
        .filter(|(k, _)| state.s[*k] < state.lam[*k])
        .map(|(_, &row)| row)
        .collect();
    let lam_of = |row: usize| -> f64 {
        p.ineq
            .iter()
            .position(|&r| r == row)
            .map(|k| state.lam[k])
            .unwrap_or(0.0)
    };
    let mut z = state.z.clone();
    let mut y = state.y;
    let mut lam_prev: Vec<f64> = (0..n).map(lam_of).collect();
    for _round in 0..10 {
        active.sort_unstable();
        active.dedup();
        let ev = p.eval(&z)?;
        let mut grads: Vec<(usize, &DVector<f64>)> = vec![(p.eq, &ev.a[p.eq])];
        grads.extend(active.iter().map(|&r| (r, &ev.a[r])));
        let chosen: Vec<usize> = independent_rows(&grads, m).into_iter().filter(|&r| r != p.eq).collect();
        let lam0: Vec<f64> = chosen.iter().map(|&r| lam_prev[r]).collect();
        let (zn, lamn, yn) = newton_on_active(p, &z, &chosen, &lam0, y)?;
        let ev = p.eval(&zn)?;
        let violated = p
            .ineq
            .iter()
            .filter(|r| !chosen.contains(r))
            .map(|&r| (r, ev.c[r] * p.sh[r]))
            .filter(|(_, v)| *v > feas_tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if violated.is_some_and(|(row, _)| active.contains(&row)) {
            // A dependent active row drifted; the active set is inconsistent.
            return None;
        }
        let mut lam_full = vec![0.0; n];
        for (j, &r) in chosen.iter().enumerate() {
            lam_full[r] = lamn[j];
        }
        z = zn;
        y = yn;
        if let Some((row, _)) = violated {
            active.push(row);
            lam_prev = lam_full;
            continue;
        }
        let min_lam = lamn.iter().copied().fold(0.0_f64, f64::min);
        if min_lam >= -1e-12 {
            lam_full.iter_mut().for_each(|v| *v = v.max(0.0));
            return Some(Polished { z, lam: lam_full, y });
        }
        // Degenerate vertex: look for a nonnegative representation over
        // every active row before dropping one.
        if let Some((lam_nn, y_nn)) = nonnegative_multipliers(&ev, p, &active) {
            return Some(Polished { z, lam: lam_nn, y: y_nn });
        }
        let (drop_j, _) = lamn
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("negative multiplier implies a chosen row");
        let drop_row = chosen[drop_j];
        active.retain(|&r| r != drop_row);
        lam_prev = lam_full;
        lam_prev[drop_row] = 0.0;
    }
    None
}

fn nonnegative_multipliers(ev: &Eval, p: &Scaled, active: &[usize]) -> Option<(Vec<f64>, f64)> {
    let m = ev.g.len();
    let cols = active.len() + 2;
    let a = DenseMatrix::from_fn(m, cols, |i, j| {
        if j < active.len() {
            ev.a[active[j]][i]
        } else if j == active.len() {
            ev.a[p.eq][i]
        } else {
            -ev.a[p.eq][i]
        }
    })
    .ok()?;
    let b: Vec<f64> = ev.g.iter().map(|v| -v).collect();
    let sol = nnls(&a, &b).ok()?;
    let fitted = a.mul_vec(&sol).ok()?;
    let resid = fitted.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    if resid > 1e-10 * ev.g.amax().max(1.0) {
        return None;
    }
    let mut lam = vec![0.0; p.sh.len()];
    for (j, &r) in active.iter().enumerate() {
        lam[r] = sol[j];
    }
    Some((lam, sol[active.len()] - sol[active.len() + 1]))
}

/// Converts scaled multipliers to the physical rows `∇J + Σλᵢ∇hᵢ = 0`.
fn physical_multipliers(p: &Scaled, lam: &[f64], y: f64) -> Vec<f64> {
    let layout = RowLayout { zones: p.zones };
    let mut out: Vec<f64> = lam.iter().zip(&p.sh).map(|(l, s)| p.s_j * l / s).collect();
    let y_phys = p.s_j * y / p.sh[p.eq];
    out[layout.balance_pos()] = y_phys.max(0.0);
    out[layout.balance_neg()] = (-y_phys).max(0.0);
    out
}

struct Candidate {
    start: usize,
    x: DecisionVector,
    lambda: Vec<f64>,
    j: f64,
    report: KktReport,
    iterations: usize,
}

fn solve_from(p: &Scaled, start: usize, x0: &DecisionVector, cfg: &SolverConfig) -> Option<Candidate> {
    let w = p.w;
    let state = interior_point(p, p.to_z(&x0.to_vec()), cfg);
    let state = state?;
    let (z, lam, y) = match polish(p, &state, cfg.feas_tol) {
        Some(pl) => (pl.z, pl.lam, pl.y),
        None => {
            let mut lam = vec![0.0; p.sh.len()];
            for (k, &r) in p.ineq.iter().enumerate() {
                lam[r] = state.lam[k];
            }
            (state.z.clone(), lam, state.y)
        }
    };
    let x = DecisionVector::from_slice(&p.to_x(&z));
    let lambda = physical_multipliers(p, &lam, y);
    let j = hvac_model::objective(&x, w).ok()?;
    let report = verify_kkt(&x, &lambda, w, cfg);
    Some(Candidate {
        start,
        x,
        lambda,
        j,
        report,
        iterations: state.iterations,
    })
}

/// Solves the hour from `multistart_count` deterministic starts and
/// returns the lowest-cost point that passes the KKT check.
pub fn solve_baseline(w: &ExogenousVector, cfg: &SolverConfig) -> Result<KktPoint, SolveError> {
    cfg.validate()?;
    w.validate()?;
    precheck(w)?;
    let starts = start_points(w, cfg.multistart_count, cfg.rng_seed)?;
    let problem = Scaled::new(w, &starts[0])?;
    let candidates: Vec<Candidate> = starts
        .iter()
        .enumerate()
        .filter_map(|(k, x0)| solve_from(&problem, k, x0, cfg))
        .collect();
    let mut good: Vec<&Candidate> = candidates.iter().filter(|c| c.report.within_tolerance()).collect();
    if good.is_empty() {
        let feasible = candidates.iter().any(|c| c.report.feasibility_violation <= cfg.feas_tol);
        if !feasible {
            let best = candidates
                .iter()
                .map(|c| c.report.feasibility_violation)
                .fold(f64::INFINITY, f64::min);
            return Err(SolveError::Infeasible(format!(
                "no start reached a feasible point (smallest violation {best:.3e})"
            )));
        }
        let best = candidates
            .iter()
            .filter(|c| c.report.feasibility_violation <= cfg.feas_tol)
            .min_by(|a, b| {
                let ka = a.report.stationarity_residual.max(a.report.complementarity_residual);
                let kb = b.report.stationarity_residual.max(b.report.complementarity_residual);
                ka.total_cmp(&kb)
            })
            .expect("feasible candidate exists");
        return Err(SolveError::NoConvergence {
            stationarity: best.report.stationarity_residual,
            complementarity: best.report.complementarity_residual,
            feasibility: best.report.feasibility_violation,
        });
    }
    good.sort_by(|a, b| a.j.total_cmp(&b.j).then(a.start.cmp(&b.start)));
    let best = good[0];
    let spread = good
        .iter()
        .map(|c| (c.j - best.j).abs() / best.j.abs().max(1.0))
        .fold(0.0, f64::max);
    let mut warnings: Vec<String> = Vec::new();
    if spread > 1e-6 {
        warnings.push(format!(
            "multistart optima differ by {spread:.3e} relative; the hour may be nonconvex"
        ));
    }
    for flag in &best.report.flags {
        warnings.push(flag.to_string());
    }
    let r = &best.report;
    Ok(KktPoint {
        x0: best.x.clone(),
        lambda: best.lambda.clone(),
        j0: best.j,
        stationarity_residual: r.stationarity_residual,
        complementarity_residual: r.complementarity_residual,
        feasibility_violation: r.feasibility_violation,
        active_set: r.active_set.clone(),
        strict_complementarity_ok: r.strict_complementarity_ok,
        licq_ok: r.licq_ok,
        rng_seed: cfg.rng_seed,
        start_index: best.start,
        iterations: best.iterations,
        starts_converged: good.len(),
        multistart_spread: spread,
        warnings,
    })
}

/// Recomputes every KKT residual group at `(x, λ)` from model derivatives.
pub fn verify_kkt(x: &DecisionVector, lambda: &[f64], w: &ExogenousVector, cfg: &SolverConfig) -> KktReport {
    let zones = w.params.zone_count;
    let layout = RowLayout { zones };
    let n = layout.count();
    assert_eq!(x.m_sa.len(), zones, "decision vector has the wrong zone count");
    assert_eq!(lambda.len(), n, "multiplier vector has the wrong length");
    let mut flags = Vec::new();
    let d = derivatives_selected(x, w, &[]);
    let m = x.m_sa.len() + 4;

    let mut stationarity = 0.0_f64;
    for j in 0..m {
        let mut r = d.objective.grad_x[j];
        let mut scale = 1.0_f64.max(r.abs());
        for (l, row) in lambda.iter().zip(&d.rows) {
            let term = l * row.grad_x[j];
            r += term;
            scale = scale.max(term.abs());
        }
        stationarity = stationarity.max(r.abs() / scale);
    }
    if stationarity > cfg.kkt_tol {
        flags.push(KktFlag::Stationarity(stationarity));
    }

    let j_val = hvac_model::objective(x, w).unwrap_or(d.objective.value);
    let j_scale = j_val.abs().max(1.0);
    let h: Vec<f64> = d.rows.iter().map(|r| r.value).collect();
    let complementarity = lambda
        .iter()
        .zip(&h)
        .map(|(l, hi)| (l * hi).abs())
        .fold(0.0, f64::max)
        / j_scale;
    if complementarity > cfg.kkt_tol {
        flags.push(KktFlag::Complementarity(complementarity));
    }

    let mut feasibility = 0.0_f64;
    for (row, &hi) in h.iter().enumerate() {
        if hi > cfg.feas_tol {
            flags.push(KktFlag::Feasibility { row, value: hi });
        }
        feasibility = feasibility.max(hi.max(0.0));
    }

    let mut min_multiplier = f64::INFINITY;
    for (row, &l) in lambda.iter().enumerate() {
        min_multiplier = min_multiplier.min(l);
        if l < 0.0 {
            flags.push(KktFlag::NegativeMultiplier { row, value: l });
        }
    }

    let scales = row_scales(w).unwrap_or_else(|_| vec![1.0; n]);
    let active_set: Vec<usize> = (0..n).filter(|&i| h[i].abs() <= cfg.act_tol * scales[i]).collect();

    let mut strict = true;
    for &row in &active_set {
        if row == layout.balance_pos() || row == layout.balance_neg() {
            continue;
        }
        if lambda[row] * scales[row] / j_scale <= 1e-8 {
            strict = false;
            flags.push(KktFlag::Degenerate { row });
        }
    }

    let sx = decision_scales(w);
    let grads: Vec<DVector<f64>> = active_set
        .iter()
        .filter(|&&r| r != layout.balance_neg())
        .map(|&r| DVector::from_iterator(m, d.rows[r].grad_x.iter().zip(&sx).map(|(g, s)| g * s)))
        .collect();
    let indexed: Vec<(usize, &DVector<f64>)> = grads.iter().enumerate().collect();
    let licq = grads.len() <= m && independent_rows(&indexed, m).len() == grads.len();
    if !licq {
        flags.push(KktFlag::LicqFailure);
    }

    let dl = DecisionLayout { zones };
    let xv = x.to_vec();
    KktReport {
        stationarity_residual: stationarity,
        complementarity_residual: complementarity,
        feasibility_violation: feasibility,
        min_multiplier,
        active_set,
        strict_complementarity_ok: strict,
        licq_ok: licq,
        heat_cool_overlap: xv[dl.q_h()].min(xv[dl.q_c()]),
        flags,
    }
}
