//! Single-duct AHU with VAV reheat terminals.
//!
//! Decision variables are the supply-air temperature, outdoor-air flow,
//! per-zone supply flows, and a split of the AHU coil duty into a heating
//! part `q_h` and a cooling part `q_c`. Return-air flow and discharge
//! temperatures are eliminated analytically, so the feasible set is a pure
//! list of smooth inequalities `h(x, w) ≤ 0`.
//!
//! All quantities are SI: W, kg/s, °C.

use std::collections::BTreeMap;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::ad::{Jet, Scalar};

pub const SECONDS_PER_HOUR: f64 = 3600.0;
pub const T_SA_MIN: f64 = 12.0;
pub const T_SA_MAX: f64 = 37.0;
pub const T_DA_MAX: f64 = 37.0;
/// Chiller loads at or below this fraction of the rating count as "off".
pub const CHILLER_OFF_FRACTION: f64 = 1e-6;

/// Number of scalar equipment parameters carried in the exogenous vector.
pub const SCALAR_PARAM_COUNT: usize = 21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("zone {zone} supply flow {flow} kg/s is below the flow floor {floor} kg/s")]
    DegenerateFlow { zone: usize, flow: f64, floor: f64 },
    #[error("boiler efficiency curve is non-positive ({eta_eff}) at part-load ratio {plr}")]
    InvalidCurve { plr: f64, eta_eff: f64 },
    #[error("infeasible hour: total ventilation minimum {required} kg/s exceeds design flow {design} kg/s")]
    VentilationExceedsDesign { required: f64, design: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid inputs: {0}")]
    InvalidInputs(String),
    #[error("unknown exogenous label `{0}`")]
    UnknownLabel(String),
}

pub fn j_per_hr_to_w(v: f64) -> f64 {
    v / SECONDS_PER_HOUR
}

pub fn w_to_j_per_hr(v: f64) -> f64 {
    v * SECONDS_PER_HOUR
}

#[derive(Debug, Clone, PartialEq)]
pub struct FanParams {
    /// Design pressure rise, Pa.
    pub delta_p: f64,
    pub eta_tot: f64,
    pub rho_air: f64,
    pub m_design: f64,
    pub c_f: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoilerParams {
    pub q_b_rated: f64,
    pub eta_thermal: f64,
    pub c_b: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChillerParams {
    pub q_e_rated: f64,
    pub p_pump: f64,
    pub c_g: [f64; 3],
}

/// Equipment constants. Defaults are the nominal small-office values,
/// with ratings converted from J/hr to W.
#[derive(Debug, Clone, PartialEq)]
pub struct HvacParameters {
    pub zone_count: usize,
    pub c_p: f64,
    pub fan: FanParams,
    pub boiler: BoilerParams,
    pub chiller: ChillerParams,
    pub alpha_el: f64,
    pub alpha_ng: f64,
    pub flow_floor: f64,
}

impl Default for HvacParameters {
    fn default() -> Self {
        Self {
            zone_count: 5,
            c_p: 1005.0,
            fan: FanParams {
                delta_p: 1000.0,
                eta_tot: 0.7,
                rho_air: 1.225,
                m_design: 2.98,
                c_f: [0.3507, 0.3085, -0.5413, 0.8719],
            },
            boiler: BoilerParams {
                q_b_rated: j_per_hr_to_w(1.09e8),
                eta_thermal: 0.8,
                c_b: [0.97, 0.0633, -0.0333],
            },
            chiller: ChillerParams {
                q_e_rated: j_per_hr_to_w(1.47e8),
                p_pump: j_per_hr_to_w(1.8e6),
                c_g: [0.03303, 0.6852, 0.2818],
            },
            alpha_el: 3.167,
            alpha_ng: 1.084,
            flow_floor: 1e-3,
        }
    }
}

const PARAM_LABELS: [&str; SCALAR_PARAM_COUNT] = [
    "c_p",
    "delta_P",
    "eta_tot",
    "rho_air",
    "m_design",
    "c_f_1",
    "c_f_2",
    "c_f_3",
    "c_f_4",
    "Q_b_rated",
    "eta_thermal",
    "c_b_1",
    "c_b_2",
    "c_b_3",
    "Q_e_rated",
    "P_pump",
    "c_g_1",
    "c_g_2",
    "c_g_3",
    "alpha_el",
    "alpha_ng",
];

impl HvacParameters {
    pub fn scalar_labels() -> &'static [&'static str] {
        &PARAM_LABELS
    }

    /// Scalar parameters in registry order.
    pub fn scalars(&self) -> [f64; SCALAR_PARAM_COUNT] {
        let f = &self.fan;
        let b = &self.boiler;
        let c = &self.chiller;
        [
            self.c_p,
            f.delta_p,
            f.eta_tot,
            f.rho_air,
            f.m_design,
            f.c_f[0],
            f.c_f[1],
            f.c_f[2],
            f.c_f[3],
            b.q_b_rated,
            b.eta_thermal,
            b.c_b[0],
            b.c_b[1],
            b.c_b[2],
            c.q_e_rated,
            c.p_pump,
            c.c_g[0],
            c.c_g[1],
            c.c_g[2],
            self.alpha_el,
            self.alpha_ng,
        ]
    }

    pub fn with_scalars(&self, s: &[f64]) -> Self {
        assert_eq!(s.len(), SCALAR_PARAM_COUNT);
        Self {
            zone_count: self.zone_count,
            c_p: s[0],
            fan: FanParams {
                delta_p: s[1],
                eta_tot: s[2],
                rho_air: s[3],
                m_design: s[4],
                c_f: [s[5], s[6], s[7], s[8]],
            },
            boiler: BoilerParams {
                q_b_rated: s[9],
                eta_thermal: s[10],
                c_b: [s[11], s[12], s[13]],
            },
            chiller: ChillerParams {
                q_e_rated: s[14],
                p_pump: s[15],
                c_g: [s[16], s[17], s[18]],
            },
            alpha_el: s[19],
            alpha_ng: s[20],
            flow_floor: self.flow_floor,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.zone_count == 0 {
            return Err(ModelError::InvalidParameters("zone_count must be at least 1".into()));
        }
        let s = self.scalars();
        for (label, v) in PARAM_LABELS.iter().zip(s) {
            if !v.is_finite() {
                return Err(ModelError::InvalidParameters(format!("{label} is not finite")));
            }
        }
        let positive = [
            ("c_p", self.c_p),
            ("delta_P", self.fan.delta_p),
            ("rho_air", self.fan.rho_air),
            ("m_design", self.fan.m_design),
            ("Q_b_rated", self.boiler.q_b_rated),
            ("Q_e_rated", self.chiller.q_e_rated),
            ("P_pump", self.chiller.p_pump),
            ("alpha_el", self.alpha_el),
            ("alpha_ng", self.alpha_ng),
            ("flow_floor", self.flow_floor),
        ];
        for (label, v) in positive {
            if !(v > 0.0) {
                return Err(ModelError::InvalidParameters(format!("{label} must be positive, got {v}")));
            }
        }
        for (label, v) in [("eta_tot", self.fan.eta_tot), ("eta_thermal", self.boiler.eta_thermal)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ModelError::InvalidParameters(format!("{label} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Parameters as a flat JSON object keyed by registry labels.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("zone_count".into(), Value::from(self.zone_count));
        for (label, v) in PARAM_LABELS.iter().zip(self.scalars()) {
            map.insert((*label).into(), Value::from(v));
        }
        map.insert("flow_floor".into(), Value::from(self.flow_floor));
        Value::Object(map)
    }

    /// Parses a flat JSON parameter document; absent keys keep defaults.
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ModelError::InvalidParameters(format!("malformed JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(ModelError::InvalidParameters("parameter file must be a JSON object".into()));
        };
        let mut params = Self::default();
        let mut scalars = params.scalars();
        for (key, v) in map {
            let num = v
                .as_f64()
                .ok_or_else(|| ModelError::InvalidParameters(format!("`{key}` must be a number")))?;
            match key.as_str() {
                "zone_count" => {
                    let n = v
                        .as_u64()
                        .ok_or_else(|| ModelError::InvalidParameters("`zone_count` must be a positive integer".into()))?;
                    params.zone_count = n as usize;
                }
                "flow_floor" => params.flow_floor = num,
                other => {
                    let idx = PARAM_LABELS
                        .iter()
                        .position(|l| *l == other)
                        .ok_or_else(|| ModelError::InvalidParameters(format!("unknown parameter `{other}`")))?;
                    scalars[idx] = num;
                }
            }
        }
        params = params.with_scalars(&scalars);
        params.validate()?;
        Ok(params)
    }
}

/// Per-zone loads and requirements for one hour.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneInputs {
    /// Positive = heat must be delivered to the zone, W.
    pub q_zone: Vec<f64>,
    pub t_sp: Vec<f64>,
    pub m_oa_min: Vec<f64>,
}

impl ZoneInputs {
    pub fn uniform(n: usize, q_zone: f64, t_sp: f64, m_oa_min: f64) -> Self {
        Self {
            q_zone: vec![q_zone; n],
            t_sp: vec![t_sp; n],
            m_oa_min: vec![m_oa_min; n],
        }
    }

    pub fn len(&self) -> usize {
        self.q_zone.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_zone.is_empty()
    }
}

/// Exogenous inputs and parameters, addressable as one flat labelled
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousVector {
    pub t_oa: f64,
    pub zones: ZoneInputs,
    pub params: HvacParameters,
}

/// Offsets of the flat exogenous vector for `n` zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExoLayout {
    pub zones: usize,
}

impl ExoLayout {
    pub const T_OA: usize = 0;

    pub fn q_zone(&self, i: usize) -> usize {
        1 + i
    }
    pub fn t_sp(&self, i: usize) -> usize {
        1 + self.zones + i
    }
    pub fn m_oa_min(&self, i: usize) -> usize {
        1 + 2 * self.zones + i
    }
    pub fn param(&self, k: usize) -> usize {
        1 + 3 * self.zones + k
    }
    pub fn dim(&self) -> usize {
        1 + 3 * self.zones + SCALAR_PARAM_COUNT
    }

    pub fn labels(&self) -> Vec<String> {
        let n = self.zones;
        let mut out = Vec::with_capacity(self.dim());
        out.push("T_oa".to_string());
        out.extend((1..=n).map(|i| format!("Q_zone_{i}")));
        out.extend((1..=n).map(|i| format!("T_sp_{i}")));
        out.extend((1..=n).map(|i| format!("m_oa_min_{i}")));
        out.extend(PARAM_LABELS.iter().map(|s| s.to_string()));
        out
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels().iter().position(|l| l == label)
    }
}

impl ExogenousVector {
    pub fn new(t_oa: f64, zones: ZoneInputs, params: HvacParameters) -> Result<Self, ModelError> {
        let w = Self { t_oa, zones, params };
        w.validate()?;
        Ok(w)
    }

    pub fn layout(&self) -> ExoLayout {
        ExoLayout {
            zones: self.params.zone_count,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn labels(&self) -> Vec<String> {
        self.layout().labels()
    }

    /// Structural checks plus the ventilation-vs-design feasibility test.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.params.validate()?;
        let n = self.params.zone_count;
        let z = &self.zones;
        if z.q_zone.len() != n || z.t_sp.len() != n || z.m_oa_min.len() != n {
            return Err(ModelError::InvalidInputs(format!(
                "expected {n} zones, got {}/{}/{} entries",
                z.q_zone.len(),
                z.t_sp.len(),
                z.m_oa_min.len()
            )));
        }
        if !self.t_oa.is_finite() {
            return Err(ModelError::InvalidInputs("T_oa is not finite".into()));
        }
        for i in 0..n {
            if !(z.q_zone[i].is_finite() && z.t_sp[i].is_finite() && z.m_oa_min[i].is_finite()) {
                return Err(ModelError::InvalidInputs(format!("zone {} has a non-finite entry", i + 1)));
            }
            if z.m_oa_min[i] < 0.0 {
                return Err(ModelError::InvalidInputs(format!("zone {} ventilation minimum is negative", i + 1)));
            }
        }
        let required: f64 = z.m_oa_min.iter().sum();
        if required > self.params.fan.m_design {
            return Err(ModelError::VentilationExceedsDesign {
                required,
                design: self.params.fan.m_design,
            });
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.t_oa);
        v.extend_from_slice(&self.zones.q_zone);
        v.extend_from_slice(&self.zones.t_sp);
        v.extend_from_slice(&self.zones.m_oa_min);
        v.extend_from_slice(&self.params.scalars());
        v
    }

    /// Rebuilds a structured vector from flat values; zone count and flow
    /// floor come from `self`. No validation is applied.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let layout = self.layout();
        assert_eq!(flat.len(), layout.dim(), "flat exogenous vector has wrong length");
        let n = layout.zones;
        Self {
            t_oa: flat[ExoLayout::T_OA],
            zones: ZoneInputs {
                q_zone: flat[layout.q_zone(0)..layout.q_zone(0) + n].to_vec(),
                t_sp: flat[layout.t_sp(0)..layout.t_sp(0) + n].to_vec(),
                m_oa_min: flat[layout.m_oa_min(0)..layout.m_oa_min(0) + n].to_vec(),
            },
            params: self.params.with_scalars(&flat[layout.param(0)..]),
        }
    }

    /// Labelled values, in registry order.
    pub fn registry(&self) -> Vec<(String, f64)> {
        self.labels().into_iter().zip(self.to_flat()).collect()
    }

    pub fn registry_map(&self) -> BTreeMap<String, f64> {
        self.registry().into_iter().collect()
    }
}

/// Indices into the decision vector for `n` zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub zones: usize,
}

impl DecisionLayout {
    pub const T_SA: usize = 0;
    pub const M_OA: usize = 1;

    pub fn m_sa(&self, i: usize) -> usize {
        2 + i
    }
    pub fn q_h(&self) -> usize {
        2 + self.zones
    }
    pub fn q_c(&self) -> usize {
        3 + self.zones
    }
    pub fn dim(&self) -> usize {
        4 + self.zones
    }
    pub fn labels(&self) -> Vec<String> {
        let mut out = vec!["T_sa".to_string(), "m_oa".to_string()];
        out.extend((1..=self.zones).map(|i| format!("m_sa_{i}")));
        out.push("q_h".into());
        out.push("q_c".into());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    pub t_sa: f64,
    pub m_oa: f64,
    pub m_sa: Vec<f64>,
    /// AHU heating-coil duty, W.
    pub q_h: f64,
    /// AHU cooling-coil duty, W.
    pub q_c: f64,
}

impl DecisionVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.m_sa.len() + 4);
        v.push(self.t_sa);
        v.push(self.m_oa);
        v.extend_from_slice(&self.m_sa);
        v.push(self.q_h);
        v.push(self.q_c);
        v
    }

    pub fn from_slice(x: &[f64]) -> Self {
        assert!(x.len() >= 5, "decision vector needs at least one zone");
        let n = x.len() - 4;
        Self {
            t_sa: x[0],
            m_oa: x[1],
            m_sa: x[2..2 + n].to_vec(),
            q_h: x[2 + n],
            q_c: x[3 + n],
        }
    }

    pub fn m_sa_total(&self) -> f64 {
        self.m_sa.iter().sum()
    }
}

/// Every derived quantity of the air loop and plant at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub m_sa_total: f64,
    pub m_ra: f64,
    pub t_ra: f64,
    pub t_ma: f64,
    pub t_da: Vec<f64>,
    pub q_ahu: f64,
    pub q_reheat: Vec<f64>,
    pub q_b: f64,
    pub q_e: f64,
    pub f_flow: f64,
    pub f_pl: f64,
    pub plr_b: f64,
    pub plr_e: f64,
    pub eta_eff: f64,
    pub f_gen: f64,
    pub p_fan: f64,
    pub p_boiler: f64,
    pub p_chiller: f64,
    /// Source power, W.
    pub j: f64,
}

/// Fan part-load factor.
pub fn fan_part_load(f_flow: f64, params: &HvacParameters) -> f64 {
    let c = &params.fan.c_f;
    c[0] + f_flow * (c[1] + f_flow * (c[2] + f_flow * c[3]))
}

pub fn fan_power(m_sa_total: f64, params: &HvacParameters) -> f64 {
    let fan = &params.fan;
    let f_pl = fan_part_load(m_sa_total / fan.m_design, params);
    fan.delta_p / (fan.eta_tot * fan.rho_air) * fan.m_design * f_pl
}

pub fn boiler_efficiency(plr_b: f64, params: &HvacParameters) -> f64 {
    let c = &params.boiler.c_b;
    c[0] + plr_b * (c[1] + plr_b * c[2])
}

pub fn boiler_power(q_b: f64, params: &HvacParameters) -> Result<f64, ModelError> {
    if q_b == 0.0 {
        return Ok(0.0);
    }
    let plr = q_b / params.boiler.q_b_rated;
    let eta_eff = boiler_efficiency(plr, params);
    if eta_eff <= 0.0 {
        return Err(ModelError::InvalidCurve { plr, eta_eff });
    }
    Ok(q_b / (params.boiler.eta_thermal * eta_eff))
}

/// Generator heat-input ratio, `f_gen`, at a part-load ratio.
pub fn chiller_heat_input_ratio(plr_e: f64, params: &HvacParameters) -> f64 {
    let c = &params.chiller.c_g;
    c[0] / plr_e + c[1] + c[2] * plr_e
}

/// `f_gen·Q_e + P_pump` in expanded form, without the off switch.
pub fn chiller_power_running(q_e: f64, params: &HvacParameters) -> f64 {
    let ch = &params.chiller;
    let c = &ch.c_g;
    c[0] * ch.q_e_rated + c[1] * q_e + c[2] * q_e * q_e / ch.q_e_rated + ch.p_pump
}

pub fn chiller_is_off(q_e: f64, params: &HvacParameters) -> bool {
    q_e <= CHILLER_OFF_FRACTION * params.chiller.q_e_rated
}

/// Chiller electrical power; exactly zero when the unit is off.
pub fn chiller_power(q_e: f64, params: &HvacParameters) -> f64 {
    if chiller_is_off(q_e, params) {
        0.0
    } else {
        chiller_power_running(q_e, params)
    }
}

fn check_dims(x: &DecisionVector, w: &ExogenousVector) {
    assert_eq!(
        x.m_sa.len(),
        w.params.zone_count,
        "decision vector zone count does not match parameters"
    );
}

pub fn evaluate(x: &DecisionVector, w: &ExogenousVector) -> Result<OperatingPoint, ModelError> {
    check_dims(x, w);
    let p = &w.params;
    for (i, &m) in x.m_sa.iter().enumerate() {
        if !(m >= p.flow_floor) {
            return Err(ModelError::DegenerateFlow {
                zone: i + 1,
                flow: m,
                floor: p.flow_floor,
            });
        }
    }
    let z = &w.zones;
    let m_sa_total = x.m_sa_total();
    let t_ra = x.m_sa.iter().zip(&z.t_sp).map(|(m, t)| m * t).sum::<f64>() / m_sa_total;
    let m_ra = m_sa_total - x.m_oa;
    let t_ma = (m_ra * t_ra + x.m_oa * w.t_oa) / m_sa_total;
    let t_da: Vec<f64> = (0..x.m_sa.len())
        .map(|i| z.t_sp[i] + z.q_zone[i] / (p.c_p * x.m_sa[i]))
        .collect();
    let q_ahu = p.c_p * m_sa_total * (x.t_sa - t_ma);
    let q_reheat: Vec<f64> = (0..x.m_sa.len())
        .map(|i| p.c_p * x.m_sa[i] * (t_da[i] - x.t_sa))
        .collect();
    let q_b = q_reheat.iter().sum::<f64>() + x.q_h;
    let q_e = x.q_c;
    let f_flow = m_sa_total / p.fan.m_design;
    let f_pl = fan_part_load(f_flow, p);
    let plr_b = q_b / p.boiler.q_b_rated;
    let plr_e = q_e / p.chiller.q_e_rated;
    let eta_eff = boiler_efficiency(plr_b, p);
    let f_gen = chiller_heat_input_ratio(plr_e, p);
    let p_fan = fan_power(m_sa_total, p);
    let p_boiler = boiler_power(q_b, p)?;
    let p_chiller = chiller_power(q_e, p);
    let j = p.alpha_el * (p_fan + p_chiller) + p.alpha_ng * p_boiler;
    Ok(OperatingPoint {
        m_sa_total,
        m_ra,
        t_ra,
        t_ma,
        t_da,
        q_ahu,
        q_reheat,
        q_b,
        q_e,
        f_flow,
        f_pl,
        plr_b,
        plr_e,
        eta_eff,
        f_gen,
        p_fan,
        p_boiler,
        p_chiller,
        j,
    })
}

/// Reported source power, with the chiller off switch applied.
pub fn objective(x: &DecisionVector, w: &ExogenousVector) -> Result<f64, ModelError> {
    evaluate(x, w).map(|op| op.j)
}

/// Slice-based variant of [`objective`] for flat decision and exogenous
/// vectors.
pub fn objective_flat(x: &[f64], w: &ExogenousVector, w_flat: &[f64]) -> Result<f64, ModelError> {
    let ws = w.with_flat(w_flat);
    objective(&DecisionVector::from_slice(x), &ws)
}

/// Named view of a generic flat exogenous vector.
struct ExoView<'a, S> {
    w: &'a [S],
    layout: ExoLayout,
}

impl<'a, S: Scalar> ExoView<'a, S> {
    fn t_oa(&self) -> S {
        self.w[ExoLayout::T_OA].clone()
    }
    fn q_zone(&self, i: usize) -> S {
        self.w[self.layout.q_zone(i)].clone()
    }
    fn t_sp(&self, i: usize) -> S {
        self.w[self.layout.t_sp(i)].clone()
    }
    fn m_oa_min(&self, i: usize) -> S {
        self.w[self.layout.m_oa_min(i)].clone()
    }
    fn p(&self, k: usize) -> S {
        self.w[self.layout.param(k)].clone()
    }
    fn c_p(&self) -> S {
        self.p(0)
    }
    fn m_design(&self) -> S {
        self.p(4)
    }
    fn q_b_rated(&self) -> S {
        self.p(9)
    }
    fn q_e_rated(&self) -> S {
        self.p(14)
    }
}

fn sum<S: Scalar>(items: impl Iterator<Item = S>, zero: S) -> S {
    items.fold(zero, |acc, v| acc + v)
}

struct LoopTerms<S> {
    m_tot: S,
    q_ahu: S,
    q_b: S,
}

fn loop_terms<S: Scalar>(x: &[S], v: &ExoView<S>) -> LoopTerms<S> {
    let n = v.layout.zones;
    let d = DecisionLayout { zones: n };
    let t_sa = x[DecisionLayout::T_SA].clone();
    let m_oa = x[DecisionLayout::M_OA].clone();
    let zero = t_sa.constant_like(0.0);
    let m_tot = sum((0..n).map(|i| x[d.m_sa(i)].clone()), zero.clone());
    let weighted_sp = sum((0..n).map(|i| x[d.m_sa(i)].clone() * v.t_sp(i)), zero.clone());
    let t_ra = weighted_sp.clone() / m_tot.clone();
    let q_ahu = v.c_p() * (m_tot.clone() * t_sa.clone() - weighted_sp + m_oa * (t_ra - v.t_oa()));
    // Reheat duty Q_zone + c_p·m·(T_sp − T_sa) is the discharge-temperature
    // form with T_da eliminated.
    let reheat = sum(
        (0..n).map(|i| v.q_zone(i) + v.c_p() * x[d.m_sa(i)].clone() * (v.t_sp(i) - t_sa.clone())),
        zero,
    );
    let q_b = reheat + x[d.q_h()].clone();
    LoopTerms { m_tot, q_ahu, q_b }
}

/// Smooth source-power objective: the chiller always runs on its
/// expanded curve. This is what the optimizer sees.
pub fn smooth_objective_generic<S: Scalar>(x: &[S], w: &[S], zones: usize) -> S {
    let v = ExoView {
        w,
        layout: ExoLayout { zones },
    };
    let d = DecisionLayout { zones };
    let t = loop_terms(x, &v);
    let f_flow = t.m_tot / v.m_design();
    let f_pl = v.p(5) + f_flow.clone() * (v.p(6) + f_flow.clone() * (v.p(7) + f_flow * v.p(8)));
    let p_fan = v.p(1) / (v.p(2) * v.p(3)) * v.m_design() * f_pl;
    let plr_b = t.q_b.clone() / v.q_b_rated();
    let eta_eff = v.p(11) + plr_b.clone() * (v.p(12) + plr_b * v.p(13));
    let p_boiler = t.q_b / (v.p(10) * eta_eff);
    let q_c = x[d.q_c()].clone();
    let p_chiller =
        v.p(16) * v.q_e_rated() + v.p(17) * q_c.clone() + v.p(18) * q_c.clone() * q_c / v.q_e_rated() + v.p(15);
    v.p(19) * (p_fan + p_chiller) + v.p(20) * p_boiler
}

/// Chiller standby term `c_g,1·Q_e_rated + P_pump` that the off switch
/// removes from the smooth objective.
pub fn chiller_standby(params: &HvacParameters) -> f64 {
    params.chiller.c_g[0] * params.chiller.q_e_rated + params.chiller.p_pump
}

/// Inequality rows `h(x, w) ≤ 0`, ordered as described by [`RowLayout`].
pub fn constraints_generic<S: Scalar>(x: &[S], w: &[S], zones: usize) -> Vec<S> {
    let n = zones;
    let v = ExoView {
        w,
        layout: ExoLayout { zones },
    };
    let d = DecisionLayout { zones };
    let t = loop_terms(x, &v);
    let t_sa = x[DecisionLayout::T_SA].clone();
    let m_oa = x[DecisionLayout::M_OA].clone();
    let q_h = x[d.q_h()].clone();
    let q_c = x[d.q_c()].clone();
    let zero = t_sa.constant_like(0.0);
    let vent_total = sum((0..n).map(|i| v.m_oa_min(i)), zero.clone());
    let mut rows = Vec::with_capacity(RowLayout { zones }.count());
    rows.push(-(t_sa.clone() - T_SA_MIN));
    rows.push(t_sa.clone() - T_SA_MAX);
    rows.push(vent_total - m_oa.clone());
    rows.push(m_oa.clone() - v.m_design());
    rows.push(m_oa.clone() - t.m_tot.clone());
    rows.push(t.m_tot.clone() - v.m_design());
    for i in 0..n {
        rows.push(-x[d.m_sa(i)].clone());
    }
    for i in 0..n {
        rows.push(t.m_tot.clone() * v.m_oa_min(i) - x[d.m_sa(i)].clone() * m_oa.clone());
    }
    for i in 0..n {
        rows.push(v.c_p() * x[d.m_sa(i)].clone() * (t_sa.clone() - v.t_sp(i)) - v.q_zone(i));
    }
    for i in 0..n {
        rows.push(v.q_zone(i) - v.c_p() * x[d.m_sa(i)].clone() * (-(v.t_sp(i) - T_DA_MAX)));
    }
    rows.push(-q_h.clone());
    rows.push(q_h.clone() - v.q_b_rated());
    rows.push(-q_c.clone());
    rows.push(q_c.clone() - v.q_e_rated());
    rows.push(-t.q_b.clone());
    rows.push(t.q_b - v.q_b_rated());
    let balance = q_h - q_c - t.q_ahu;
    rows.push(balance.clone());
    rows.push(-balance);
    rows
}

/// Row indices of the constraint vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLayout {
    pub zones: usize,
}

impl RowLayout {
    pub const T_SA_MIN: usize = 0;
    pub const T_SA_MAX: usize = 1;
    pub const M_OA_MIN: usize = 2;
    pub const M_OA_MAX: usize = 3;
    pub const M_RA_NONNEG: usize = 4;
    pub const M_SA_TOTAL_MAX: usize = 5;

    pub fn flow_floor(&self, i: usize) -> usize {
        6 + i
    }
    pub fn ventilation(&self, i: usize) -> usize {
        6 + self.zones + i
    }
    pub fn t_da_lower(&self, i: usize) -> usize {
        6 + 2 * self.zones + i
    }
    pub fn t_da_upper(&self, i: usize) -> usize {
        6 + 3 * self.zones + i
    }
    fn tail(&self) -> usize {
        6 + 4 * self.zones
    }
    pub fn q_h_nonneg(&self) -> usize {
        self.tail()
    }
    pub fn q_h_max(&self) -> usize {
        self.tail() + 1
    }
    pub fn q_c_nonneg(&self) -> usize {
        self.tail() + 2
    }
    pub fn q_c_max(&self) -> usize {
        self.tail() + 3
    }
    pub fn q_b_nonneg(&self) -> usize {
        self.tail() + 4
    }
    pub fn q_b_max(&self) -> usize {
        self.tail() + 5
    }
    pub fn balance_pos(&self) -> usize {
        self.tail() + 6
    }
    pub fn balance_neg(&self) -> usize {
        self.tail() + 7
    }
    pub fn count(&self) -> usize {
        self.tail() + 8
    }

    pub fn labels(&self) -> Vec<String> {
        let n = self.zones;
        let mut out: Vec<String> = ["T_sa_min", "T_sa_max", "m_oa_min", "m_oa_max", "m_ra_nonneg", "m_sa_total_max"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for prefix in ["m_sa_floor", "ventilation", "T_da_ge_T_sa", "T_da_max"] {
            out.extend((1..=n).map(|i| format!("{prefix}_{i}")));
        }
        out.extend(
            [
                "q_h_nonneg",
                "q_h_max",
                "q_c_nonneg",
                "q_c_max",
                "Q_b_nonneg",
                "Q_b_max",
                "ahu_balance_pos",
                "ahu_balance_neg",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        out
    }
}

/// Constraint vector at `(x, w)`; rows ≤ 0 are satisfied.
pub fn constraints(x: &DecisionVector, w: &ExogenousVector) -> Vec<f64> {
    check_dims(x, w);
    let n = w.params.zone_count;
    let mut rows = constraints_generic(&x.to_vec(), &w.to_flat(), n);
    // The flow-floor rows carry the floor as a constant offset.
    for i in 0..n {
        rows[RowLayout { zones: n }.flow_floor(i)] += w.params.flow_floor;
    }
    rows
}

/// Adds the flow-floor offset to generic constraint rows.
pub fn apply_flow_floor<S: Scalar>(rows: &mut [S], zones: usize, floor: f64) {
    let layout = RowLayout { zones };
    for i in 0..zones {
        let k = layout.flow_floor(i);
        rows[k] = rows[k].clone() + floor;
    }
}

/// First and second derivatives of one scalar function with respect to
/// `(x, w_selected)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDerivatives {
    pub value: f64,
    pub grad_x: Vec<f64>,
    /// m×m, row-major.
    pub hess_xx: Vec<f64>,
    pub grad_w: Vec<f64>,
    /// m×q, row-major (q = number of selected exogenous coordinates).
    pub hess_xw: Vec<f64>,
}

impl FunctionDerivatives {
    fn from_jet(jet: &Jet, m: usize) -> Self {
        let k = jet.dim();
        let q = k - m;
        let mut hess_xx = Vec::with_capacity(m * m);
        let mut hess_xw = Vec::with_capacity(m * q);
        for i in 0..m {
            for j in 0..m {
                hess_xx.push(jet.hess(i, j));
            }
            for j in 0..q {
                hess_xw.push(jet.hess(i, m + j));
            }
        }
        Self {
            value: jet.v,
            grad_x: jet.g[..m].to_vec(),
            hess_xx,
            grad_w: jet.g[m..].to_vec(),
            hess_xw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDerivatives {
    /// Exogenous coordinates the `*_w` blocks refer to.
    pub w_indices: Vec<usize>,
    /// Smooth objective.
    pub objective: FunctionDerivatives,
    pub rows: Vec<FunctionDerivatives>,
}

/// Derivatives of the smooth objective and every constraint row with
/// respect to x and the selected exogenous coordinates.
pub fn derivatives_selected(x: &DecisionVector, w: &ExogenousVector, w_indices: &[usize]) -> ModelDerivatives {
    check_dims(x, w);
    let n = w.params.zone_count;
    let xv = x.to_vec();
    let wv = w.to_flat();
    let m = xv.len();
    let k = m + w_indices.len();
    let xj: Vec<Jet> = xv.iter().enumerate().map(|(i, v)| Jet::variable(*v, i, k)).collect();
    let mut wj: Vec<Jet> = wv.iter().map(|v| Jet::constant(*v, k)).collect();
    for (pos, &idx) in w_indices.iter().enumerate() {
        wj[idx] = Jet::variable(wv[idx], m + pos, k);
    }
    let obj = smooth_objective_generic(&xj, &wj, n);
    let mut rows = constraints_generic(&xj, &wj, n);
    apply_flow_floor(&mut rows, n, w.params.flow_floor);
    ModelDerivatives {
        w_indices: w_indices.to_vec(),
        objective: FunctionDerivatives::from_jet(&obj, m),
        rows: rows.iter().map(|r| FunctionDerivatives::from_jet(r, m)).collect(),
    }
}

/// Derivatives with respect to x and the full exogenous vector.
pub fn derivatives(x: &DecisionVector, w: &ExogenousVector) -> ModelDerivatives {
    let all: Vec<usize> = (0..w.dim()).collect();
    derivatives_selected(x, w, &all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal(t_oa: f64, q: f64) -> ExogenousVector {
        let p = HvacParameters::default();
        ExogenousVector::new(t_oa, ZoneInputs::uniform(p.zone_count, q, 22.0, 0.05), p).unwrap()
    }

    fn point(n: usize) -> DecisionVector {
        DecisionVector {
            t_sa: 14.0,
            m_oa: 0.6,
            m_sa: (0..n).map(|i| 0.3 + 0.05 * i as f64).collect(),
            q_h: 0.0,
            q_c: 9000.0,
        }
    }

    #[test]
    fn default_parameters_match_nominal_list() {
        let p = HvacParameters::default();
        assert_eq!(p.boiler.q_b_rated, 1.09e8 / 3600.0);
        assert_eq!(p.chiller.q_e_rated, 1.47e8 / 3600.0);
        assert_eq!(p.chiller.p_pump, 1.8e6 / 3600.0);
        assert_eq!(p.zone_count, 5);
        assert_eq!(p.c_p, 1005.0);
        assert_eq!(p.alpha_el, 3.167);
        assert_eq!(p.alpha_ng, 1.084);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn registry_dimension_and_roundtrip() {
        let w = nominal(30.0, -2000.0);
        assert_eq!(w.dim(), 1 + 3 * 5 + SCALAR_PARAM_COUNT);
        let labels = w.labels();
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), labels.len());
        let back = w.with_flat(&w.to_flat());
        assert_eq!(back, w);
        assert_eq!(w.layout().index_of("c_f_3"), Some(w.layout().param(7)));
    }

    #[test]
    fn uniform_setpoints_return_at_setpoint() {
        let w = nominal(30.0, 0.0);
        let mut x = point(5);
        x.m_sa = vec![0.4; 5];
        let op = evaluate(&x, &w).unwrap();
        assert!((op.t_ra - 22.0).abs() < 1e-12);
    }

    #[test]
    fn equal_mix_average() {
        let p = HvacParameters {
            zone_count: 1,
            ..HvacParameters::default()
        };
        let w = ExogenousVector::new(30.0, ZoneInputs::uniform(1, 0.0, 22.0, 0.05), p).unwrap();
        let x = DecisionVector {
            t_sa: 14.0,
            m_oa: 1.0,
            m_sa: vec![2.0],
            q_h: 0.0,
            q_c: 0.0,
        };
        let op = evaluate(&x, &w).unwrap();
        assert!((op.m_ra - 1.0).abs() < 1e-15);
        assert!((op.t_ma - 26.0).abs() < 1e-12);
        assert!((op.q_ahu - (-24120.0)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_flow_is_rejected() {
        let w = nominal(30.0, 0.0);
        let mut x = point(5);
        x.m_sa[2] = 1e-4;
        assert!(matches!(evaluate(&x, &w), Err(ModelError::DegenerateFlow { zone: 3, .. })));
    }

    #[test]
    fn fan_curve_examples() {
        let p = HvacParameters::default();
        assert!((fan_part_load(1.0, &p) - 0.9898).abs() < 1e-12);
        let full = fan_power(p.fan.m_design, &p);
        assert!((full - 1000.0 / 0.8575 * 2.98 * 0.9898).abs() < 1e-9);
        assert!((full - 3439.77).abs() < 0.01);
        assert!((fan_power(0.0, &p) - 1218.76).abs() < 0.01);
        let mut doubled = p.clone();
        doubled.fan.delta_p *= 2.0;
        assert!((fan_power(1.3, &doubled) - 2.0 * fan_power(1.3, &p)).abs() < 1e-9);
    }

    #[test]
    fn boiler_curve_examples() {
        let p = HvacParameters::default();
        assert!((boiler_efficiency(1.0, &p) - 1.0).abs() < 1e-12);
        let full = boiler_power(p.boiler.q_b_rated, &p).unwrap();
        assert!((w_to_j_per_hr(full) - 1.3625e8).abs() < 1e-3);
        assert_eq!(boiler_power(0.0, &p).unwrap(), 0.0);
        assert!((boiler_efficiency(0.5, &p) - 0.993325).abs() < 1e-12);
        let mut bad = p.clone();
        bad.boiler.c_b = [-1.0, 0.0, 0.0];
        assert!(matches!(boiler_power(10.0, &bad), Err(ModelError::InvalidCurve { .. })));
    }

    #[test]
    fn chiller_curve_examples() {
        let p = HvacParameters::default();
        assert!((chiller_heat_input_ratio(1.0, &p) - 1.00003).abs() < 1e-12);
        let full = w_to_j_per_hr(chiller_power(p.chiller.q_e_rated, &p));
        assert!((full - (1.00003 * 1.47e8 + 1.8e6)).abs() < 1e-3);
        assert_eq!(chiller_power(0.0, &p), 0.0);
        let standby = chiller_power_running(0.0, &p);
        assert!((standby - (0.03303 * 1.47e8 / 3600.0 + 500.0)).abs() < 1e-9);
        assert!((standby - 1848.7).abs() < 0.1);
        assert_eq!(standby, chiller_standby(&p));
    }

    #[test]
    fn objective_is_weighted_sum() {
        let w = nominal(30.0, -1500.0);
        let x = point(5);
        let op = evaluate(&x, &w).unwrap();
        let p = &w.params;
        assert_eq!(op.j, p.alpha_el * (op.p_fan + op.p_chiller) + p.alpha_ng * op.p_boiler);
        let mut w2 = w.clone();
        w2.params.alpha_el *= 2.0;
        let op2 = evaluate(&x, &w2).unwrap();
        let elec = p.alpha_el * (op.p_fan + op.p_chiller);
        assert!((op2.j - op.j - elec).abs() < 1e-9 * op.j);
    }

    #[test]
    fn fan_only_closed_form() {
        let w = nominal(22.0, 0.0);
        let x = DecisionVector {
            t_sa: 22.0,
            m_oa: 0.25,
            m_sa: vec![0.05; 5],
            q_h: 0.0,
            q_c: 0.0,
        };
        let op = evaluate(&x, &w).unwrap();
        assert!(op.q_b.abs() < 1e-9);
        assert_eq!(op.p_chiller, 0.0);
        let expected = w.params.alpha_el * fan_power(0.25, &w.params);
        assert!((op.j - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn constraint_count_and_active_rows() {
        let w = nominal(30.0, -2000.0);
        let rows = RowLayout { zones: 5 };
        assert_eq!(rows.count(), 14 + 4 * 5);
        assert_eq!(rows.labels().len(), rows.count());
        let mut x = point(5);
        x.t_sa = T_SA_MIN;
        let h = constraints(&x, &w);
        assert_eq!(h.len(), rows.count());
        assert_eq!(h[RowLayout::T_SA_MIN], 0.0);
        x.q_c = 0.0;
        assert_eq!(constraints(&x, &w)[rows.q_c_nonneg()], 0.0);
    }

    #[test]
    fn interior_point_has_all_rows_negative() {
        let p = HvacParameters::default();
        let w = ExogenousVector::new(24.0, ZoneInputs::uniform(5, -1000.0, 22.0, 0.05), p.clone()).unwrap();
        let m = 0.4;
        let t_sa = 18.0;
        let mut x = DecisionVector {
            t_sa,
            m_oa: 1.0,
            m_sa: vec![m; 5],
            q_h: 0.0,
            q_c: 0.0,
        };
        let op = evaluate(&x, &w).unwrap();
        // Split the coil duty with both parts strictly positive.
        x.q_h = 4000.0;
        x.q_c = x.q_h - op.q_ahu;
        let h = constraints(&x, &w);
        let layout = RowLayout { zones: 5 };
        for (k, v) in h.iter().enumerate() {
            if k == layout.balance_pos() || k == layout.balance_neg() {
                assert!(v.abs() < 1e-9);
            } else {
                assert!(*v < 0.0, "row {k} = {v}");
            }
        }
    }

    #[test]
    fn single_zone_ventilation_identity() {
        let p = HvacParameters {
            zone_count: 1,
            ..HvacParameters::default()
        };
        let w = ExogenousVector::new(25.0, ZoneInputs::uniform(1, -500.0, 22.0, 0.2), p).unwrap();
        let x = DecisionVector {
            t_sa: 15.0,
            m_oa: 0.2,
            m_sa: vec![0.7],
            q_h: 0.0,
            q_c: 100.0,
        };
        let h = constraints(&x, &w);
        assert!(h[RowLayout { zones: 1 }.ventilation(0)].abs() < 1e-15);
    }

    #[test]
    fn ventilation_above_design_is_infeasible() {
        let p = HvacParameters::default();
        let err = ExogenousVector::new(20.0, ZoneInputs::uniform(5, 0.0, 22.0, 0.7), p).unwrap_err();
        assert!(matches!(err, ModelError::VentilationExceedsDesign { .. }));
    }

    #[test]
    fn alpha_el_derivative_is_electric_power() {
        let w = nominal(30.0, -2000.0);
        let x = point(5);
        let d = derivatives(&x, &w);
        let op = evaluate(&x, &w).unwrap();
        let idx = w.layout().index_of("alpha_el").unwrap();
        assert!((d.objective.grad_w[idx] - (op.p_fan + op.p_chiller)).abs() < 1e-9 * op.j);
    }

    #[test]
    fn fan_slope_at_full_flow() {
        let p = HvacParameters::default();
        let c = p.fan.c_f;
        let k = p.fan.delta_p / (p.fan.eta_tot * p.fan.rho_air);
        let expected = k * (c[1] + 2.0 * c[2] + 3.0 * c[3]);
        let m = Jet::variable(p.fan.m_design, 0, 1);
        let f = m / p.fan.m_design;
        let jet = (f.clone() * (f.clone() * (f * c[3] + c[2]) + c[1]) + c[0]) * (k * p.fan.m_design);
        assert!((jet.g[0] - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn parameter_file_defaults_and_overrides() {
        let p = HvacParameters::from_json_str(r#"{"alpha_el": 2.5, "c_f_2": 0.3}"#).unwrap();
        assert_eq!(p.alpha_el, 2.5);
        assert_eq!(p.fan.c_f[1], 0.3);
        assert_eq!(p.c_p, 1005.0);
        assert!(HvacParameters::from_json_str(r#"{"bogus": 1}"#).is_err());
        assert!(HvacParameters::from_json_str(r#"{"eta_tot": 1.5}"#).is_err());
        let back = HvacParameters::from_json_str(&HvacParameters::default().to_json().to_string()).unwrap();
        assert_eq!(back, HvacParameters::default());
    }

    #[test]
    fn unit_conversion_is_stable() {
        let p = HvacParameters::default();
        for v in [p.boiler.q_b_rated, p.chiller.q_e_rated, p.chiller.p_pump] {
            let back = j_per_hr_to_w(w_to_j_per_hr(v));
            assert!((back - v).abs() <= f64::EPSILON * v);
        }
    }
}
