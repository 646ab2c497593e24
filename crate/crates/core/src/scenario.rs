//! Hourly day profiles and batched baseline + sensitivity runs.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::baseline_opt::{solve_baseline, SolverConfig};
use crate::hvac_model::{j_per_hr_to_w, w_to_j_per_hr, ExogenousVector, HvacParameters, ModelError, ZoneInputs};
use crate::report::{fmt_f64, to_json_string};
use crate::sensitivity::{
    holder_bound, BoundMethod, SensitivityError, SensitivityOperator, ShiftRoute, UncertaintySpec,
};

pub const DEFAULT_SAMPLES: usize = 10_000;
pub const SYNTH_ZONES: usize = 5;
pub const SYNTH_FIRST_HOUR: u32 = 9;
pub const SYNTH_HOURS: u32 = 7;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("hour {hour}: {source}")]
    InvalidHour { hour: u32, source: ModelError },
    #[error("profile has no hours")]
    EmptyProfile,
    #[error("nothing to export")]
    NoResults,
    #[error("every hour failed: {0}")]
    AllHoursFailed(String),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DayLabel {
    Hot,
    Moderate,
    Cold,
    Custom,
}

impl DayLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            DayLabel::Hot => "hot",
            DayLabel::Moderate => "moderate",
            DayLabel::Cold => "cold",
            DayLabel::Custom => "custom",
        }
    }
}

impl fmt::Display for DayLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DayLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hot" => Ok(DayLabel::Hot),
            "moderate" => Ok(DayLabel::Moderate),
            "cold" => Ok(DayLabel::Cold),
            "custom" => Ok(DayLabel::Custom),
            other => Err(format!("unknown day label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadUnits {
    Watts,
    JoulesPerHour,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourInputs {
    pub hour_index: u32,
    pub t_oa: f64,
    pub zones: ZoneInputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayProfile {
    pub label: DayLabel,
    pub hours: Vec<HourInputs>,
}

impl DayProfile {
    pub fn zone_count(&self) -> usize {
        self.hours.first().map_or(0, |h| h.zones.len())
    }

    /// Exogenous vector for one hour; the zone count follows the profile.
    pub fn exogenous(&self, hour: usize, params: &HvacParameters) -> Result<ExogenousVector, ModelError> {
        let h = &self.hours[hour];
        let params = HvacParameters {
            zone_count: h.zones.len(),
            ..params.clone()
        };
        ExogenousVector::new(h.t_oa, h.zones.clone(), params)
    }

    pub fn validate(&self, params: &HvacParameters) -> Result<(), ScenarioError> {
        if self.hours.is_empty() {
            return Err(ScenarioError::EmptyProfile);
        }
        let n = self.zone_count();
        for (i, h) in self.hours.iter().enumerate() {
            if i > 0 && h.hour_index <= self.hours[i - 1].hour_index {
                return Err(ScenarioError::InvalidHour {
                    hour: h.hour_index,
                    source: ModelError::InvalidInputs("hour indices must be strictly increasing".into()),
                });
            }
            if h.zones.len() != n {
                return Err(ScenarioError::InvalidHour {
                    hour: h.hour_index,
                    source: ModelError::InvalidInputs(format!("expected {n} zones")),
                });
            }
            self.exogenous(i, params).map_err(|source| ScenarioError::InvalidHour {
                hour: h.hour_index,
                source,
            })?;
        }
        Ok(())
    }

    /// CSV text in the profile grammar, loads in W.
    pub fn to_csv_string(&self) -> String {
        self.to_csv_string_in(LoadUnits::Watts)
    }

    pub fn to_csv_string_in(&self, units: LoadUnits) -> String {
        let n = self.zone_count();
        let unit_tag = match units {
            LoadUnits::Watts => "W",
            LoadUnits::JoulesPerHour => "J_per_hr",
        };
        let mut out = format!("#label={},units={unit_tag}\n", self.label);
        let mut header = vec!["hour".to_string(), "T_oa_C".to_string()];
        for i in 1..=n {
            header.push(format!("T_sp_C_{i}"));
            header.push(format!("Q_zone_{i}"));
            header.push(format!("m_oa_min_kg_s_{i}"));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for h in &self.hours {
            let mut cells = vec![h.hour_index.to_string(), h.t_oa.to_string()];
            for i in 0..n {
                let q = match units {
                    LoadUnits::Watts => h.zones.q_zone[i],
                    LoadUnits::JoulesPerHour => w_to_j_per_hr(h.zones.q_zone[i]),
                };
                cells.push(h.zones.t_sp[i].to_string());
                cells.push(q.to_string());
                cells.push(h.zones.m_oa_min[i].to_string());
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn parse_metadata(line: &str) -> Result<(DayLabel, LoadUnits), String> {
    let mut label = DayLabel::Custom;
    let mut units = LoadUnits::Watts;
    for item in line.trim_start_matches('#').split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| format!("metadata entry `{item}` is not key=value"))?;
        match key.trim() {
            "label" => label = value.trim().parse()?,
            "units" => {
                units = match value.trim() {
                    "W" => LoadUnits::Watts,
                    "J_per_hr" => LoadUnits::JoulesPerHour,
                    other => return Err(format!("unknown units `{other}`")),
                }
            }
            other => return Err(format!("unknown metadata key `{other}`")),
        }
    }
    Ok((label, units))
}

/// Parses profile CSV text and validates every hour against `params`.
pub fn parse_profile(text: &str, params: &HvacParameters) -> Result<DayProfile, ScenarioError> {
    let (mut label, mut units) = (DayLabel::Custom, LoadUnits::Watts);
    let mut body = text;
    let mut offset = 0u64;
    if let Some(first) = text.lines().next() {
        if first.starts_with('#') {
            (label, units) = parse_metadata(first).map_err(|message| ScenarioError::Parse { line: 1, message })?;
            body = &text[first.len()..];
            body = body.strip_prefix("\r\n").or_else(|| body.strip_prefix('\n')).unwrap_or(body);
            offset = 1;
        }
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(body.as_bytes());
    let header_line = offset + 1;
    let headers = reader
        .headers()
        .map_err(|e| ScenarioError::Parse {
            line: header_line,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 2 || cols[0] != "hour" || cols[1] != "T_oa_C" || !(cols.len() - 2).is_multiple_of(3) || cols.len() == 2 {
        return Err(ScenarioError::Parse {
            line: header_line,
            message: "header must be `hour,T_oa_C` followed by `T_sp_C_i,Q_zone_i,m_oa_min_kg_s_i` per zone".into(),
        });
    }
    let n = (cols.len() - 2) / 3;
    for i in 0..n {
        let expected = [
            format!("T_sp_C_{}", i + 1),
            format!("Q_zone_{}", i + 1),
            format!("m_oa_min_kg_s_{}", i + 1),
        ];
        for (k, e) in expected.iter().enumerate() {
            if cols[2 + 3 * i + k] != e {
                return Err(ScenarioError::Parse {
                    line: header_line,
                    message: format!("expected column `{e}`, found `{}`", cols[2 + 3 * i + k]),
                });
            }
        }
    }
    let mut hours = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ScenarioError::Parse {
            line: e.position().map_or(0, |p| p.line()) + offset,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line()) + offset;
        let num = |k: usize| -> Result<f64, ScenarioError> {
            let cell = &record[k];
            cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| ScenarioError::Parse {
                line,
                message: format!("column `{}`: `{cell}` is not a finite number", cols[k]),
            })
        };
        let hour_index = record[0].parse::<u32>().map_err(|_| ScenarioError::Parse {
            line,
            message: format!("hour `{}` is not a non-negative integer", &record[0]),
        })?;
        let t_oa = num(1)?;
        let mut zones = ZoneInputs {
            q_zone: Vec::with_capacity(n),
            t_sp: Vec::with_capacity(n),
            m_oa_min: Vec::with_capacity(n),
        };
        for i in 0..n {
            zones.t_sp.push(num(2 + 3 * i)?);
            let q = num(3 + 3 * i)?;
            zones.q_zone.push(match units {
                LoadUnits::Watts => q,
                LoadUnits::JoulesPerHour => j_per_hr_to_w(q),
            });
            zones.m_oa_min.push(num(4 + 3 * i)?);
        }
        hours.push(HourInputs { hour_index, t_oa, zones });
    }
    if hours.is_empty() {
        return Err(ScenarioError::EmptyProfile);
    }
    let profile = DayProfile { label, hours };
    profile.validate(params)?;
    Ok(profile)
}

pub fn load_profile(path: &Path, params: &HvacParameters) -> Result<DayProfile, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_profile(&text, params)
}

pub fn write_profile(profile: &DayProfile, path: &Path) -> Result<(), ScenarioError> {
    std::fs::write(path, profile.to_csv_string()).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Rounds to `1/per_unit` resolution, as the nearest double to a short decimal.
fn round_to(v: f64, per_unit: f64) -> f64 {
    (v * per_unit).round() / per_unit
}

/// Deterministic 7-hour synthetic profile with five zones.
///
/// Loads are rounded to 0.1 W and temperatures to 0.01 °C so that files
/// are readable and survive a J/hr round trip exactly.
pub fn synth_profile(day: DayLabel, seed: u64) -> DayProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Baseline zone loads (W; positive = heating) and their midday swing.
    let (t_range, base, swing): ((f64, f64), [f64; SYNTH_ZONES], [f64; SYNTH_ZONES]) = match day {
        DayLabel::Hot | DayLabel::Custom => (
            (33.0, 40.0),
            [-3200.0, -2600.0, -3600.0, -2200.0, -4200.0],
            [-1200.0, -900.0, -1400.0, -800.0, -1500.0],
        ),
        DayLabel::Cold => (
            (-5.0, 8.0),
            [2600.0, 2100.0, 3000.0, 1800.0, -2500.0],
            [-900.0, -700.0, -1000.0, -600.0, -600.0],
        ),
        DayLabel::Moderate => (
            (16.0, 24.0),
            [-700.0, 300.0, -1100.0, 500.0, -1600.0],
            [-500.0, -250.0, -600.0, -300.0, -700.0],
        ),
    };
    let hours = (0..SYNTH_HOURS)
        .map(|k| {
            let mut shape = (std::f64::consts::PI * k as f64 / (SYNTH_HOURS - 1) as f64).sin();
            if day == DayLabel::Moderate {
                shape = shape.powf(0.4);
            }
            let (lo, hi) = t_range;
            let jitter = rng.random_range(-0.4..=0.4);
            let t_oa = round_to((lo + 0.5 + (hi - lo - 1.0) * shape + jitter).clamp(lo, hi), 100.0);
            let q_zone = base
                .iter()
                .zip(&swing)
                .map(|(b, s)| round_to((b + s * shape) * rng.random_range(0.92..=1.08), 10.0))
                .collect();
            HourInputs {
                hour_index: SYNTH_FIRST_HOUR + k,
                t_oa,
                zones: ZoneInputs {
                    q_zone,
                    t_sp: vec![22.0; SYNTH_ZONES],
                    m_oa_min: vec![0.05; SYNTH_ZONES],
                },
            }
        })
        .collect();
    DayProfile { label: day, hours }
}

/// What to perturb and how hard to probe each hour.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mask: Vec<String>,
    pub alpha: f64,
    pub samples: usize,
    pub seed: u64,
    pub route: ShiftRoute,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mask: vec!["T_oa".into()],
            alpha: 0.05,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            route: ShiftRoute::PrimalDual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveMultiplier {
    pub row: String,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HourResult {
    pub hour_index: u32,
    pub seed: u64,
    /// W; NaN when the baseline solve failed.
    pub j0: f64,
    pub x0: Vec<f64>,
    pub lambda_active: Vec<ActiveMultiplier>,
    pub k_plus: f64,
    pub k_minus: f64,
    pub relative_plus: f64,
    pub relative_minus: f64,
    /// Quadratic-model bound with the ½ Hessian factor.
    pub beta_holder: f64,
    pub beta_holder_literal: f64,
    pub beta_sample: f64,
    pub warnings: Vec<String>,
}

impl HourResult {
    /// True when the baseline solve or the sensitivity step failed for this hour.
    pub fn is_failed(&self) -> bool {
        !self.k_plus.is_finite() || !self.k_minus.is_finite()
    }

    fn failed(hour_index: u32, seed: u64, warning: String) -> Self {
        Self {
            hour_index,
            seed,
            j0: f64::NAN,
            x0: Vec::new(),
            lambda_active: Vec::new(),
            k_plus: f64::NAN,
            k_minus: f64::NAN,
            relative_plus: f64::NAN,
            relative_minus: f64::NAN,
            beta_holder: f64::NAN,
            beta_holder_literal: f64::NAN,
            beta_sample: f64::NAN,
            warnings: vec![warning],
        }
    }
}

fn run_hour(
    profile: &DayProfile,
    idx: usize,
    params: &HvacParameters,
    run: &RunConfig,
    cfg: &SolverConfig,
) -> HourResult {
    let hour_index = profile.hours[idx].hour_index;
    let seed = run.seed ^ u64::from(hour_index);
    let w = match profile.exogenous(idx, params) {
        Ok(w) => w,
        Err(e) => return HourResult::failed(hour_index, seed, e.to_string()),
    };
    let cfg = SolverConfig {
        rng_seed: seed,
        ..cfg.clone()
    };
    let anchor = match solve_baseline(&w, &cfg) {
        Ok(a) => a,
        Err(e) => return HourResult::failed(hour_index, seed, e.to_string()),
    };
    let labels = crate::hvac_model::RowLayout { zones: w.params.zone_count }.labels();
    let mut result = HourResult {
        hour_index,
        seed,
        j0: anchor.j0,
        x0: anchor.x0.to_vec(),
        lambda_active: anchor
            .active_set
            .iter()
            .map(|&r| ActiveMultiplier {
                row: labels[r].clone(),
                lambda: anchor.lambda[r],
            })
            .collect(),
        k_plus: f64::NAN,
        k_minus: f64::NAN,
        relative_plus: f64::NAN,
        relative_minus: f64::NAN,
        beta_holder: f64::NAN,
        beta_holder_literal: f64::NAN,
        beta_sample: f64::NAN,
        warnings: anchor.warnings.clone(),
    };
    let mask: Vec<&str> = run.mask.iter().map(String::as_str).collect();
    let sens = (|| -> Result<(), SensitivityError> {
        let spec = UncertaintySpec::new(&w, &mask, run.alpha)?;
        let op = SensitivityOperator::build_with_route(&anchor, &w, &spec, run.route)?;
        let (kp, km) = op.signed_shift_pair()?;
        result.k_plus = kp;
        result.k_minus = km;
        result.relative_plus = kp / anchor.j0;
        result.relative_minus = km / anchor.j0;
        let qm = op.quadratic_model()?;
        result.beta_holder = holder_bound(&qm, &spec.delta, BoundMethod::HolderHalf)?.beta;
        result.beta_holder_literal = holder_bound(&qm, &spec.delta, BoundMethod::HolderPaperLiteral)?.beta;
        result.beta_sample = op.sample_bound(run.samples, seed)?.beta;
        Ok(())
    })();
    if let Err(e) = sens {
        result.warnings.push(e.to_string());
    } else if result.beta_sample > result.beta_holder.max(result.beta_holder_literal) + 1e-9 * anchor.j0 {
        result.warnings.push(format!(
            "sampled worst case {:.6e} W exceeds the Hölder bounds ({:.6e} W, {:.6e} W)",
            result.beta_sample, result.beta_holder, result.beta_holder_literal
        ));
    }
    result
}

/// Solves and analyses every hour; hours run in parallel on the current
/// rayon pool and results keep the profile order.
pub fn run_day(
    profile: &DayProfile,
    params: &HvacParameters,
    run: &RunConfig,
    cfg: &SolverConfig,
) -> Result<Vec<HourResult>, ScenarioError> {
    if profile.hours.is_empty() {
        return Err(ScenarioError::EmptyProfile);
    }
    let results: Vec<HourResult> = (0..profile.hours.len())
        .into_par_iter()
        .map(|i| run_hour(profile, i, params, run, cfg))
        .collect();
    if results.iter().all(|r| !r.j0.is_finite()) {
        let summary = results
            .iter()
            .map(|r| format!("hour {}: {}", r.hour_index, r.warnings.join("; ")))
            .collect::<Vec<_>>()
            .join(" | ");
        return Err(ScenarioError::AllHoursFailed(summary));
    }
    Ok(results)
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "hour",
    "J0_W",
    "K_plus_W",
    "K_minus_W",
    "rel_plus",
    "rel_minus",
    "beta_holder_W",
    "beta_sample_W",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

pub fn results_to_csv(results: &[HourResult]) -> String {
    let mut out = RESULT_COLUMNS.join(",");
    out.push('\n');
    for r in results {
        let cells = [
            r.j0,
            r.k_plus,
            r.k_minus,
            r.relative_plus,
            r.relative_minus,
            r.beta_holder,
            r.beta_sample,
        ];
        out.push_str(&r.hour_index.to_string());
        for c in cells {
            out.push(',');
            out.push_str(&fmt_f64(c));
        }
        out.push('\n');
    }
    out
}

pub fn export_results(results: &[HourResult], path: &Path, format: ExportFormat) -> Result<(), ScenarioError> {
    if results.is_empty() {
        return Err(ScenarioError::NoResults);
    }
    let text = match format {
        ExportFormat::Csv => results_to_csv(results),
        ExportFormat::Json => to_json_string(&results) + "\n",
    };
    let io_err = |e: std::io::Error| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(text.as_bytes()).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_in_range() {
        for day in [DayLabel::Hot, DayLabel::Moderate, DayLabel::Cold] {
            let a = synth_profile(day, 3);
            assert_eq!(a, synth_profile(day, 3));
            assert_ne!(a, synth_profile(day, 4));
            assert_eq!(a.hours.len(), 7);
            let (lo, hi) = match day {
                DayLabel::Hot => (33.0, 40.0),
                DayLabel::Cold => (-5.0, 8.0),
                _ => (16.0, 24.0),
            };
            assert!(a.hours.iter().all(|h| h.t_oa >= lo && h.t_oa <= hi));
            a.validate(&HvacParameters::default()).unwrap();
        }
    }

    #[test]
    fn profile_round_trip() {
        let p = synth_profile(DayLabel::Moderate, 1);
        let params = HvacParameters::default();
        let back = parse_profile(&p.to_csv_string(), &params).unwrap();
        assert_eq!(back, p);
        let joules = parse_profile(&p.to_csv_string_in(LoadUnits::JoulesPerHour), &params).unwrap();
        for (a, b) in joules.hours.iter().zip(&p.hours) {
            for (x, y) in a.zones.q_zone.iter().zip(&b.zones.q_zone) {
                assert!((x - y).abs() <= f64::EPSILON * y.abs());
            }
        }
    }

    #[test]
    fn joule_and_watt_files_agree_exactly() {
        let params = HvacParameters::default();
        let w = "#units=W\nhour,T_oa_C,T_sp_C_1,Q_zone_1,m_oa_min_kg_s_1\n9,30,22,-3500.1,0.05\n";
        let j = "#units=J_per_hr\nhour,T_oa_C,T_sp_C_1,Q_zone_1,m_oa_min_kg_s_1\n9,30,22,-12600360,0.05\n";
        let a = parse_profile(w, &params).unwrap();
        let b = parse_profile(j, &params).unwrap();
        assert_eq!(a.hours[0].zones.q_zone[0].to_bits(), b.hours[0].zones.q_zone[0].to_bits());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let params = HvacParameters::default();
        let good = "#label=hot,units=W\nhour,T_oa_C,T_sp_C_1,Q_zone_1,m_oa_min_kg_s_1\n9,30,22,-1000,0.05\n";
        let p = parse_profile(good, &params).unwrap();
        assert_eq!(p.label, DayLabel::Hot);
        let bad = good.replace("-1000", "abc");
        match parse_profile(&bad, &params) {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let header = "hour,T_oa,T_sp_C_1,Q_zone_1,m_oa_min_kg_s_1\n9,30,22,-1000,0.05\n";
        assert!(matches!(parse_profile(header, &params), Err(ScenarioError::Parse { line: 1, .. })));
        let text = "hour,T_oa_C,T_sp_C_1,Q_zone_1,m_oa_min_kg_s_1\n1,20,22,0,0.1\n2,20,22,0,0.1\n3,20,22,0,3.5\n";
        assert!(matches!(
            parse_profile(text, &params),
            Err(ScenarioError::InvalidHour { hour: 3, .. })
        ));
    }

    #[test]
    fn csv_export_round_trips() {
        let r = HourResult {
            j0: 12345.678901234567,
            k_plus: -1.0 / 3.0,
            ..HourResult::failed(9, 1, String::new())
        };
        let text = results_to_csv(std::slice::from_ref(&r));
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), RESULT_COLUMNS);
        let row = rd.records().next().unwrap().unwrap();
        assert_eq!(row[1].parse::<f64>().unwrap(), r.j0);
        assert_eq!(row[2].parse::<f64>().unwrap(), r.k_plus);
        assert!(export_results(&[], Path::new("/tmp/never"), ExportFormat::Csv).is_err());
    }
}
