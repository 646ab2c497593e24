//! One PASS/FAIL line per acceptance criterion on the shipped fixtures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use gridbase::baseline_opt::{solve_baseline, KktPoint, SolverConfig};
use gridbase::hvac_model::{
    boiler_efficiency, chiller_heat_input_ratio, evaluate, fan_part_load, fan_power, DecisionVector, ExogenousVector,
    HvacParameters, ZoneInputs,
};
use gridbase::scenario::{load_profile, run_day, DayLabel, DayProfile, RunConfig, DEFAULT_SAMPLES};
use gridbase::sensitivity::{
    holder_bound, resolve_check, BoundMethod, SensitivityOperator, ShiftRoute, UncertaintySpec, JACOBIAN_TOL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DAYS: [DayLabel; 3] = [DayLabel::Hot, DayLabel::Moderate, DayLabel::Cold];
const MASKS: [&[&str]; 2] = [&["T_oa"], &["c_f"]];

struct Hour {
    day: DayLabel,
    index: u32,
    w: ExogenousVector,
    anchor: Option<KktPoint>,
    seconds: f64,
}

impl Hour {
    fn tag(&self) -> String {
        format!("{} hour {}", self.day, self.index)
    }
}

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: impl AsRef<str>) {
        println!("criterion {id}: {} - {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
        if !ok {
            self.failures.push(id.to_string());
        }
    }
}

fn fixture(day: DayLabel) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{day}.csv"))
}

fn load(day: DayLabel, params: &HvacParameters) -> DayProfile {
    load_profile(&fixture(day), params).expect("shipped fixture parses")
}

fn solve_all(params: &HvacParameters, cfg: &SolverConfig) -> Vec<Hour> {
    let mut hours = Vec::new();
    for day in DAYS {
        let profile = load(day, params);
        for (pos, h) in profile.hours.iter().enumerate() {
            let w = profile.exogenous(pos, params).expect("fixture hour is valid");
            let start = Instant::now();
            let anchor = solve_baseline(&w, cfg).ok();
            hours.push(Hour { day, index: h.hour_index, w, anchor, seconds: start.elapsed().as_secs_f64() });
        }
    }
    hours
}

fn coefficient_identities(report: &mut Report, params: &HvacParameters) {
    let checks = [
        ("f_pl(1)", fan_part_load(1.0, params), 0.9898),
        ("eta_eff(1)", boiler_efficiency(1.0, params), 1.0),
        ("f_gen(1)", chiller_heat_input_ratio(1.0, params), 1.00003),
    ];
    let worst = checks.iter().map(|(_, v, e)| (v - e).abs()).fold(0.0, f64::max);
    let detail = checks.iter().map(|(n, v, _)| format!("{n} = {v}")).collect::<Vec<_>>().join(", ");
    report.line("1", worst <= 1e-12, format!("{detail}; max abs error {worst:.1e}"));
}

fn baseline_solves(report: &mut Report, hours: &[Hour], cfg: &SolverConfig, params: &HvacParameters) {
    let rating = params.boiler.q_b_rated.max(params.chiller.q_e_rated);
    let mut bad = Vec::new();
    let (mut st, mut cp, mut fe, mut simult, mut slowest) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for h in hours {
        slowest = slowest.max(h.seconds);
        let Some(a) = &h.anchor else {
            bad.push(format!("{}: no KKT point", h.tag()));
            continue;
        };
        let x = a.x0.to_vec();
        let both = x[x.len() - 2].min(x[x.len() - 1]);
        st = st.max(a.stationarity_residual);
        cp = cp.max(a.complementarity_residual);
        fe = fe.max(a.feasibility_violation);
        simult = simult.max(both / rating);
        if a.stationarity_residual > cfg.kkt_tol
            || a.complementarity_residual > cfg.kkt_tol
            || a.feasibility_violation > cfg.feas_tol
            || both > 1e-6 * rating
            || h.seconds > 5.0
        {
            bad.push(h.tag());
        }
    }
    report.line(
        "2",
        bad.is_empty() && hours.len() == 21,
        format!(
            "{} hours; max stationarity {st:.1e}, complementarity {cp:.1e}, feasibility {fe:.1e}, \
             min(q_h,q_c)/rating {simult:.1e}, slowest {slowest:.2} s{}",
            hours.len(),
            failures_suffix(&bad)
        ),
    );
}

fn zero_load(report: &mut Report, params: &HvacParameters, cfg: &SolverConfig) {
    let n = params.zone_count;
    let m_oa_min = 0.05;
    let w = ExogenousVector::new(22.0, ZoneInputs::uniform(n, 0.0, 22.0, m_oa_min), params.clone())
        .expect("zero-load hour is valid");
    let expected = params.alpha_el * fan_power(m_oa_min * n as f64, params);
    match solve_baseline(&w, cfg) {
        Ok(a) => {
            let op = evaluate(&DecisionVector::from_slice(&a.x0.to_vec()), &w).expect("optimum evaluates");
            let rel = (a.j0 - expected).abs() / expected;
            let qb = op.q_b / params.boiler.q_b_rated;
            let qe = op.q_e / params.chiller.q_e_rated;
            report.line(
                "3",
                rel <= 1e-6 && qb <= 1e-6 && qe <= 1e-6,
                format!("J0 {:.6} W vs {expected:.6} W (rel {rel:.1e}); Q_b/rated {qb:.1e}, Q_e/rated {qe:.1e}", a.j0),
            );
        }
        Err(e) => report.line("3", false, format!("solve failed: {e}")),
    }
}

fn derivative_fidelity(report: &mut Report, hours: &[Hour]) {
    let mut worst = 0.0_f64;
    let mut bad = Vec::new();
    for h in hours {
        let Some(a) = &h.anchor else {
            bad.push(h.tag());
            continue;
        };
        let labels = h.w.labels();
        let all: Vec<&str> = labels.iter().map(String::as_str).collect();
        let op = UncertaintySpec::new(&h.w, &all, 0.05).and_then(|spec| SensitivityOperator::build(a, &h.w, &spec));
        match op {
            Ok(op) => {
                let e = op.fd_error_g.max(op.fd_error_w);
                worst = worst.max(e);
                if e > JACOBIAN_TOL {
                    bad.push(h.tag());
                }
            }
            Err(e) => bad.push(format!("{}: {e}", h.tag())),
        }
    }
    report.line(
        "4",
        bad.is_empty(),
        format!("G and dH/dw vs FD over all 37 inputs, max rel error {worst:.1e}{}", failures_suffix(&bad)),
    );
}

struct OrderStudy {
    passed_at_finest: bool,
    worst_ratio: f64,
    order: Option<f64>,
}

fn order_study(a: &KktPoint, w: &ExogenousVector, mask: &[&str], route: ShiftRoute, cfg: &SolverConfig) -> OrderStudy {
    let alphas = [0.004, 0.002, 0.001];
    let mut errs = Vec::new();
    let mut study = OrderStudy { passed_at_finest: true, worst_ratio: 0.0, order: None };
    for (k, alpha) in alphas.into_iter().enumerate() {
        let op = UncertaintySpec::new(w, mask, alpha)
            .and_then(|spec| SensitivityOperator::build_with_route(a, w, &spec, route));
        let op = match op {
            Ok(op) => op,
            Err(_) => {
                study.passed_at_finest = false;
                return study;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut emax = 0.0_f64;
        for _ in 0..20 {
            let dw: Vec<f64> = op.spec.delta.iter().map(|d| d * rng.random_range(-1.0..=1.0)).collect();
            match resolve_check(&op, &dw, cfg) {
                Ok(r) => {
                    emax = emax.max(r.abs_error);
                    if k == alphas.len() - 1 {
                        let tol = 0.1 * r.delta_j.abs() + 1e-9 * a.j0;
                        study.worst_ratio = study.worst_ratio.max(r.abs_error / tol);
                        study.passed_at_finest &= r.abs_error <= tol;
                    }
                }
                Err(_) => study.passed_at_finest = false,
            }
        }
        errs.push(emax);
    }
    if errs[0] > 1e-9 * a.j0 {
        study.order = Some((errs[0] / errs[2]).log2() / 2.0);
    }
    study
}

fn first_order_validity(report: &mut Report, hours: &[Hour], cfg: &SolverConfig) {
    let start = Instant::now();
    for route in [ShiftRoute::PrimalDual, ShiftRoute::PseudoInverse] {
        let mut bad = Vec::new();
        let mut worst_ratio = 0.0_f64;
        let mut min_order = f64::INFINITY;
        let mut at_round_off = 0;
        for h in hours {
            let Some(a) = &h.anchor else {
                bad.push(h.tag());
                continue;
            };
            for mask in MASKS {
                let s = order_study(a, &h.w, mask, route, cfg);
                worst_ratio = worst_ratio.max(s.worst_ratio);
                match s.order {
                    Some(o) => min_order = min_order.min(o),
                    None => at_round_off += 1,
                }
                if !s.passed_at_finest || s.order.is_some_and(|o| o < 1.5) {
                    bad.push(format!("{} {}", h.tag(), mask[0]));
                }
            }
        }
        let detail = format!(
            "route {}: worst error/tolerance at alpha 0.001 {worst_ratio:.3}, min order {min_order:.2} \
             ({at_round_off} cases at round-off){}",
            route.name(),
            failures_suffix(&bad)
        );
        if route == ShiftRoute::PrimalDual {
            report.line("5", bad.is_empty(), format!("{detail}, {:.0} s", start.elapsed().as_secs_f64()));
        } else {
            println!("  info: {detail}");
        }
    }
}

fn bound_dominance(report: &mut Report, hours: &[Hour]) {
    let mut bad_quad = Vec::new();
    let mut bad_true = Vec::new();
    let mut half_below_true = 0;
    let mut cases = 0;
    let mut worst_quad = 0.0_f64;
    let mut worst_true = 0.0_f64;
    for h in hours {
        let Some(a) = &h.anchor else {
            bad_quad.push(h.tag());
            continue;
        };
        for mask in MASKS {
            for alpha in [0.01, 0.05] {
                let tag = format!("{} {} a={alpha}", h.tag(), mask[0]);
                let built = UncertaintySpec::new(&h.w, mask, alpha).and_then(|spec| {
                    let op = SensitivityOperator::build(a, &h.w, &spec)?;
                    let qm = op.quadratic_model()?;
                    let half = holder_bound(&qm, &spec.delta, BoundMethod::HolderHalf)?.beta;
                    let literal = holder_bound(&qm, &spec.delta, BoundMethod::HolderPaperLiteral)?.beta;
                    let sample = op.sample_bound(DEFAULT_SAMPLES, u64::from(h.index))?.beta;
                    Ok((spec, qm, half, literal, sample))
                });
                let (spec, qm, half, literal, sample) = match built {
                    Ok(v) => v,
                    Err(e) => {
                        bad_quad.push(format!("{tag}: {e}"));
                        continue;
                    }
                };
                cases += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(u64::from(h.index));
                let mut quad_max = 0.0_f64;
                for _ in 0..100_000 {
                    let dw: Vec<f64> = spec.delta.iter().map(|d| d * rng.random_range(-1.0..=1.0)).collect();
                    quad_max = quad_max.max(qm.evaluate(&dw).abs());
                }
                worst_quad = worst_quad.max(quad_max / half);
                worst_true = worst_true.max(sample / literal);
                if quad_max > half * (1.0 + 1e-9) {
                    bad_quad.push(tag.clone());
                }
                if sample > literal * (1.0 + 1e-9) {
                    bad_true.push(tag);
                }
                if sample > half * (1.0 + 1e-9) {
                    half_below_true += 1;
                }
            }
        }
    }
    report.line(
        "6a",
        bad_quad.is_empty(),
        format!("{cases} cases, max quadratic-model sample / holder_half {worst_quad:.6}{}", failures_suffix(&bad_quad)),
    );
    report.line(
        "6b",
        bad_true.is_empty(),
        format!(
            "{cases} cases, max sampled |K| / holder_paper_literal {worst_true:.4}{}",
            failures_suffix(&bad_true)
        ),
    );
    println!("  info: sampled |K| exceeds holder_half in {half_below_true} of {cases} cases");
}

fn max_relative(results: &[gridbase::scenario::HourResult]) -> f64 {
    results
        .iter()
        .filter(|r| !r.is_failed())
        .map(|r| r.relative_plus.abs().max(r.relative_minus.abs()))
        .fold(0.0, f64::max)
}

fn trends(report: &mut Report, params: &HvacParameters, cfg: &SolverConfig) {
    let run = |day: DayLabel, mask: &str| {
        let profile = load(day, params);
        let config = RunConfig { mask: vec![mask.to_string()], alpha: 0.05, ..RunConfig::default() };
        run_day(&profile, params, &config, cfg).expect("fixture day runs")
    };
    let hot = run(DayLabel::Hot, "T_oa");
    let moderate = run(DayLabel::Moderate, "T_oa");
    let fan = run(DayLabel::Hot, "c_f");
    let (h, m, f) = (max_relative(&hot), max_relative(&moderate), max_relative(&fan));
    let complete = [&hot, &moderate, &fan].iter().all(|r| r.len() == 7 && r.iter().all(|x| !x.is_failed()));
    report.line(
        "7",
        complete && m > h && f < 0.01,
        format!("T_oa max |K|/J0: moderate {m:.4} vs hot {h:.4}; hot fan-coefficient max {:.3}%", 100.0 * f),
    );
}

fn run_cli(args: &[&str]) -> i32 {
    let mut out = Vec::new();
    let mut err = Vec::new();
    gridbase::cli::run(std::iter::once("gridbase").chain(args.iter().copied()), &mut out, &mut err)
}

fn determinism(report: &mut Report) {
    let dir = tempfile::tempdir().expect("temp dir");
    let profile = fixture(DayLabel::Moderate);
    let profile = profile.to_str().expect("utf-8 path");
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "2"), ("b", "2"), ("c", "1"), ("d", "4")] {
        for format in ["csv", "json"] {
            let out = dir.path().join(format!("{name}.{format}"));
            let code = run_cli(&[
                "run-day",
                "--profile",
                profile,
                "--mask",
                "T_oa,c_f",
                "--alpha",
                "0.05",
                "--format",
                format,
                "--threads",
                threads,
                "--out",
                out.to_str().expect("utf-8 path"),
            ]);
            outputs.push((code, std::fs::read(&out).unwrap_or_default()));
        }
    }
    let codes_ok = outputs.iter().all(|(c, bytes)| *c == 0 && !bytes.is_empty());
    let same = outputs.chunks(2).all(|pair| pair[0].1 == outputs[0].1 && pair[1].1 == outputs[1].1);
    report.line("8", codes_ok && same, "run-day csv and json output byte-identical across repeats and 1, 2, 4 threads");
}

fn failures_suffix(bad: &[String]) -> String {
    if bad.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", bad.join(", "))
    }
}

fn main() -> ExitCode {
    let params = HvacParameters::default();
    let cfg = SolverConfig::default();
    let mut report = Report { failures: Vec::new() };
    coefficient_identities(&mut report, &params);
    let hours = solve_all(&params, &cfg);
    baseline_solves(&mut report, &hours, &cfg, &params);
    zero_load(&mut report, &params, &cfg);
    derivative_fidelity(&mut report, &hours);
    first_order_validity(&mut report, &hours, &cfg);
    bound_dominance(&mut report, &hours);
    trends(&mut report, &params, &cfg);
    determinism(&mut report);
    if report.failures.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {}", report.failures.join(", "));
        ExitCode::FAILURE
    }
}
