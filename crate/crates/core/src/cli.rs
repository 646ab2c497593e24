//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::baseline_opt::{solve_baseline, verify_kkt, KktPoint, SolverConfig, PRNG_NAME};
use crate::hvac_model::{self, ExogenousVector, HvacParameters, RowLayout};
use crate::numkit::spectral_norm;
use crate::report::to_json_string;
use crate::scenario::{
    export_results, load_profile, run_day, synth_profile, write_profile, DayLabel, DayProfile, ExportFormat,
    RunConfig, ScenarioError, DEFAULT_SAMPLES,
};
use crate::sensitivity::{
    holder_bound, resolve_check, BoundMethod, BoundResult, SensitivityError, SensitivityOperator, ShiftRoute,
    UncertaintySpec,
};

pub const TOOL_VERSION: &str = concat!("gridbase ", env!("CARGO_PKG_VERSION"));
pub const PARAMS_ENV: &str = "GRIDBASE_PARAMS";

const MASK_HELP: &str = "Comma-separated exogenous labels: T_oa, Q_zone_i, T_sp_i, m_oa_min_i, c_p, delta_P, \
eta_tot, rho_air, m_design, c_f_1..4, Q_b_rated, eta_thermal, c_b_1..3, Q_e_rated, P_pump, c_g_1..3, alpha_el, \
alpha_ng. Group names (c_f, c_b, c_g, Q_zone, T_sp, m_oa_min) expand to all members.";

#[derive(Debug, Parser)]
#[command(name = "gridbase", version, about = "Optimal HVAC baselines and their sensitivity to uncertain inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ParamsArg {
    /// JSON parameter file (defaults to $GRIDBASE_PARAMS, then built-in values)
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct HourArgs {
    #[arg(long)]
    profile: PathBuf,
    /// Hour index as written in the profile's `hour` column
    #[arg(long)]
    hour: u32,
    #[command(flatten)]
    params: ParamsArg,
    /// Multistart seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, clap::Args)]
struct SensArgs {
    #[command(flatten)]
    hour: HourArgs,
    #[arg(long, value_delimiter = ',', help = MASK_HELP)]
    mask: Vec<String>,
    #[arg(long)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = RouteArg::PrimalDual)]
    route: RouteArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RouteArg {
    PrimalDual,
    PseudoInverse,
}

impl From<RouteArg> for ShiftRoute {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::PrimalDual => ShiftRoute::PrimalDual,
            RouteArg::PseudoInverse => ShiftRoute::PseudoInverse,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Holder,
    HolderLiteral,
    Sample,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DayArg {
    Hot,
    Moderate,
    Cold,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one hour's baseline and print the KKT report
    Solve(HourArgs),
    /// Build the sensitivity operator for one hour and print its report
    Sensitivity(SensArgs),
    /// Bound the worst-case baseline change over the uncertainty box
    Bound {
        #[command(flatten)]
        sens: SensArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Run baseline + sensitivity for every hour of a profile
    RunDay {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, value_delimiter = ',', help = MASK_HELP)]
        mask: Vec<String>,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (default: logical cores)
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value_t = RouteArg::PrimalDual)]
        route: RouteArg,
        #[command(flatten)]
        params: ParamsArg,
    },
    /// Write a synthetic 7-hour day profile
    Synth {
        #[arg(long, value_enum)]
        day: DayArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check derivatives against finite differences and bound dominance on the synthetic days
    Validate {
        #[command(flatten)]
        params: ParamsArg,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => m,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } | ScenarioError::Parse { .. } | ScenarioError::InvalidHour { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<crate::baseline_opt::SolveError> for CliError {
    fn from(e: crate::baseline_opt::SolveError) -> Self {
        CliError::Domain(e.to_string())
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if e.use_stderr() {
                let _ = write!(err, "{e}");
            } else {
                let _ = write!(out, "{e}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            if e.code() == 2 {
                let _ = writeln!(err, "run `gridbase --help` for usage");
            }
            e.code()
        }
    }
}

fn load_params(arg: &ParamsArg) -> Result<HvacParameters, CliError> {
    let path = arg.params.clone().or_else(|| std::env::var_os(PARAMS_ENV).map(PathBuf::from));
    let Some(path) = path else {
        return Ok(HvacParameters::default());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    HvacParameters::from_json_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn hour_position(profile: &DayProfile, hour: u32) -> Result<usize, CliError> {
    profile
        .hours
        .iter()
        .position(|h| h.hour_index == hour)
        .ok_or_else(|| CliError::Usage(format!("profile has no hour {hour}")))
}

struct HourContext {
    params: HvacParameters,
    profile_path: PathBuf,
    w: ExogenousVector,
    cfg: SolverConfig,
    anchor: KktPoint,
}

fn solve_hour(args: &HourArgs) -> Result<HourContext, CliError> {
    let params = load_params(&args.params)?;
    let profile = load_profile(&args.profile, &params)?;
    let pos = hour_position(&profile, args.hour)?;
    let w = profile.exogenous(pos, &params).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = SolverConfig {
        rng_seed: args.seed,
        ..SolverConfig::default()
    };
    let anchor = solve_baseline(&w, &cfg)?;
    Ok(HourContext {
        params,
        profile_path: args.profile.clone(),
        w,
        cfg,
        anchor,
    })
}

fn metadata(ctx: &HourContext, hour: u32) -> Value {
    json!({
        "tool_version": TOOL_VERSION,
        "profile": ctx.profile_path.display().to_string(),
        "hour": hour,
        "parameters": ctx.params.to_json(),
        "solver_seed": ctx.cfg.rng_seed,
        "prng": PRNG_NAME,
    })
}

fn kkt_json(ctx: &HourContext) -> Value {
    let a = &ctx.anchor;
    let report = verify_kkt(&a.x0, &a.lambda, &ctx.w, &ctx.cfg);
    let labels = RowLayout {
        zones: ctx.w.params.zone_count,
    }
    .labels();
    let xl = hvac_model::DecisionLayout {
        zones: ctx.w.params.zone_count,
    }
    .labels();
    let x: serde_json::Map<String, Value> = xl.into_iter().zip(a.x0.to_vec()).map(|(l, v)| (l, json!(v))).collect();
    let active: Vec<Value> = a
        .active_set
        .iter()
        .map(|&r| json!({"row": labels[r], "index": r, "lambda": a.lambda[r]}))
        .collect();
    json!({
        "j0_W": a.j0,
        "x0": x,
        "active_set": active,
        "stationarity_residual": report.stationarity_residual,
        "complementarity_residual": report.complementarity_residual,
        "feasibility_violation": report.feasibility_violation,
        "heat_cool_overlap_W": report.heat_cool_overlap,
        "strict_complementarity_ok": report.strict_complementarity_ok,
        "licq_ok": report.licq_ok,
        "flags": report.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>(),
        "start_index": a.start_index,
        "starts_converged": a.starts_converged,
        "multistart_spread": a.multistart_spread,
        "warnings": a.warnings,
    })
}

fn build_operator(ctx: &HourContext, s: &SensArgs) -> Result<SensitivityOperator, CliError> {
    let mask: Vec<&str> = s.mask.iter().map(String::as_str).collect();
    let spec = UncertaintySpec::new(&ctx.w, &mask, s.alpha).map_err(|e| match e {
        SensitivityError::UnknownLabel(_) | SensitivityError::InvalidSpec(_) => CliError::Usage(e.to_string()),
        other => CliError::Domain(other.to_string()),
    })?;
    Ok(SensitivityOperator::build_with_route(&ctx.anchor, &ctx.w, &spec, s.route.into())?)
}

fn bound_json(b: &BoundResult) -> Value {
    json!({
        "method": b.method.name(),
        "beta_W": b.beta,
        "samples": b.samples,
        "skipped": b.skipped,
        "argmax_dw": b.argmax_dw,
        "seed": b.seed,
    })
}

fn sensitivity_json(ctx: &HourContext, s: &SensArgs, op: &SensitivityOperator) -> Result<Value, CliError> {
    let spec = &op.spec;
    let qm = op.quadratic_model()?;
    let sigma = if spec.dim() == 0 {
        0.0
    } else {
        spectral_norm(&qm.h_k.symmetrized().map_err(|e| CliError::Domain(e.to_string()))?)
            .map_err(|e| CliError::Domain(e.to_string()))?
    };
    let half = holder_bound(&qm, &spec.delta, BoundMethod::HolderHalf)?;
    let literal = holder_bound(&qm, &spec.delta, BoundMethod::HolderPaperLiteral)?;
    let sample = op.sample_bound(DEFAULT_SAMPLES, ctx.cfg.rng_seed)?;
    let (kp, km) = op.signed_shift_pair()?;
    let flat = ctx.w.to_flat();
    let plus: Vec<f64> = spec
        .indices
        .iter()
        .zip(&spec.delta)
        .map(|(&i, d)| if flat[i] < 0.0 { -d } else { *d })
        .collect();
    let minus: Vec<f64> = plus.iter().map(|v| -v).collect();
    let mut checks = Vec::new();
    for (name, dw) in [("plus", plus), ("minus", minus)] {
        let c = resolve_check(op, &dw, &ctx.cfg)?;
        checks.push(json!({"direction": name, "dw": c.dw, "K_W": c.k, "delta_j_resolve_W": c.delta_j, "abs_error_W": c.abs_error}));
    }
    let j0 = ctx.anchor.j0;
    Ok(json!({
        "metadata": metadata(ctx, s.hour.hour),
        "anchor": {"j0_W": j0, "active_rows": ctx.anchor.active_set.len()},
        "route": op.route.name(),
        "mask": spec.labels,
        "alpha": spec.alpha,
        "delta": spec.delta,
        "g": qm.g,
        "hessian_spectral_norm": sigma,
        "richardson_gap": qm.richardson_gap,
        "rank_ok": op.rank_ok,
        "fd_error_g": op.fd_error_g,
        "fd_error_w": op.fd_error_w,
        "beta": {
            "holder_half_W": half.beta,
            "holder_paper_literal_W": literal.beta,
            "monte_carlo_W": sample.beta,
            "monte_carlo_samples": sample.samples,
            "monte_carlo_seed": sample.seed,
        },
        "K_plus_W": kp,
        "K_minus_W": km,
        "relative_plus": kp / j0,
        "relative_minus": km / j0,
        "validation": checks,
    }))
}

fn print_json(out: &mut dyn Write, v: &Value) -> Result<(), CliError> {
    writeln!(out, "{}", to_json_string(v)).map_err(|e| CliError::Domain(format!("stdout: {e}")))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Solve(args) => {
            let ctx = solve_hour(&args)?;
            let doc = json!({"metadata": metadata(&ctx, args.hour), "kkt": kkt_json(&ctx)});
            print_json(out, &doc)
        }
        Command::Sensitivity(s) => {
            let ctx = solve_hour(&s.hour)?;
            let op = build_operator(&ctx, &s)?;
            let doc = sensitivity_json(&ctx, &s, &op)?;
            print_json(out, &doc)
        }
        Command::Bound { sens, method, samples } => {
            let ctx = solve_hour(&sens.hour)?;
            let op = build_operator(&ctx, &sens)?;
            let b = match method {
                MethodArg::Holder => holder_bound(&op.quadratic_model()?, &op.spec.delta, BoundMethod::HolderHalf)?,
                MethodArg::HolderLiteral => {
                    holder_bound(&op.quadratic_model()?, &op.spec.delta, BoundMethod::HolderPaperLiteral)?
                }
                MethodArg::Sample => op.sample_bound(samples, ctx.cfg.rng_seed)?,
            };
            let doc = json!({
                "metadata": metadata(&ctx, sens.hour.hour),
                "route": op.route.name(),
                "mask": op.spec.labels,
                "alpha": op.spec.alpha,
                "delta": op.spec.delta,
                "bound": bound_json(&b),
            });
            print_json(out, &doc)
        }
        Command::RunDay {
            profile,
            mask,
            alpha,
            out: out_path,
            format,
            samples,
            seed,
            threads,
            route,
            params,
        } => {
            let params = load_params(&params)?;
            let day = load_profile(&profile, &params)?;
            let run = RunConfig {
                mask,
                alpha,
                samples,
                seed,
                route: route.into(),
            };
            let cfg = SolverConfig::default();
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(k) = threads {
                if k == 0 {
                    return Err(CliError::Usage("--threads must be at least 1".into()));
                }
                builder = builder.num_threads(k);
            }
            let pool = builder.build().map_err(|e| CliError::Domain(e.to_string()))?;
            let results = pool.install(|| run_day(&day, &params, &run, &cfg))?;
            let fmt = match format {
                FormatArg::Csv => ExportFormat::Csv,
                FormatArg::Json => ExportFormat::Json,
            };
            export_results(&results, &out_path, fmt)?;
            let warned = results.iter().filter(|r| !r.warnings.is_empty()).count();
            writeln!(
                out,
                "{TOOL_VERSION}: {} hours from {} ({}), mask {}, alpha {}, seed {seed}, route {}, {warned} with warnings -> {}",
                results.len(),
                profile.display(),
                day.label,
                run.mask.join(","),
                alpha,
                run.route.name(),
                out_path.display()
            )
            .map_err(|e| CliError::Domain(e.to_string()))
        }
        Command::Synth { day, seed, out: path } => {
            let label = match day {
                DayArg::Hot => DayLabel::Hot,
                DayArg::Moderate => DayLabel::Moderate,
                DayArg::Cold => DayLabel::Cold,
            };
            let profile = synth_profile(label, seed);
            write_profile(&profile, &path)?;
            writeln!(out, "{TOOL_VERSION}: wrote {label} profile (seed {seed}) to {}", path.display())
                .map_err(|e| CliError::Domain(e.to_string()))
        }
        Command::Validate { params } => {
            let params = load_params(&params)?;
            let ok = validate_suite(&params, out)?;
            if ok {
                Ok(())
            } else {
                Err(CliError::Domain("validation failed".into()))
            }
        }
    }
}

fn check_line(out: &mut dyn Write, ok: bool, text: String) -> Result<(), CliError> {
    writeln!(out, "[{}] {text}", if ok { "PASS" } else { "FAIL" }).map_err(|e| CliError::Domain(e.to_string()))
}

/// Derivative-vs-FD and bound-dominance checks on the three synthetic days.
fn validate_suite(params: &HvacParameters, out: &mut dyn Write) -> Result<bool, CliError> {
    let cfg = SolverConfig::default();
    let mut all_ok = true;
    writeln!(out, "{TOOL_VERSION} validate").map_err(|e| CliError::Domain(e.to_string()))?;
    for day in [DayLabel::Hot, DayLabel::Moderate, DayLabel::Cold] {
        let profile = synth_profile(day, 1);
        for (pos, h) in profile.hours.iter().enumerate() {
            let w = profile.exogenous(pos, params).map_err(|e| CliError::Usage(e.to_string()))?;
            let tag = format!("{day} hour {}", h.hour_index);
            let anchor = match solve_baseline(&w, &cfg) {
                Ok(a) => a,
                Err(e) => {
                    all_ok = false;
                    check_line(out, false, format!("{tag}: solve failed: {e}"))?;
                    continue;
                }
            };
            let labels = w.labels();
            let all: Vec<&str> = labels.iter().map(String::as_str).collect();
            let fd = UncertaintySpec::new(&w, &all, 0.05)
                .and_then(|spec| SensitivityOperator::build(&anchor, &w, &spec));
            let ok = fd.is_ok();
            all_ok &= ok;
            match fd {
                Ok(op) => check_line(
                    out,
                    true,
                    format!("{tag}: derivatives vs FD (G {:.1e}, W {:.1e})", op.fd_error_g, op.fd_error_w),
                )?,
                Err(e) => check_line(out, false, format!("{tag}: derivatives: {e}"))?,
            }
            for mask in [["T_oa"].as_slice(), ["c_f"].as_slice()] {
                let dom = bound_dominance(&anchor, &w, mask, 0.05, h.hour_index.into())?;
                all_ok &= dom.0;
                check_line(out, dom.0, format!("{tag}: bounds, mask {}: {}", mask.join(","), dom.1))?;
            }
        }
    }
    Ok(all_ok)
}

fn bound_dominance(
    anchor: &KktPoint,
    w: &ExogenousVector,
    mask: &[&str],
    alpha: f64,
    seed: u64,
) -> Result<(bool, String), CliError> {
    let spec = UncertaintySpec::new(w, mask, alpha)?;
    let op = SensitivityOperator::build(anchor, w, &spec)?;
    let qm = op.quadratic_model()?;
    let half = holder_bound(&qm, &spec.delta, BoundMethod::HolderHalf)?.beta;
    let literal = holder_bound(&qm, &spec.delta, BoundMethod::HolderPaperLiteral)?.beta;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quad_max = 0.0_f64;
    for _ in 0..10_000 {
        let dw: Vec<f64> = spec.delta.iter().map(|d| d * rng.random_range(-1.0..=1.0)).collect();
        quad_max = quad_max.max(qm.evaluate(&dw).abs());
    }
    let sample = op.sample_bound(DEFAULT_SAMPLES, seed)?.beta;
    let ok = quad_max <= half * (1.0 + 1e-9) && sample <= literal * (1.0 + 1e-9);
    Ok((
        ok,
        format!("holder_half {half:.4e} >= quadratic {quad_max:.4e}, holder_literal {literal:.4e} >= sampled K {sample:.4e}"),
    ))
}
