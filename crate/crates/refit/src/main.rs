//! `refit` command line: runs experiment scenarios, exports penalty
//! landscapes and drives the verification suites.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage error.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use refit::error::RefitError;
use refit::penalties::PenaltyTag;
use refit::scenario::{run_landscape, run_scenario, RefitMode, RunConfig, Scenario, SolverChoice};
use refit::verify;

#[derive(Parser)]
#[command(name = "refit", version, about = "l12 sparse-analysis regularization with block-penalty refitting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment scenario and write images, traces and metrics.
    Run(RunArgs),
    /// Export the (theta, amplitude, value) landscape of one penalty.
    Landscape(LandscapeArgs),
    /// Run a verification suite: prox, adjoint, properties, equivalence or
    /// solvers.
    Verify { suite: String },
}

#[derive(Args, Default)]
struct RunArgs {
    /// Scenario: shapes128, cameraman_like, color_denoise, color_deblur,
    /// tgv_elevation.
    #[arg(long)]
    scenario: Option<String>,
    /// Penalty: HO, HD, QO, QD, SO, SD or "all".
    #[arg(long)]
    penalty: Option<String>,
    /// Solver: pd (primal-dual) or dr (Douglas-Rachford).
    #[arg(long)]
    solver: Option<String>,
    /// Refitting mode: joint or posterior.
    #[arg(long)]
    mode: Option<String>,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Second-order coupling weight (tgv_elevation only).
    #[arg(long)]
    zeta: Option<f64>,
    /// Support-detection margin (default 1e-8 * lambda).
    #[arg(long)]
    beta: Option<f64>,
    /// Iteration budget.
    #[arg(long)]
    iters: Option<usize>,
    /// Noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the REFIT_OUT environment variable overrides it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional key=value file pre-loading any flag; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn failure(err: &RefitError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        RefitError::InvalidParams(_) | RefitError::ShapeMismatch { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn load_config_file(path: &PathBuf) -> Result<HashMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected key=value", path.display(), lineno + 1));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>, String> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<T>().map(Some).map_err(|_| format!("config key {key}: bad value {v:?}")),
    }
}

fn run_cmd(args: RunArgs) -> ExitCode {
    let file = match &args.config {
        Some(path) => match load_config_file(path) {
            Ok(map) => map,
            Err(msg) => return usage_error(&msg),
        },
        None => HashMap::new(),
    };
    macro_rules! merged {
        ($flag:expr, $key:literal, $ty:ty) => {
            match $flag {
                Some(v) => Some(v),
                None => match parse_num::<$ty>(&file, $key) {
                    Ok(v) => v,
                    Err(msg) => return usage_error(&msg),
                },
            }
        };
    }
    let scenario_name = match args.scenario.clone().or_else(|| file.get("scenario").cloned()) {
        Some(s) => s,
        None => return usage_error("missing --scenario (valid: shapes128, cameraman_like, color_denoise, color_deblur, tgv_elevation)"),
    };
    let Some(scenario) = Scenario::parse(&scenario_name) else {
        return usage_error(&format!(
            "unknown scenario {scenario_name:?} (valid: {})",
            Scenario::ALL_NAMES.join(", ")
        ));
    };
    let penalty_name = args.penalty.clone().or_else(|| file.get("penalty").cloned()).unwrap_or_else(|| "SD".into());
    let penalties = if penalty_name.eq_ignore_ascii_case("all") {
        PenaltyTag::ALL.to_vec()
    } else {
        match PenaltyTag::parse(&penalty_name) {
            Some(t) => vec![t],
            None => return usage_error(&format!("unknown penalty {penalty_name:?} (valid: HO, HD, QO, QD, SO, SD, all)")),
        }
    };
    let solver_name = args.solver.clone().or_else(|| file.get("solver").cloned()).unwrap_or_else(|| "pd".into());
    let Some(solver) = SolverChoice::parse(&solver_name) else {
        return usage_error(&format!("unknown solver {solver_name:?} (valid: pd, dr)"));
    };
    let mode_name = args.mode.clone().or_else(|| file.get("mode").cloned()).unwrap_or_else(|| "joint".into());
    let Some(mode) = RefitMode::parse(&mode_name) else {
        return usage_error(&format!("unknown mode {mode_name:?} (valid: joint, posterior)"));
    };

    let sigma = merged!(args.sigma, "sigma", f64);
    let lambda = merged!(args.lambda, "lambda", f64);
    let zeta = merged!(args.zeta, "zeta", f64);
    let beta = merged!(args.beta, "beta", f64);
    let iters = merged!(args.iters, "iters", usize);
    let seed = merged!(args.seed, "seed", u64).unwrap_or(1);

    let mut cfg = RunConfig::new(scenario).with_overrides(sigma, lambda, zeta, beta, iters);
    cfg.penalties = penalties;
    cfg.solver = solver;
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.out_dir = out_dir_from(args.out.or_else(|| file.get("out").map(PathBuf::from)));

    match run_scenario(&cfg) {
        Ok(rows) => {
            println!("scenario {} ({} penalties) -> {}", scenario.name(), rows.len(), cfg.out_dir.display());
            for r in &rows {
                println!(
                    "  {}: psnr noisy {:.2} dB, biased {:.2} dB, refit {:.2} dB, support {}",
                    r.penalty, r.psnr_noisy, r.psnr_biased, r.psnr_refit, r.support_size
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => failure(&e),
    }
}

fn out_dir_from(flag: Option<PathBuf>) -> PathBuf {
    if let Ok(dir) = std::env::var("REFIT_OUT") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    flag.unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Args)]
struct LandscapeArgs {
    /// Penalty: HO, HD, QO, QD, SO, SD.
    #[arg(long)]
    penalty: String,
    /// Penalty weight.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Output directory (REFIT_OUT overrides).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn landscape_cmd(args: LandscapeArgs) -> ExitCode {
    let Some(tag) = PenaltyTag::parse(&args.penalty) else {
        return usage_error(&format!("unknown penalty {:?}", args.penalty));
    };
    let dir = out_dir_from(args.out);
    match run_landscape(tag, args.lambda, &dir) {
        Ok(path) => {
            println!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => failure(&e),
    }
}

fn verify_cmd(suite: &str) -> ExitCode {
    let report = match suite {
        "prox" => Ok(verify::prox_suite(200, 0)),
        "adjoint" => verify::adjoint_suite(0),
        "properties" => Ok(verify::properties_suite(0)),
        "equivalence" => Ok(verify::equivalence_suite(0)),
        "solvers" => verify::solvers_suite(0),
        other => {
            return usage_error(&format!(
                "unknown suite {other:?} (valid: prox, adjoint, properties, equivalence, solvers)"
            ));
        }
    };
    match report {
        Ok(report) => {
            report.print();
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => failure(&e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run(args) => run_cmd(args),
        Cmd::Landscape(args) => landscape_cmd(args),
        Cmd::Verify { suite } => verify_cmd(&suite),
    }
}
