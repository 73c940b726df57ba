//! Experiment scenarios behind the `run` command: scene synthesis, noise,
//! solve, and artifact output (images, raw sidecars, trace and metrics CSV).

use std::path::{Path, PathBuf};

use crate::error::{RefitError, Result};
use crate::field::ImageGrid;
use crate::forward::ForwardOperator;
use crate::io::{write_image, write_metrics_csv, write_raw, write_trace_csv, MetricsRow};
use crate::penalties::{penalty_landscape, BlockPenaltyKind, PenaltyTag};
use crate::problems::{
    add_gaussian_noise, build_color_scene, build_scene, lambda_deblur, psnr, ProblemSpec, SceneName,
};
use crate::solvers::{
    dr_joint_solve, pd_joint_solve, posterior_refit, DrParams, JointSolveOutput, PdParams, TraceRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Grayscale denoising of the geometric shapes scene (sigma 50,
    /// lambda 750, 4000 iterations).
    Shapes128,
    /// Grayscale denoising of the textured stand-in scene (sigma 20,
    /// lambda 36, 4000 iterations).
    CameramanLike,
    /// Color denoising (sigma 20, lambda 4.3*sigma, 1000 iterations).
    ColorDenoise,
    /// Color deblurring with the 45-degree motion kernel (sigma 2,
    /// lambda 4.3*sigma, 1000 iterations).
    ColorDeblur,
    /// Second-order denoising of the elevation profile (sigma 2, lambda 15,
    /// zeta 0.45, 4000 iterations).
    TgvElevation,
}

impl Scenario {
    pub fn parse(s: &str) -> Option<Scenario> {
        match s {
            "shapes128" => Some(Scenario::Shapes128),
            "cameraman_like" => Some(Scenario::CameramanLike),
            "color_denoise" => Some(Scenario::ColorDenoise),
            "color_deblur" => Some(Scenario::ColorDeblur),
            "tgv_elevation" => Some(Scenario::TgvElevation),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Shapes128 => "shapes128",
            Scenario::CameramanLike => "cameraman_like",
            Scenario::ColorDenoise => "color_denoise",
            Scenario::ColorDeblur => "color_deblur",
            Scenario::TgvElevation => "tgv_elevation",
        }
    }

    pub const ALL_NAMES: [&'static str; 5] =
        ["shapes128", "cameraman_like", "color_denoise", "color_deblur", "tgv_elevation"];

    fn default_sigma(&self) -> f64 {
        match self {
            Scenario::Shapes128 => 50.0,
            Scenario::CameramanLike => 20.0,
            Scenario::ColorDenoise => 20.0,
            Scenario::ColorDeblur => 2.0,
            Scenario::TgvElevation => 2.0,
        }
    }

    fn default_lambda(&self, sigma: f64) -> f64 {
        match self {
            Scenario::Shapes128 => 750.0,
            Scenario::CameramanLike => 36.0,
            Scenario::ColorDenoise | Scenario::ColorDeblur => lambda_deblur(sigma),
            Scenario::TgvElevation => 15.0,
        }
    }

    fn default_iters(&self) -> usize {
        match self {
            Scenario::ColorDenoise | Scenario::ColorDeblur => 1000,
            _ => 4000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverChoice {
    Pd,
    Dr,
}

impl SolverChoice {
    pub fn parse(s: &str) -> Option<SolverChoice> {
        match s {
            "pd" => Some(SolverChoice::Pd),
            "dr" => Some(SolverChoice::Dr),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefitMode {
    Joint,
    Posterior,
}

impl RefitMode {
    pub fn parse(s: &str) -> Option<RefitMode> {
        match s {
            "joint" => Some(RefitMode::Joint),
            "posterior" => Some(RefitMode::Posterior),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub penalties: Vec<PenaltyTag>,
    pub solver: SolverChoice,
    pub mode: RefitMode,
    pub sigma: f64,
    pub lambda: f64,
    pub zeta: f64,
    /// Support margin; defaults to 1e-8 * lambda.
    pub beta: f64,
    pub iters: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(scenario: Scenario) -> Self {
        let sigma = scenario.default_sigma();
        let lambda = scenario.default_lambda(sigma);
        RunConfig {
            scenario,
            penalties: vec![PenaltyTag::Sd],
            solver: SolverChoice::Pd,
            mode: RefitMode::Joint,
            sigma,
            lambda,
            zeta: 0.45,
            beta: 1e-8 * lambda,
            iters: scenario.default_iters(),
            seed: 1,
            out_dir: PathBuf::from("out"),
        }
    }

    /// Refreshes the lambda- and scenario-derived defaults after overrides.
    pub fn with_overrides(
        mut self,
        sigma: Option<f64>,
        lambda: Option<f64>,
        zeta: Option<f64>,
        beta: Option<f64>,
        iters: Option<usize>,
    ) -> Self {
        if let Some(s) = sigma {
            self.sigma = s;
            self.lambda = self.scenario.default_lambda(s);
        }
        if let Some(l) = lambda {
            self.lambda = l;
        }
        if let Some(z) = zeta {
            self.zeta = z;
        }
        self.beta = beta.unwrap_or(1e-8 * self.lambda);
        if let Some(i) = iters {
            self.iters = i;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.penalties.is_empty() {
            return Err(RefitError::InvalidParams("no penalties selected".into()));
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(RefitError::InvalidParams(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.sigma < 0.0 {
            return Err(RefitError::InvalidParams(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.zeta < 0.0 {
            return Err(RefitError::InvalidParams(format!("zeta must be non-negative, got {}", self.zeta)));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(RefitError::InvalidParams(format!("beta must be positive, got {}", self.beta)));
        }
        if self.iters == 0 {
            return Err(RefitError::InvalidParams("iteration budget must be positive".into()));
        }
        Ok(())
    }
}

struct ScenarioData {
    truth: ImageGrid,
    y: ImageGrid,
    problem: ProblemSpec,
}

fn build_scenario(cfg: &RunConfig) -> Result<ScenarioData> {
    match cfg.scenario {
        Scenario::Shapes128 | Scenario::CameramanLike => {
            let scene = if cfg.scenario == Scenario::Shapes128 {
                build_scene(SceneName::Shapes128)
            } else {
                build_scene(SceneName::CameramanLike)
            };
            let y = add_gaussian_noise(&scene, cfg.sigma, cfg.seed);
            let problem = ProblemSpec::denoise_gray(y.clone(), cfg.lambda)?;
            Ok(ScenarioData { truth: scene, y, problem })
        }
        Scenario::ColorDenoise => {
            let scene = build_color_scene();
            let y = add_gaussian_noise(&scene, cfg.sigma, cfg.seed);
            let problem = ProblemSpec::denoise_color(y.clone(), cfg.lambda)?;
            Ok(ScenarioData { truth: scene, y, problem })
        }
        Scenario::ColorDeblur => {
            let scene = build_color_scene();
            let blur = ForwardOperator::motion_blur_45(10, scene.height, scene.width)?;
            let y = add_gaussian_noise(&blur.apply(&scene)?, cfg.sigma, cfg.seed);
            let problem = ProblemSpec::deblur_color(y.clone(), cfg.lambda, blur)?;
            Ok(ScenarioData { truth: scene, y, problem })
        }
        Scenario::TgvElevation => {
            let scene = build_scene(SceneName::Elevation);
            let y = add_gaussian_noise(&scene, cfg.sigma, cfg.seed);
            let problem = ProblemSpec::tgv_denoise(y.clone(), cfg.lambda, cfg.zeta)?;
            Ok(ScenarioData { truth: scene, y, problem })
        }
    }
}

fn write_grid_pair(dir: &Path, stem: &str, img: &ImageGrid, viewable: &ImageGrid) -> Result<()> {
    write_image(&dir.join(format!("{stem}.{}", if viewable.channels == 3 { "ppm" } else { "pgm" })), viewable)?;
    write_raw(&dir.join(format!("{stem}.rfl")), img)?;
    Ok(())
}

fn viewable(problem: &ProblemSpec, img: &ImageGrid) -> ImageGrid {
    if img.channels == 3 && problem.analysis.block_size() == 3 {
        // Composite state: view the image plane.
        img.extract_channel(0)
    } else {
        img.clone()
    }
}

/// Runs one scenario for every selected penalty, writing per-penalty images
/// (PGM/PPM plus raw sidecar), a per-penalty trace CSV, and one shared
/// metrics CSV. Returns the metric rows in penalty order.
pub fn run_scenario(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let data = build_scenario(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let psnr_noisy = psnr(&data.truth, &data.y);

    // The biased chain does not depend on the penalty; in posterior mode it
    // is solved once and re-used.
    let posterior_biased = if cfg.mode == RefitMode::Posterior {
        let kind = BlockPenaltyKind::new(PenaltyTag::Sd, cfg.lambda)?;
        Some(solve_joint(cfg, &data.problem, &kind, Some(&data.truth))?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for tag in &cfg.penalties {
        let kind = BlockPenaltyKind::new(*tag, cfg.lambda)?;
        let (x_hat, x_tilde, support_size, trace): (ImageGrid, ImageGrid, usize, Vec<TraceRow>) =
            match (&cfg.mode, &posterior_biased) {
                (RefitMode::Joint, _) => {
                    let out = solve_joint(cfg, &data.problem, &kind, Some(&data.truth))?;
                    (out.x_hat, out.x_tilde, out.mask.count(), out.trace)
                }
                (RefitMode::Posterior, Some(biased)) => {
                    let params = pd_params(cfg, &data.problem);
                    let post = posterior_refit(
                        &data.problem,
                        &kind,
                        &biased.x_hat,
                        cfg.beta,
                        &params,
                        Some(&data.truth),
                    )?;
                    (biased.x_hat.clone(), post.x_tilde, post.mask.count(), post.trace)
                }
                (RefitMode::Posterior, None) => unreachable!(),
            };

        let prefix = format!("{}_{}", cfg.scenario.name(), kind.tag.name());
        write_grid_pair(&cfg.out_dir, &format!("{prefix}_y"), &data.y, &viewable(&data.problem, &data.y))?;
        write_grid_pair(&cfg.out_dir, &format!("{prefix}_xhat"), &x_hat, &viewable(&data.problem, &x_hat))?;
        write_grid_pair(&cfg.out_dir, &format!("{prefix}_xtilde"), &x_tilde, &viewable(&data.problem, &x_tilde))?;
        write_trace_csv(&cfg.out_dir.join(format!("{prefix}_trace.csv")), &trace)?;

        rows.push(MetricsRow {
            scenario: cfg.scenario.name().into(),
            penalty: kind.tag.name().into(),
            psnr_noisy,
            psnr_biased: data.problem.psnr_against(&data.truth, &x_hat),
            psnr_refit: data.problem.psnr_against(&data.truth, &x_tilde),
            fidelity_biased: data.problem.fidelity(&x_hat)?,
            fidelity_refit: data.problem.fidelity(&x_tilde)?,
            support_size,
        });
    }
    write_metrics_csv(&cfg.out_dir.join(format!("{}_metrics.csv", cfg.scenario.name())), &rows)?;
    Ok(rows)
}

fn pd_params(cfg: &RunConfig, problem: &ProblemSpec) -> PdParams {
    PdParams::defaults_for(problem).with_iters(cfg.iters).with_beta(cfg.beta)
}

fn solve_joint(
    cfg: &RunConfig,
    problem: &ProblemSpec,
    kind: &BlockPenaltyKind,
    truth: Option<&ImageGrid>,
) -> Result<JointSolveOutput> {
    match cfg.solver {
        SolverChoice::Pd => pd_joint_solve(problem, kind, &pd_params(cfg, problem), truth),
        SolverChoice::Dr => {
            let params = DrParams::defaults_for(problem).with_iters(cfg.iters).with_beta(cfg.beta);
            dr_joint_solve(problem, kind, &params, truth)
        }
    }
}

/// Writes the penalty landscape CSV for one penalty and weight; returns the
/// file path.
pub fn run_landscape(tag: PenaltyTag, lambda: f64, out_dir: &Path) -> Result<PathBuf> {
    let kind = BlockPenaltyKind::new(tag, lambda)?;
    std::fs::create_dir_all(out_dir)?;
    let rows = penalty_landscape(&kind);
    let path = out_dir.join(format!("landscape_{}.csv", tag.name()));
    crate::io::write_landscape_csv(&path, &rows)?;
    Ok(path)
}
