//! Study configurations and the batch runner behind the `weaklab` binary.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_expansion::{
    check_tail_bound, density_error_exact, fit_tail_bound, principal_density_pi, principal_term_ct, TailProbe,
};
use crate::euler::{empirical_moment, euler_exact_law_affine, euler_expectation_1d, gbm_euler_power_moment};
use crate::functions::TestFunction;
use crate::linalg::Matrix;
use crate::models::{
    make_black_scholes_log_model, make_bounded_vol_model, make_constant_model, make_gbm_model, make_ou_model,
    semigroup_apply, SdeModel,
};
use crate::montecarlo::{
    bias_ladder, default_reference, fit_rate, richardson_table, BiasLadder, Estimate, Observable, RateFit, Reference,
    SampleSize,
};
use crate::multiindex::MultiIndex;
use crate::pricing::{
    bs_call, bs_call_delta, bs_digital, bs_gamma, bs_put, greeks_euler, quantity_ladder, quantity_ladder_grid,
    OptionSpec, Payoff, Quantity,
};
use crate::quadrature::{self, GhPolicy};
use crate::report::{emit_report, format_point, FitSummary, Gate, ReportRow, Summary};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    WeakRate,
    Romberg,
    BiasLimit,
    Density,
    Tailbound,
    Greeks,
    Moments,
}

impl StudyKind {
    pub const ALL: [StudyKind; 7] = [
        StudyKind::WeakRate,
        StudyKind::Romberg,
        StudyKind::BiasLimit,
        StudyKind::Density,
        StudyKind::Tailbound,
        StudyKind::Greeks,
        StudyKind::Moments,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StudyKind::WeakRate => "weak-rate",
            StudyKind::Romberg => "romberg",
            StudyKind::BiasLimit => "bias-limit",
            StudyKind::Density => "density",
            StudyKind::Tailbound => "tailbound",
            StudyKind::Greeks => "greeks",
            StudyKind::Moments => "moments",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            StudyKind::WeakRate => "fit the weak convergence rate of the bias over a step ladder",
            StudyKind::Romberg => "rate before and after Romberg extrapolation",
            StudyKind::BiasLimit => "extrapolated n·bias against the principal coefficient C_t f(x)",
            StudyKind::Density => "n·(p_n − p) against the kernel π for affine models",
            StudyKind::Tailbound => "fitted Gaussian-tail certificates for p or π",
            StudyKind::Greeks => "price and delta ladders, Black–Scholes calibration",
            StudyKind::Moments => "moment bounds of the Euler scheme uniform in n",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Constant { b: Vec<f64>, sigma: Vec<Vec<f64>> },
    Ou { theta: f64, sigma: f64 },
    Gbm { mu: f64, sigma: f64 },
    BlackScholes { sigma: f64 },
    BoundedVol { a0: f64, b0: f64, c0: f64 },
}

impl ModelConfig {
    pub fn build(&self) -> Result<SdeModel<f64>> {
        match self {
            ModelConfig::Constant { b, sigma } => {
                let s = Matrix::from_rows(sigma)?;
                make_constant_model(b.clone(), s)
            }
            ModelConfig::Ou { theta, sigma } => make_ou_model(*theta, *sigma),
            ModelConfig::Gbm { mu, sigma } => make_gbm_model(*mu, *sigma),
            ModelConfig::BlackScholes { sigma } => make_black_scholes_log_model(*sigma),
            ModelConfig::BoundedVol { a0, b0, c0 } => make_bounded_vol_model(*a0, *b0, *c0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FunctionConfig {
    Identity,
    Power { k: u32 },
    ExpAbs,
    Dirac { y: Vec<f64> },
    DiracDeriv { y: Vec<f64>, beta: Vec<u32> },
}

impl FunctionConfig {
    pub fn build(&self) -> Result<TestFunction<f64>> {
        Ok(match self {
            FunctionConfig::Identity => TestFunction::identity(),
            FunctionConfig::Power { k } => TestFunction::power(*k),
            FunctionConfig::ExpAbs => TestFunction::exp_abs(),
            FunctionConfig::Dirac { y } => TestFunction::dirac(y.clone()),
            FunctionConfig::DiracDeriv { y, beta } => TestFunction::dirac_deriv(y.clone(), MultiIndex::from_slice(beta))?,
        })
    }

    fn power(&self) -> Option<u32> {
        match self {
            FunctionConfig::Identity => Some(1),
            FunctionConfig::Power { k } => Some(*k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    MonteCarlo,
    /// Exact Euler laws: affine recursion, GBM moment recursion, or grid
    /// propagation for scalar models.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceChoice {
    #[default]
    Auto,
    FineEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    #[default]
    Pi,
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Precision {
    /// Target ratio of predicted bias to CI half-width at every ladder point.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_pilot")]
    pub pilot: usize,
    pub max: usize,
}

fn default_ratio() -> f64 {
    5.0
}

fn default_pilot() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t: Vec<f64>,
    #[serde(default)]
    pub x: Vec<f64>,
    #[serde(default)]
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub csv: PathBuf,
    pub json: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Half-width of the accepted band around the target slope.
    pub slope: f64,
    pub romberg_slope_max: f64,
    /// Quadrature tolerance for `C_t` and `π`.
    pub quad: f64,
    /// Extra absolute slack in the bias-limit comparison.
    pub limit: f64,
    pub density: f64,
    pub remainder_ratio: [f64; 2],
    pub tail_margin: f64,
    pub moment_band: f64,
    pub se_multiple: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            slope: 0.15,
            romberg_slope_max: -1.7,
            quad: 1e-6,
            limit: 0.0,
            density: 1e-3,
            remainder_ratio: [0.5, 2.0],
            tail_margin: 1.0,
            moment_band: 0.2,
            se_multiple: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub function: Option<FunctionConfig>,
    #[serde(default)]
    pub payoff: Option<Payoff>,
    #[serde(default)]
    pub n_ladder: Vec<usize>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub precision: Option<Precision>,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub reference: ReferenceChoice,
    #[serde(default)]
    pub n_ref: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    #[serde(default)]
    pub v: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub kernel: KernelChoice,
    #[serde(default)]
    pub bump: Option<f64>,
    #[serde(default)]
    pub q: Option<u32>,
    pub output: OutputConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_t() -> f64 {
    1.0
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: StudyConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Schema checks that need more than the JSON shape.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let needs_ladder = !matches!(self.study, StudyKind::Tailbound);
        if needs_ladder && self.n_ladder.is_empty() {
            problems.push("n_ladder must not be empty".to_string());
        }
        if self.n_ladder.contains(&0) || self.n_ladder.windows(2).any(|w| w[1] <= w[0]) {
            problems.push("n_ladder must be positive and strictly increasing".into());
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            problems.push(format!("t = {} outside (0, 1]", self.t));
        }
        if self.samples.is_some() && self.precision.is_some() {
            problems.push("give either samples or precision, not both".into());
        }
        let monte_carlo = match self.study {
            StudyKind::WeakRate | StudyKind::Romberg | StudyKind::BiasLimit => self.estimator == Estimator::MonteCarlo,
            StudyKind::Greeks | StudyKind::Moments => true,
            StudyKind::Density | StudyKind::Tailbound => false,
        };
        if monte_carlo && self.samples.is_none() && self.precision.is_none() {
            problems.push("Monte Carlo studies need samples or precision".into());
        }
        match self.study {
            StudyKind::WeakRate | StudyKind::Romberg | StudyKind::BiasLimit => {
                if self.function.is_none() {
                    problems.push(format!("{} needs a function block", self.study.name()));
                }
                if self.x.is_none() {
                    problems.push(format!("{} needs x", self.study.name()));
                }
            }
            StudyKind::Greeks => {
                if self.payoff.is_none() {
                    problems.push("greeks needs a payoff block".into());
                }
                if self.v.is_none() {
                    problems.push("greeks needs the spot v".into());
                }
                if let Some(h) = self.bump {
                    if !(h > 0.0 && h <= 0.1) {
                        problems.push(format!("bump {h} outside (0, 0.1]"));
                    }
                }
            }
            StudyKind::Density | StudyKind::Tailbound => match &self.grid {
                Some(g) if !g.t.is_empty() && !g.x.is_empty() && !g.y.is_empty() => {
                    if g.t.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
                        problems.push("grid times must lie in (0, 1]".into());
                    }
                }
                _ => problems.push(format!("{} needs a grid with t, x and y", self.study.name())),
            },
            StudyKind::Moments => {
                match &self.grid {
                    Some(g) if !g.t.is_empty() && !g.x.is_empty() => {}
                    _ => problems.push("moments needs a grid with t and x".into()),
                }
                if let Some(q) = self.q {
                    if q % 2 != 0 || q > 8 {
                        problems.push(format!("moment order {q} must be even and at most 8"));
                    }
                }
            }
        }
        if let Some(n_ref) = self.n_ref {
            if n_ref < 2 || n_ref % 2 != 0 {
                problems.push(format!("n_ref = {n_ref} must be even"));
            }
        }
        if let Err(e) = self.model.build() {
            problems.push(format!("model: {e}"));
        }
        if let Some(f) = &self.function {
            if let Err(e) = f.build() {
                problems.push(format!("function: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn sample_size(&self) -> SampleSize {
        match (&self.samples, &self.precision) {
            (Some(n), _) => SampleSize::Fixed(*n),
            (None, Some(p)) => SampleSize::Pilot { pilot: p.pilot, ratio: p.ratio, order: 1.0, max: p.max },
            (None, None) => SampleSize::Fixed(0),
        }
    }

    fn n_ref(&self) -> usize {
        self.n_ref.unwrap_or_else(|| 16 * self.n_ladder.last().copied().unwrap_or(32))
    }
}

/// A finished study: rows for the CSV and the JSON summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
}

impl StudyReport {
    pub fn passed(&self) -> bool {
        self.summary.gates.iter().all(|g| g.pass)
    }

    pub fn write(&self, cfg: &StudyConfig) -> Result<()> {
        emit_report(&self.rows, &self.summary, &cfg.output.csv, &cfg.output.json)
    }
}

/// Process exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 3,
        Error::Unconverged { .. } => 4,
        Error::InsufficientSignal { .. } => 2,
        _ => 1,
    }
}

struct Builder<'a> {
    cfg: &'a StudyConfig,
    model_name: String,
    function_name: String,
    rows: Vec<ReportRow>,
    gates: Vec<Gate>,
    fits: Vec<FitSummary>,
    values: Vec<(String, f64)>,
    oracles: Vec<String>,
    status: Option<String>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a StudyConfig, model: &SdeModel<f64>, function_name: String) -> Self {
        Self {
            cfg,
            model_name: model.name.clone(),
            function_name,
            rows: Vec::new(),
            gates: Vec::new(),
            fits: Vec::new(),
            values: Vec::new(),
            oracles: Vec::new(),
            status: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn row(&mut self, f: &str, t: f64, x: &[f64], n: usize, samples: usize, estimate: f64, truth: f64, bias: f64, ci: f64, oracle: &str) {
        if !self.oracles.iter().any(|o| o == oracle) {
            self.oracles.push(oracle.to_string());
        }
        self.rows.push(ReportRow {
            study: self.cfg.study.name().into(),
            model: self.model_name.clone(),
            f: f.into(),
            t,
            x: format_point(x),
            n,
            samples,
            estimate,
            truth,
            bias,
            ci_halfwidth: ci,
            oracle: oracle.into(),
        });
    }

    fn ladder_rows(&mut self, label: &str, x: &[f64], ladder: &BiasLadder, romberg: bool) {
        for p in &ladder.points {
            let (est, bias) = if romberg { (p.romberg_bias.value + ladder.truth.value, p.romberg_bias) } else { (p.estimate.value, p.bias) };
            self.row(label, self.cfg.t, x, p.n, ladder.samples, est, ladder.truth.value, bias.value, bias.ci_halfwidth(), &ladder.oracle);
        }
    }

    /// Fits a rate and records it; returns the slope when there was signal.
    fn fit(&mut self, name: &str, points: &[(f64, f64, f64)]) -> Option<f64> {
        match fit_rate(points) {
            Ok(RateFit { slope, intercept, r_squared, points }) => {
                let used = points.iter().filter(|p| p.used).count();
                self.fits.push(FitSummary { name: name.into(), slope: Some(slope), intercept: Some(intercept), r_squared: Some(r_squared), used_points: used, note: None });
                Some(slope)
            }
            Err(e) => {
                let used = match e {
                    Error::InsufficientSignal { usable, .. } => usable,
                    _ => 0,
                };
                self.fits.push(FitSummary { name: name.into(), slope: None, intercept: None, r_squared: None, used_points: used, note: Some(e.to_string()) });
                None
            }
        }
    }

    fn finish(self) -> StudyReport {
        let pass = self.gates.iter().all(|g| g.pass);
        let status = self.status.clone().unwrap_or_else(|| if pass { "pass".into() } else { "fail".into() });
        let status = if pass { status } else { "fail".into() };
        let summary = Summary {
            study: self.cfg.study.name().into(),
            model: self.model_name,
            function: self.function_name,
            seed: self.cfg.seed,
            status,
            gates: self.gates,
            fits: self.fits,
            values: self.values,
            oracles: self.oracles,
            rows: self.rows.len(),
        };
        StudyReport { rows: self.rows, summary }
    }
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    match cfg.study {
        StudyKind::WeakRate | StudyKind::Romberg => run_rate(cfg, &model),
        StudyKind::BiasLimit => run_bias_limit(cfg, &model),
        StudyKind::Density => run_density(cfg, &model),
        StudyKind::Tailbound => run_tailbound(cfg, &model),
        StudyKind::Greeks => run_greeks(cfg, &model),
        StudyKind::Moments => run_moments(cfg, &model),
    }
}

/// Runs, writes the report files, and maps the outcome to an exit code.
pub fn run_and_write(cfg: &StudyConfig) -> Result<(StudyReport, i32)> {
    let report = run_study(cfg)?;
    report.write(cfg)?;
    let code = if report.passed() { 0 } else { 2 };
    Ok((report, code))
}

/// Sampling-free `E f(X_t^{n,x})` with the name of the route taken.
pub fn deterministic_expectation(
    model: &SdeModel<f64>,
    model_cfg: &ModelConfig,
    f_cfg: &FunctionConfig,
    f: &TestFunction<f64>,
    x: &[f64],
    n: usize,
    t: f64,
) -> Result<(f64, &'static str)> {
    if let (ModelConfig::Gbm { mu, sigma }, Some(k)) = (model_cfg, f_cfg.power()) {
        return Ok((gbm_euler_power_moment(*mu, *sigma, x[0], k, n, t)?, "gbm-moment-recursion"));
    }
    if model.affine().is_some() {
        let law = euler_exact_law_affine(model, x, n, t)?;
        let eval = f.evaluator()?;
        let chart = law.chart()?;
        let r = if x.len() == 1 && !f.breakpoints.is_empty() {
            quadrature::expect_piecewise_1d(&chart, &f.breakpoints, GhPolicy::default(), |y| eval(&[y]))
        } else {
            quadrature::expect(&chart, GhPolicy::default(), |y| eval(y))
        };
        return Ok((r.value, "affine-recursion"));
    }
    if x.len() == 1 {
        return Ok((euler_expectation_1d(model, f, x[0], n, t)?, "grid-propagation"));
    }
    Err(Error::MissingOracle(format!("no sampling-free Euler law for {}", model.name)))
}

fn exact_expectation(model: &SdeModel<f64>, model_cfg: &ModelConfig, f_cfg: &FunctionConfig, f: &TestFunction<f64>, x: &[f64], t: f64) -> Result<(f64, &'static str)> {
    if let (ModelConfig::Gbm { mu, sigma }, Some(k)) = (model_cfg, f_cfg.power()) {
        let k = k as f64;
        return Ok((x[0].powf(k) * (k * mu * t + 0.5 * k * (k - 1.0) * sigma * sigma * t).exp(), "closed-form"));
    }
    Ok((semigroup_apply(model, t, f, x)?.value, "exact-density"))
}

struct DetLadder {
    values: Vec<(usize, f64)>,
    truth: f64,
    oracle: String,
}

fn deterministic_ladder(cfg: &StudyConfig, model: &SdeModel<f64>, f_cfg: &FunctionConfig, f: &TestFunction<f64>, x: &[f64], levels: &[usize]) -> Result<DetLadder> {
    let mut values = Vec::new();
    let mut route = "";
    for &n in levels {
        let (v, r) = deterministic_expectation(model, &cfg.model, f_cfg, f, x, n, cfg.t)?;
        values.push((n, v));
        route = r;
    }
    let (truth, oracle) = match exact_expectation(model, &cfg.model, f_cfg, f, x, cfg.t) {
        Ok((v, o)) => (v, format!("{route}/{o}")),
        Err(_) => {
            let n_ref = cfg.n_ref();
            let a = deterministic_expectation(model, &cfg.model, f_cfg, f, x, n_ref, cfg.t)?.0;
            let b = deterministic_expectation(model, &cfg.model, f_cfg, f, x, n_ref / 2, cfg.t)?.0;
            (2.0 * a - b, format!("{route}/romberg-{n_ref}"))
        }
    };
    Ok(DetLadder { values, truth, oracle })
}

fn mc_reference(cfg: &StudyConfig, model: &SdeModel<f64>, f: &TestFunction<f64>, x: &[f64]) -> Reference {
    match cfg.reference {
        ReferenceChoice::Auto => default_reference(model, f, x, cfg.t, cfg.n_ref()),
        ReferenceChoice::FineEuler => Reference::FineEuler { n_ref: cfg.n_ref() },
    }
}

fn run_rate(cfg: &StudyConfig, model: &SdeModel<f64>) -> Result<StudyReport> {
    let f_cfg = cfg.function.as_ref().expect("validated");
    let f = f_cfg.build()?;
    let x = cfg.x.clone().expect("validated");
    let mut b = Builder::new(cfg, model, f.label.clone());
    let romberg = cfg.study == StudyKind::Romberg;
    let tol = &cfg.tolerances;
    let (plain, rich): (Vec<(f64, f64, f64)>, Vec<(f64, f64, f64)>) = match cfg.estimator {
        Estimator::Deterministic => {
            let mut levels: Vec<usize> = cfg.n_ladder.iter().flat_map(|&n| [n, 2 * n]).collect();
            levels.sort_unstable();
            levels.dedup();
            let lad = deterministic_ladder(cfg, model, f_cfg, &f, &x, &levels)?;
            let at = |n: usize| lad.values.iter().find(|(m, _)| *m == n).expect("level").1;
            let mut plain = Vec::new();
            let mut rich = Vec::new();
            for &n in &cfg.n_ladder {
                let (v, v2) = (at(n), at(2 * n));
                let rb = 2.0 * v2 - v - lad.truth;
                b.row(&f.label, cfg.t, &x, n, 0, v, lad.truth, v - lad.truth, 0.0, &lad.oracle);
                if romberg {
                    b.row(&format!("romberg:{}", f.label), cfg.t, &x, n, 0, rb + lad.truth, lad.truth, rb, 0.0, &lad.oracle);
                }
                plain.push((n as f64, v - lad.truth, 0.0));
                rich.push((n as f64, rb, 0.0));
            }
            (plain, rich)
        }
        Estimator::MonteCarlo => {
            let obs = Observable::single(&f, &x)?;
            let reference = mc_reference(cfg, model, &f, &x);
            let lad = bias_ladder(model, &obs, cfg.t, &cfg.n_ladder, &reference, cfg.sample_size(), RngStream::new(cfg.seed, 0))?;
            b.ladder_rows(&f.label, &x, &lad, false);
            if romberg {
                b.ladder_rows(&format!("romberg:{}", f.label), &x, &lad, true);
            }
            (lad.rate_points(), lad.romberg_rate_points())
        }
    };
    if model.is_constant() {
        let worst = plain.iter().chain(&rich).map(|&(_, e, ci)| e.abs() - 3.0 * ci).fold(f64::NEG_INFINITY, f64::max);
        b.gates.push(Gate::at_most("bias-below-noise-gate", worst, 1e-12));
        b.fit("plain", &plain);
        b.status = Some("exact-scheme".into());
        return Ok(b.finish());
    }
    let slope = b.fit("plain", &plain);
    b.gates.push(Gate::within("plain-slope", slope.unwrap_or(f64::NAN), Some(-1.0 - tol.slope), Some(-1.0 + tol.slope)));
    if romberg {
        let rs = b.fit("romberg", &rich);
        b.gates.push(Gate::at_most("romberg-slope", rs.unwrap_or(f64::NAN), tol.romberg_slope_max));
    }
    Ok(b.finish())
}

fn run_bias_limit(cfg: &StudyConfig, model: &SdeModel<f64>) -> Result<StudyReport> {
    let f_cfg = cfg.function.as_ref().expect("validated");
    let f = f_cfg.build()?;
    let x = cfg.x.clone().expect("validated");
    let tol = &cfg.tolerances;
    let mut b = Builder::new(cfg, model, f.label.clone());
    let ct = principal_term_ct(model, &f, cfg.t, &x, tol.quad)?;
    b.values.push(("principal_term".into(), ct.value));
    b.values.push(("principal_term_quad_error".into(), ct.error));
    let (limit, ci) = match cfg.estimator {
        Estimator::Deterministic => {
            let lad = deterministic_ladder(cfg, model, f_cfg, &f, &x, &cfg.n_ladder)?;
            let scaled: Vec<(usize, f64)> = lad.values.iter().map(|&(n, v)| (n, n as f64 * (v - lad.truth))).collect();
            for &(n, s) in &scaled {
                b.row(&format!("n*bias:{}", f.label), cfg.t, &x, n, 0, s, ct.value, s - ct.value, 0.0, &lad.oracle);
            }
            (richardson_table(&scaled, scaled.len().min(3))?, 0.0)
        }
        Estimator::MonteCarlo => {
            let obs = Observable::single(&f, &x)?;
            let reference = mc_reference(cfg, model, &f, &x);
            let lad = bias_ladder(model, &obs, cfg.t, &cfg.n_ladder, &reference, cfg.sample_size(), RngStream::new(cfg.seed, 0))?;
            for p in &lad.points {
                let s = p.n as f64 * p.bias.value;
                b.row(&format!("n*bias:{}", f.label), cfg.t, &x, p.n, lad.samples, s, ct.value, s - ct.value, p.n as f64 * p.bias.ci_halfwidth(), &lad.oracle);
            }
            (lad.limit.value, lad.limit.ci_halfwidth())
        }
    };
    b.values.push(("extrapolated_limit".into(), limit));
    b.values.push(("extrapolated_limit_ci".into(), ci));
    b.gates.push(Gate::at_most("limit-vs-principal-term", (limit - ct.value).abs(), ct.error + ci + tol.limit));
    Ok(b.finish())
}

fn run_density(cfg: &StudyConfig, model: &SdeModel<f64>) -> Result<StudyReport> {
    let grid = cfg.grid.clone().expect("validated");
    let tol = &cfg.tolerances;
    let d = model.dim_d();
    let zero = MultiIndex::zero(d);
    let mut b = Builder::new(cfg, model, "dirac".into());
    let n_max = *cfg.n_ladder.last().expect("validated");
    let mut worst = 0.0f64;
    // sup-norm of n²(p_n − p − π/n) per ladder level
    let mut remainder = vec![0.0f64; cfg.n_ladder.len()];
    for &t in &grid.t {
        for &x in &grid.x {
            for &y in &grid.y {
                let (xs, ys) = (vec![x; d], vec![y; d]);
                let pi = principal_density_pi(model, t, &xs, &ys, &zero, &zero, tol.quad.min(1e-8))?.require(tol.quad)?;
                for (k, &n) in cfg.n_ladder.iter().enumerate() {
                    let err = density_error_exact(model, n, t, &xs, &ys, &zero, &zero)?;
                    let scaled = n as f64 * err;
                    remainder[k] = remainder[k].max((n as f64 * (scaled - pi.value)).abs());
                    if n == n_max {
                        worst = worst.max((scaled - pi.value).abs());
                    }
                    b.row(&format!("dirac(y={})", format_point(&ys)), t, &xs, n, 0, scaled, pi.value, scaled - pi.value, pi.quad_error, "affine-recursion/principal-density");
                }
            }
        }
    }
    b.gates.push(Gate::at_most("max |n(p_n - p) - pi|", worst, tol.density.max(4.0 / n_max as f64)));
    if remainder.len() >= 2 {
        let k = remainder.len() - 1;
        let ratio = remainder[k] / remainder[k - 1];
        b.values.push(("remainder_ratio".into(), ratio));
        b.gates.push(Gate::within("remainder-ratio", ratio, Some(tol.remainder_ratio[0]), Some(tol.remainder_ratio[1])));
    }
    for (n, r) in cfg.n_ladder.iter().zip(&remainder) {
        b.values.push((format!("remainder_sup_n{n}"), *r));
    }
    Ok(b.finish())
}

fn c2_grid() -> Vec<f64> {
    (1..=40).map(|k| k as f64 * 0.05).collect()
}

fn run_tailbound(cfg: &StudyConfig, model: &SdeModel<f64>) -> Result<StudyReport> {
    let grid = cfg.grid.clone().expect("validated");
    let tol = &cfg.tolerances;
    let d = model.dim_d();
    let zero = MultiIndex::zero(d);
    let density = model.require_density()?;
    let (label, l) = match cfg.kernel {
        KernelChoice::Pi => ("pi", 1),
        KernelChoice::Density => ("density", 0),
    };
    let mut b = Builder::new(cfg, model, label.into());
    let probes_on = |xs: &[f64], ys: &[f64]| {
        let mut probes = Vec::new();
        for &t in &grid.t {
            for &x in xs {
                for &y in ys {
                    if (x - y).abs() * (d as f64).sqrt() <= 5.0 + 1e-12 {
                        probes.push(TailProbe { t, x: vec![x; d], y: vec![y; d] });
                    }
                }
            }
        }
        probes
    };
    let kernel = |t: f64, x: &[f64], y: &[f64]| -> Result<f64> {
        Ok(match cfg.kernel {
            KernelChoice::Pi => principal_density_pi(model, t, x, y, &zero, &zero, tol.quad.min(1e-8))?.require(tol.quad)?.value,
            KernelChoice::Density => density.density(t, x, y),
        })
    };
    let probes = probes_on(&grid.x, &grid.y);
    let mut samples = Vec::with_capacity(probes.len());
    for p in &probes {
        samples.push((p.clone(), kernel(p.t, &p.x, &p.y)?));
    }
    let spec = fit_tail_bound(&samples, l, 0, &c2_grid())?;
    let lookup = |t: f64, x: &[f64], y: &[f64]| {
        samples.iter().find(|(p, _)| p.t == t && p.x == x && p.y == y).map(|(_, v)| *v).unwrap_or(f64::INFINITY)
    };
    let report = check_tail_bound(lookup, &spec, &probes);
    for (p, v) in &samples {
        let env = spec.envelope(p.t, &p.x, &p.y);
        b.row(&format!("{label}(y={})", format_point(&p.y)), p.t, &p.x, 0, 0, *v, env, v.abs() / env, 0.0, "fitted-envelope");
    }
    // the fitted envelope must also hold between the fitting probes
    let midpoints = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let mut out = s.clone();
        out.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out
    };
    let refined = probes_on(&midpoints(&grid.x), &midpoints(&grid.y));
    let mut refined_samples = Vec::with_capacity(refined.len());
    for p in &refined {
        refined_samples.push((p.clone(), kernel(p.t, &p.x, &p.y)?));
    }
    let refined_lookup = |t: f64, x: &[f64], y: &[f64]| {
        refined_samples.iter().find(|(p, _)| p.t == t && p.x == x && p.y == y).map(|(_, v)| *v).unwrap_or(f64::INFINITY)
    };
    let refined_report = check_tail_bound(refined_lookup, &spec, &refined);
    b.values.push(("c1".into(), spec.c1));
    b.values.push(("c2".into(), spec.c2));
    b.values.push(("l".into(), l as f64));
    b.gates.push(Gate::at_most("max-violation-ratio", report.max_violation_ratio, tol.tail_margin));
    b.gates.push(Gate::at_most("refined-grid-violation-ratio", refined_report.max_violation_ratio, tol.tail_margin));
    Ok(b.finish())
}

fn run_greeks(cfg: &StudyConfig, model: &SdeModel<f64>) -> Result<StudyReport> {
    let payoff = cfg.payoff.expect("validated");
    let v = cfg.v.clone().expect("validated");
    let opt = OptionSpec::new(payoff, cfg.t, v.clone())?;
    let tol = &cfg.tolerances;
    let h = cfg.bump.unwrap_or(0.01);
    let rng = RngStream::new(cfg.seed, 0);
    let mut b = Builder::new(cfg, model, payoff.name());
    if model.is_constant() {
        let sigma = match cfg.model {
            ModelConfig::BlackScholes { sigma } => sigma,
            _ => return Err(Error::Config("constant greeks study needs the black-scholes model".into())),
        };
        let n = cfg.n_ladder[0];
        let samples = cfg.samples.unwrap_or_else(|| cfg.precision.as_ref().map_or(0, |p| p.max));
        let g = greeks_euler(model, &opt, n, samples, h, rng)?;
        let (s, t) = (v[0], cfg.t);
        let closed = match payoff {
            Payoff::Call { strike } => Some((bs_call(s, strike, sigma, t), bs_call_delta(s, strike, sigma, t), bs_gamma(s, strike, sigma, t))),
            Payoff::Put { strike } => Some((bs_put(s, strike, sigma, t), bs_call_delta(s, strike, sigma, t) - 1.0, bs_gamma(s, strike, sigma, t))),
            Payoff::Digital { strike } => Some((bs_digital(s, strike, sigma, t), f64::NAN, f64::NAN)),
            Payoff::Constant { value } => Some((value, 0.0, 0.0)),
            Payoff::Identity => Some((s, 1.0, 0.0)),
            Payoff::Power { .. } => None,
        };
        let (cp, cd, cg) = closed.ok_or_else(|| Error::MissingOracle("no closed form for this payoff".into()))?;
        let entries = [("price", g.price, cp), ("delta", g.delta[0], cd), ("gamma", *g.gamma_at(0, 0), cg)];
        for (name, est, truth) in entries {
            if truth.is_nan() {
                continue;
            }
            b.row(&format!("{name}:{}", payoff.name()), t, &v, n, samples, est.value, truth, est.value - truth, est.ci_halfwidth(), "black-scholes");
            let bound = tol.se_multiple * est.std_error;
            let dev = (est.value - truth).abs();
            b.gates.push(Gate::at_most(&format!("{name}-within-se"), dev, if bound > 0.0 { bound } else { 1e-12 }));
        }
        return Ok(b.finish());
    }
    let n_ref = cfg.n_ref.unwrap_or(512);
    let mut slopes = Vec::new();
    for which in [Quantity::Price, Quantity::Delta] {
        let lad = quantity_ladder(model, &opt, which, &cfg.n_ladder, n_ref, cfg.sample_size(), h, rng)?;
        let name = format!("{which:?}").to_lowercase();
        b.ladder_rows(&format!("{name}:{}", payoff.name()), &v, &lad, false);
        let s = b.fit(&name, &lad.rate_points());
        b.gates.push(Gate::within(&format!("{name}-slope"), s.unwrap_or(f64::NAN), Some(-1.0 - tol.slope), Some(-1.0 + tol.slope)));
        if which == Quantity::Price {
            b.fit("price-romberg-monte-carlo", &lad.romberg_rate_points());
            b.values.push(("price_correction".into(), lad.limit.value));
            b.values.push(("price_correction_ci".into(), lad.limit.ci_halfwidth()));
        }
        slopes.push(s);
    }
    if model.dim_d() == 1 {
        let grid = quantity_ladder_grid(model, &opt, Quantity::Price, &cfg.n_ladder, n_ref, h)?;
        let oracle = format!("grid-propagation/romberg-{n_ref}");
        for p in &grid.points {
            b.row(&format!("romberg:price:{}", payoff.name()), cfg.t, &v, p.n, 0, p.romberg_bias + grid.reference, grid.reference, p.romberg_bias, 0.0, &oracle);
        }
        b.fit("price-grid", &grid.rate_points());
        let rs = b.fit("price-romberg-grid", &grid.romberg_rate_points());
        b.gates.push(Gate::at_most("price-romberg-slope", rs.unwrap_or(f64::NAN), tol.romberg_slope_max));
    }
    Ok(b.finish())
}

fn run_moments(cfg: &StudyConfig, model: &SdeModel<f64>) -> Result<StudyReport> {
    let grid = cfg.grid.clone().expect("validated");
    let q = cfg.q.unwrap_or(4);
    let d = model.dim_d();
    let samples = cfg.samples.unwrap_or_else(|| cfg.precision.as_ref().map_or(0, |p| p.max));
    let mut b = Builder::new(cfg, model, format!("norm^{q}"));
    let mut table: Vec<(f64, Vec<f64>, usize, Estimate, f64)> = Vec::new();
    let mut stream = 0u64;
    for &t in &grid.t {
        for &x0 in &grid.x {
            let mut x = vec![0.0; d];
            x[0] = x0;
            let scale = 1.0 + x0.abs().powi(q as i32);
            for &n in &cfg.n_ladder {
                let e = empirical_moment(model, &x, n, t, q, samples, RngStream::new(cfg.seed, stream))?;
                stream += 1;
                table.push((t, x.clone(), n, e, e.value / scale));
            }
        }
    }
    let c = table.iter().map(|r| r.4).fold(0.0, f64::max) * 1.05;
    let mut worst_band = 0.0f64;
    let mut bounded = true;
    for chunk in table.chunks(cfg.n_ladder.len()) {
        let mut ratios: Vec<f64> = chunk.iter().map(|r| r.4).collect();
        ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let median = ratios[ratios.len() / 2];
        for r in &ratios {
            worst_band = worst_band.max((r / median - 1.0).abs());
        }
    }
    for (t, x, n, e, _) in &table {
        let bound = c * (1.0 + x[0].abs().powi(q as i32));
        bounded &= e.value <= bound;
        b.row(&format!("norm^{q}"), *t, x, *n, samples, e.value, bound, e.value - bound, e.ci_halfwidth(), "fitted-moment-bound");
    }
    b.values.push(("c".into(), c));
    b.values.push(("worst_relative_spread".into(), worst_band));
    b.gates.push(Gate::flag("bounded-by-c(1+|x|^q)", bounded));
    b.gates.push(Gate::at_most("c-stable-across-n", worst_band, cfg.tolerances.moment_band));
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(study: &str, extra: &str) -> String {
        format!(
            r#"{{"study": "{study}", "model": {{"kind": "gbm", "mu": 0.1, "sigma": 0.2}}, "seed": 1,
               "output": {{"csv": "out.csv", "json": "out.json"}}{extra}}}"#
        )
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = base("weak-rate", r#", "function": {"kind": "identity"}, "x": [1.0], "n_ladder": [8, 16], "samples": 10, "colour": 1"#);
        assert!(matches!(StudyConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_blocks_are_named() {
        let text = base("weak-rate", r#", "n_ladder": [8, 16], "samples": 10"#);
        let err = StudyConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("function") && err.contains("needs x"), "{err}");
        assert_eq!(exit_code(&StudyConfig::from_json(&text).unwrap_err()), 3);
    }

    #[test]
    fn ladder_must_increase() {
        let text = base("weak-rate", r#", "function": {"kind": "identity"}, "x": [1.0], "n_ladder": [16, 8], "samples": 10"#);
        assert!(StudyConfig::from_json(&text).is_err());
    }

    #[test]
    fn every_study_has_a_name() {
        for s in StudyKind::ALL {
            let parsed: StudyKind = serde_json::from_str(&format!("\"{}\"", s.name())).unwrap();
            assert_eq!(parsed, s);
        }
    }

    #[test]
    fn deterministic_gbm_weak_rate() {
        let text = base(
            "weak-rate",
            r#", "function": {"kind": "identity"}, "x": [1.0], "n_ladder": [8, 16, 32, 64, 128], "estimator": "deterministic""#,
        );
        let cfg = StudyConfig::from_json(&text).unwrap();
        let r = run_study(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.summary);
        let slope = r.summary.fits[0].slope.unwrap();
        assert!((slope + 1.0).abs() < 0.05, "{slope}");
        assert_eq!(r.rows.len(), 5);
    }

    #[test]
    fn constant_model_is_an_exact_scheme() {
        let text = r#"{"study": "weak-rate", "model": {"kind": "constant", "b": [0.1], "sigma": [[0.5]]}, "seed": 3,
            "function": {"kind": "power", "k": 2}, "x": [0.0], "n_ladder": [2, 4, 8, 16], "samples": 2000,
            "output": {"csv": "o.csv", "json": "o.json"}}"#;
        let r = run_study(&StudyConfig::from_json(text).unwrap()).unwrap();
        assert_eq!(r.summary.status, "exact-scheme");
        assert!(r.passed());
    }
}
