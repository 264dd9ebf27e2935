//! Monte Carlo estimation of Euler expectations, Romberg and Richardson
//! extrapolation, bias ladders, and convergence-rate fits.
//!
//! Paths are processed in fixed chunks of [`CHUNK`] consecutive path indices.
//! Each chunk accumulates its own running statistics and the chunks are merged
//! in index order, so results do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::euler::{euler_path, BrownianSlice, EulerWorkspace};
use crate::functions::{PointFn, TestFunction};
use crate::models::{semigroup_apply, SdeModel};
use crate::real::Real;
use crate::rng::{NormalSource, RngStream};

pub const CHUNK: usize = 1024;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Running mean and variance (Welford, merged with Chan's formula).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PathStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl PathStats {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn estimate(&self, n_steps: usize) -> Estimate {
        Estimate { value: self.mean, std_error: self.std_error(), n_samples: self.count as usize, n_steps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub n_steps: usize,
}

impl Estimate {
    pub fn exact(value: f64, n_steps: usize) -> Self {
        Self { value, std_error: 0.0, n_samples: 0, n_steps }
    }

    pub fn ci_halfwidth(&self) -> f64 {
        Z95 * self.std_error
    }
}

/// Runs `n_paths` independent paths. Path `i` reads normals from the stream
/// `rng.path(i)`; `f` writes `width` quantities per path.
pub fn run_paths<W, I, F>(n_paths: usize, width: usize, rng: RngStream, init: I, f: F) -> Result<Vec<PathStats>>
where
    I: Fn() -> W + Sync,
    F: Fn(&mut W, &mut NormalSource, &mut [f64]) -> Result<()> + Sync,
{
    if n_paths as u64 >= 1 << 32 {
        return Err(Error::InvalidParameter("at most 2^32 paths per run".into()));
    }
    let chunks = n_paths.div_ceil(CHUNK);
    let partial: Vec<Result<Vec<PathStats>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut ws = init();
            let mut stats = vec![PathStats::default(); width];
            let mut out = vec![0.0; width];
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n_paths);
            let mut src = rng.path(lo as u64).normals();
            for i in lo..hi {
                src.reset(rng.path(i as u64).stream_id);
                f(&mut ws, &mut src, &mut out)?;
                for (s, &v) in stats.iter_mut().zip(&out) {
                    s.push(v);
                }
            }
            Ok(stats)
        })
        .collect();
    let mut total = vec![PathStats::default(); width];
    for chunk in partial {
        for (t, s) in total.iter_mut().zip(chunk?.iter()) {
            t.merge(s);
        }
    }
    Ok(total)
}

/// A linear combination `Σ_k c_k f(X^{x_k})` over starting points driven by
/// the same Brownian path.
#[derive(Clone)]
pub struct Observable<T> {
    pub label: String,
    pub f: PointFn<T>,
    pub starts: Vec<(Vec<T>, f64)>,
}

impl<T: Real> Observable<T> {
    pub fn single(f: &TestFunction<T>, x: &[T]) -> Result<Self> {
        Ok(Self { label: f.label.clone(), f: f.evaluator()?, starts: vec![(x.to_vec(), 1.0)] })
    }
}

/// Per-path evaluator of an observable at several resolutions of one
/// Brownian path.
struct LadderWorker<'a, T> {
    model: &'a SdeModel<T>,
    obs: &'a Observable<T>,
    fine: BrownianSlice<T>,
    coarse: Vec<BrownianSlice<T>>,
    ws: EulerWorkspace<T>,
    bt: Vec<T>,
    end: Vec<T>,
}

impl<'a, T: Real> LadderWorker<'a, T> {
    fn new(model: &'a SdeModel<T>, obs: &'a Observable<T>, levels: &[usize], t: T) -> Self {
        let r = model.dim_r();
        let finest = *levels.iter().max().expect("nonempty levels");
        Self {
            model,
            obs,
            fine: BrownianSlice::empty(finest, t, r),
            coarse: levels.iter().map(|&n| BrownianSlice::empty(n, t, r)).collect(),
            ws: EulerWorkspace::new(model.dim_d(), r),
            bt: vec![T::zero(); r],
            end: vec![T::zero(); model.dim_d()],
        }
    }

    /// Fills the slices and writes the observable at every level into `vals`.
    fn run(&mut self, src: &mut NormalSource, vals: &mut [f64]) -> Result<()> {
        self.fine.fill(src);
        for (slot, slice) in vals.iter_mut().zip(self.coarse.iter_mut()) {
            let s: &BrownianSlice<T> = if slice.n == self.fine.n {
                &self.fine
            } else {
                self.fine.coarsen_into(slice)?;
                slice
            };
            let mut acc = 0.0;
            for (x, c) in &self.obs.starts {
                euler_path(self.model, x, s, &mut self.ws)?;
                acc += c * (self.obs.f)(&self.ws.state).as_f64();
            }
            *slot = acc;
        }
        Ok(())
    }

    /// Observable evaluated on the exact strong solution.
    fn strong(&mut self) -> Result<f64> {
        let sol = self.model.strong_solution().ok_or_else(|| Error::MissingOracle("strong solution".into()))?;
        self.fine.terminal(&mut self.bt);
        let mut acc = 0.0;
        for (x, c) in &self.obs.starts {
            sol(self.fine.t, x, &self.bt, &mut self.end);
            acc += c * (self.obs.f)(&self.end).as_f64();
        }
        Ok(acc)
    }
}

pub fn estimate_expectation<T: Real>(
    model: &SdeModel<T>,
    f: &TestFunction<T>,
    x: &[T],
    n: usize,
    t: T,
    samples: usize,
    rng: RngStream,
) -> Result<Estimate> {
    let obs = Observable::single(f, x)?;
    let levels = [n];
    let stats = run_paths(samples, 1, rng, || LadderWorker::new(model, &obs, &levels, t), |w, src, out| w.run(src, out))?;
    Ok(stats[0].estimate(n))
}

/// Averages `2 f(X^{2n}) − f(X^n)` over coupled pairs.
pub fn romberg_estimate<T: Real>(
    model: &SdeModel<T>,
    f: &TestFunction<T>,
    x: &[T],
    n: usize,
    t: T,
    samples: usize,
    rng: RngStream,
) -> Result<Estimate> {
    let obs = Observable::single(f, x)?;
    let levels = [n, 2 * n];
    let stats = run_paths(samples, 1, rng, || (LadderWorker::new(model, &obs, &levels, t), [0.0; 2]), |(w, v), src, out| {
        w.run(src, v)?;
        out[0] = 2.0 * v[1] - v[0];
        Ok(())
    })?;
    Ok(stats[0].estimate(n))
}

fn ladder_ratio(ns: &[usize]) -> Result<f64> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::NonGeometricLadder(ns.to_vec()));
    }
    if ns.len() == 1 {
        return Ok(2.0);
    }
    let rho = ns[1] as f64 / ns[0] as f64;
    let geometric = rho > 1.0 && ns.windows(2).all(|w| (w[1] as f64 / w[0] as f64 - rho).abs() <= 1e-12 * rho);
    if !geometric {
        return Err(Error::NonGeometricLadder(ns.to_vec()));
    }
    Ok(rho)
}

/// Weights `w` with `Σ w_i v_i` the `j`-level Neville elimination of the
/// `1/n, …, 1/n^{j−1}` terms, using the last `j` entries of the ladder.
pub fn richardson_weights(ns: &[usize], j: usize) -> Result<Vec<f64>> {
    let rho = ladder_ratio(ns)?;
    if j == 0 || j > ns.len() {
        return Err(Error::InvalidParameter(format!("order {j} needs 1..={} ladder entries", ns.len())));
    }
    let m = ns.len();
    // rows of the tableau as weight vectors
    let mut col: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            e
        })
        .collect();
    // col[i − (k−1)] holds the weights of tableau entry T_{i,k−1}
    for k in 1..j {
        let p = rho.powi(k as i32);
        col = (1..col.len())
            .map(|i| col[i].iter().zip(&col[i - 1]).map(|(&a, &b)| (p * a - b) / (p - 1.0)).collect())
            .collect();
    }
    Ok(col.pop().expect("nonempty tableau"))
}

pub fn richardson_table<T: Real>(values: &[(usize, T)], j: usize) -> Result<T> {
    let ns: Vec<usize> = values.iter().map(|v| v.0).collect();
    let w = richardson_weights(&ns, j)?;
    Ok(values.iter().zip(&w).fold(T::zero(), |acc, ((_, v), &wi)| acc + *v * T::lit(wi)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatePoint {
    pub n: f64,
    pub error: f64,
    pub ci_halfwidth: f64,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Minimum number of points surviving the noise gate.
pub const MIN_RATE_POINTS: usize = 4;

/// Weighted least squares of `log|error|` on `log n`. Points with
/// `|error| ≤ 3·CI` are excluded; weights follow the delta method.
pub fn fit_rate(measurements: &[(f64, f64, f64)]) -> Result<RateFit> {
    if measurements.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidParameter("rate points must be strictly increasing in n".into()));
    }
    let points: Vec<RatePoint> = measurements
        .iter()
        .map(|&(n, e, ci)| RatePoint { n, error: e, ci_halfwidth: ci, used: e.abs() > 3.0 * ci && e != 0.0 && e.is_finite() })
        .collect();
    let usable: Vec<&RatePoint> = points.iter().filter(|p| p.used).collect();
    if usable.len() < MIN_RATE_POINTS {
        return Err(Error::InsufficientSignal { usable: usable.len(), required: MIN_RATE_POINTS });
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    let data: Vec<(f64, f64, f64)> = usable
        .iter()
        .map(|p| {
            let rel = p.ci_halfwidth / p.error.abs();
            (p.n.ln(), p.error.abs().ln(), 1.0 / (rel * rel + 1e-12))
        })
        .collect();
    for &(x, y, w) in &data {
        sw += w;
        sx += w * x;
        sy += w * y;
    }
    let (mx, my) = (sx / sw, sy / sw);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y, w) in &data {
        sxx += w * (x - mx) * (x - mx);
        sxy += w * (x - mx) * (y - my);
        syy += w * (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Ok(RateFit { points, slope, intercept, r_squared })
}

/// Source of `E f(X_t^x)` for bias measurements.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Known value; biases are sample means minus it.
    Exact(f64),
    /// Known value, with each path also compared against the exact strong
    /// solution on the same Brownian path.
    StrongCoupled(f64),
    /// Romberg-corrected fine Euler `2 f(X^{n_ref}) − f(X^{n_ref/2})` on the
    /// same Brownian path.
    FineEuler { n_ref: usize },
}

impl Reference {
    pub fn oracle(&self) -> String {
        match self {
            Reference::Exact(_) => "exact".into(),
            Reference::StrongCoupled(_) => "exact+strong-coupling".into(),
            Reference::FineEuler { n_ref } => format!("romberg-euler-{n_ref}"),
        }
    }
}

/// Picks the best available reference for `f` at `(t, x)`: strong coupling
/// with a quadrature truth, plain quadrature truth, or fine Euler.
pub fn default_reference<T: Real>(model: &SdeModel<T>, f: &TestFunction<T>, x: &[T], t: T, n_ref: usize) -> Reference {
    match semigroup_apply(model, t, f, x) {
        Ok(r) if model.strong_solution().is_some() => Reference::StrongCoupled(r.value.as_f64()),
        Ok(r) => Reference::Exact(r.value.as_f64()),
        Err(_) => Reference::FineEuler { n_ref },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleSize {
    Fixed(usize),
    /// Pilot run, then enough paths that the CI at every ladder point is at
    /// most `1/ratio` of the bias predicted from the pilot at the coarsest
    /// level, decaying as `n^{−order}`.
    Pilot { pilot: usize, ratio: f64, order: f64, max: usize },
}

impl SampleSize {
    pub fn pilot(max: usize) -> Self {
        SampleSize::Pilot { pilot: 10_000, ratio: 5.0, order: 1.0, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderPoint {
    pub n: usize,
    /// `E obs(X^n)`.
    pub estimate: Estimate,
    /// `E obs(X^n) − reference`.
    pub bias: Estimate,
    /// `E[2 obs(X^{2n}) − obs(X^n)] − reference`.
    pub romberg_bias: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasLadder {
    pub label: String,
    pub points: Vec<LadderPoint>,
    pub truth: Estimate,
    pub oracle: String,
    /// Richardson limit of `n·bias` over the ladder.
    pub limit: Estimate,
    pub limit_order: usize,
    pub samples: usize,
}

impl BiasLadder {
    pub fn rate_points(&self) -> Vec<(f64, f64, f64)> {
        self.points.iter().map(|p| (p.n as f64, p.bias.value, p.bias.ci_halfwidth())).collect()
    }

    pub fn romberg_rate_points(&self) -> Vec<(f64, f64, f64)> {
        self.points.iter().map(|p| (p.n as f64, p.romberg_bias.value, p.romberg_bias.ci_halfwidth())).collect()
    }
}

fn ladder_levels(ladder: &[usize], reference: &Reference) -> Result<Vec<usize>> {
    let mut levels: Vec<usize> = ladder.iter().flat_map(|&n| [n, 2 * n]).collect();
    if let Reference::FineEuler { n_ref } = *reference {
        if n_ref < 2 || n_ref % 2 != 0 {
            return Err(Error::InvalidParameter(format!("reference resolution {n_ref} must be even")));
        }
        levels.push(n_ref);
        levels.push(n_ref / 2);
    }
    levels.sort_unstable();
    levels.dedup();
    let finest = *levels.last().expect("nonempty");
    if levels.iter().any(|&n| !finest.is_multiple_of(n)) {
        return Err(Error::NonGeometricLadder(levels));
    }
    Ok(levels)
}

/// Coupled bias measurements over a ladder of step counts. Every level is
/// driven by the same Brownian path, coarsened from the finest level needed
/// by the ladder, its Romberg partners, and the reference.
pub fn bias_ladder<T: Real>(
    model: &SdeModel<T>,
    obs: &Observable<T>,
    t: T,
    ladder: &[usize],
    reference: &Reference,
    samples: SampleSize,
    rng: RngStream,
) -> Result<BiasLadder> {
    let limit_order = ladder.len().min(3);
    let weights = richardson_weights(ladder, limit_order)?;
    let levels = ladder_levels(ladder, reference)?;
    let pos = |n: usize| levels.iter().position(|&l| l == n).expect("level present");
    let m = ladder.len();
    let width = 3 * m + 2;
    let run = |count: usize| {
        run_paths(
            count,
            width,
            rng,
            || (LadderWorker::new(model, obs, &levels, t), vec![0.0; levels.len()]),
            |(w, vals), src, out| {
                w.run(src, vals)?;
                let reference_value = match *reference {
                    Reference::Exact(v) => v,
                    Reference::StrongCoupled(_) => w.strong()?,
                    Reference::FineEuler { n_ref } => 2.0 * vals[pos(n_ref)] - vals[pos(n_ref / 2)],
                };
                let mut lim = 0.0;
                for (i, &n) in ladder.iter().enumerate() {
                    let (v, v2) = (vals[pos(n)], vals[pos(2 * n)]);
                    out[i] = v;
                    out[m + i] = v - reference_value;
                    out[2 * m + i] = 2.0 * v2 - v - reference_value;
                    lim += weights[i] * n as f64 * (v - reference_value);
                }
                out[3 * m] = reference_value;
                out[3 * m + 1] = lim;
                Ok(())
            },
        )
    };
    let count = match samples {
        SampleSize::Fixed(n) => n,
        SampleSize::Pilot { pilot, ratio, order, max } => {
            let stats = run(pilot)?;
            let b0 = stats[m].mean.abs();
            let n0 = ladder[0] as f64;
            let mut need = pilot as f64;
            for (i, &n) in ladder.iter().enumerate() {
                let predicted = b0 * (n0 / n as f64).powf(order);
                let sd = stats[m + i].variance().sqrt();
                if predicted > 0.0 {
                    need = need.max((Z95 * sd * ratio / predicted).powi(2));
                }
            }
            (need.ceil() as usize).clamp(pilot, max)
        }
    };
    let stats = run(count)?;
    let mut truth = stats[3 * m].estimate(0);
    if let Reference::Exact(v) | Reference::StrongCoupled(v) = *reference {
        truth = Estimate::exact(v, 0);
    }
    let points = ladder
        .iter()
        .enumerate()
        .map(|(i, &n)| LadderPoint {
            n,
            estimate: stats[i].estimate(n),
            bias: stats[m + i].estimate(n),
            romberg_bias: stats[2 * m + i].estimate(n),
        })
        .collect();
    Ok(BiasLadder {
        label: obs.label.clone(),
        points,
        truth,
        oracle: reference.oracle(),
        limit: stats[3 * m + 1].estimate(*ladder.last().expect("nonempty")),
        limit_order,
        samples: count,
    })
}

/// Estimates `C_t f(x) = lim n·Δ_t^n f(x)` by Richardson extrapolation of
/// `n·bias` over the ladder.
#[allow(clippy::too_many_arguments)]
pub fn bias_times_n_limit<T: Real>(
    model: &SdeModel<T>,
    f: &TestFunction<T>,
    x: &[T],
    t: T,
    ladder: &[usize],
    samples: SampleSize,
    rng: RngStream,
    reference: &Reference,
) -> Result<Estimate> {
    let obs = Observable::single(f, x)?;
    Ok(bias_ladder(model, &obs, t, ladder, reference, samples, rng)?.limit)
}
