//! European option prices and Greeks from the Euler scheme on the
//! log-underlying, with zero interest rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_expansion::principal_density_pi;
use crate::euler::{euler_expectation_1d, euler_path, BrownianSlice, EulerWorkspace};
use crate::functions::TestFunction;
use crate::models::SdeModel;
use crate::montecarlo::{bias_ladder, estimate_expectation, run_paths, BiasLadder, Estimate, Observable, Reference, SampleSize};
use crate::multiindex::MultiIndex;
use crate::quadrature::{self, GhPolicy, QuadResult};
use crate::real::Real;
use crate::rng::RngStream;
use crate::special::{normal_cdf, normal_pdf};

/// Payoff of the arithmetic mean of the spot coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "payoff", rename_all = "lowercase", deny_unknown_fields)]
pub enum Payoff {
    Call { strike: f64 },
    Put { strike: f64 },
    Digital { strike: f64 },
    Constant { value: f64 },
    Identity,
    Power { q: u32 },
}

impl Payoff {
    pub fn value<T: Real>(&self, u: T) -> T {
        match *self {
            Payoff::Call { strike } => (u - T::lit(strike)).max(T::zero()),
            Payoff::Put { strike } => (T::lit(strike) - u).max(T::zero()),
            Payoff::Digital { strike } => {
                if u > T::lit(strike) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Payoff::Constant { value } => T::lit(value),
            Payoff::Identity => u,
            Payoff::Power { q } => u.powi(q as i32),
        }
    }

    /// `(c′, q)` with `|φ(u)| ≤ c′(1 + |u|^q)`.
    pub fn growth(&self) -> (f64, f64) {
        match *self {
            Payoff::Call { .. } | Payoff::Identity => (1.0, 1.0),
            Payoff::Put { strike } => (strike.abs().max(1.0), 0.0),
            Payoff::Digital { .. } => (1.0, 0.0),
            Payoff::Constant { value } => (value.abs(), 0.0),
            Payoff::Power { q } => (1.0, q as f64),
        }
    }

    fn strike(&self) -> Option<f64> {
        match *self {
            Payoff::Call { strike } | Payoff::Put { strike } | Payoff::Digital { strike } => Some(strike),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Payoff::Call { strike } => format!("call(K={strike})"),
            Payoff::Put { strike } => format!("put(K={strike})"),
            Payoff::Digital { strike } => format!("digital(K={strike})"),
            Payoff::Constant { value } => format!("constant({value})"),
            Payoff::Identity => "identity".into(),
            Payoff::Power { q } => format!("power({q})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionSpec<T> {
    pub payoff: Payoff,
    pub maturity: T,
    pub spot: Vec<T>,
}

impl<T: Real> OptionSpec<T> {
    pub fn new(payoff: Payoff, maturity: T, spot: Vec<T>) -> Result<Self> {
        if spot.is_empty() || spot.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidParameter("spot must be strictly positive".into()));
        }
        if !(maturity > T::zero() && maturity <= T::one()) {
            return Err(Error::InvalidParameter(format!("maturity {maturity} outside (0, 1]")));
        }
        let (c, q) = payoff.growth();
        for k in 0..=200 {
            let u = k as f64 * 0.1;
            let v = payoff.value(u).abs();
            if v > c * (1.0 + u.powf(q)) * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!("{} violates its growth certificate at u = {u}", payoff.name())));
            }
        }
        Ok(Self { payoff, maturity, spot })
    }

    pub fn log_spot(&self) -> Vec<T> {
        self.spot.iter().map(|v| v.ln()).collect()
    }

    /// `f(x) = φ(mean(exp x))`, the payoff seen in log coordinates.
    pub fn log_function(&self) -> TestFunction<T> {
        let payoff = self.payoff;
        let d = self.spot.len();
        let f = move |x: &[T]| {
            let u = x.iter().map(|v| v.exp()).sum::<T>() / T::usize_lit(d);
            payoff.value(u)
        };
        let (c, q) = payoff.growth();
        let tf = if q == 0.0 {
            TestFunction::bounded(&payoff.name(), T::lit(c.max(1.0)), f)
        } else {
            TestFunction::exp_growth(&payoff.name(), T::one(), T::lit(2.0 * c), T::lit(q), f)
                .expect("unit growth exponent")
        };
        match payoff.strike() {
            Some(k) if d == 1 && k > 0.0 => tf.with_breakpoints(vec![T::lit(k.ln())]),
            _ => tf,
        }
    }
}

fn check_market<T: Real>(market: &SdeModel<T>, opt: &OptionSpec<T>) -> Result<()> {
    if market.dim_d() != opt.spot.len() {
        return Err(Error::InvalidParameter("spot dimension does not match the market".into()));
    }
    if !market.is_constant() && !(market.flags.b && market.flags.c) {
        return Err(Error::AssumptionViolation(format!("{} lacks bounded smooth coefficients and ellipticity", market.name)));
    }
    Ok(())
}

fn check_bump(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= 0.1) {
        return Err(Error::InvalidParameter(format!("bump {h} outside (0, 0.1]")));
    }
    Ok(())
}

/// `E φ(S_t^{n})` with `S = exp X` and `X` the Euler scheme of order `n`.
pub fn price_euler<T: Real>(market: &SdeModel<T>, opt: &OptionSpec<T>, n: usize, samples: usize, rng: RngStream) -> Result<Estimate> {
    check_market(market, opt)?;
    estimate_expectation(market, &opt.log_function(), &opt.log_spot(), n, opt.maturity, samples, rng)
}

/// Which price sensitivity a ladder or correction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Price,
    Delta,
    Gamma,
}

/// Bumped log-spots and weights whose combination is the central-difference
/// quantity in the first coordinate.
fn fd_starts<T: Real>(opt: &OptionSpec<T>, which: Quantity, h: f64) -> Vec<(Vec<T>, f64)> {
    let x = opt.log_spot();
    let v = opt.spot[0].as_f64();
    let shifted = |factor: f64| {
        let mut y = x.clone();
        y[0] += T::lit(factor.ln());
        y
    };
    match which {
        Quantity::Price => vec![(x, 1.0)],
        Quantity::Delta => {
            let w = 1.0 / (2.0 * h * v);
            vec![(shifted(1.0 + h), w), (shifted(1.0 - h), -w)]
        }
        Quantity::Gamma => {
            let w = 1.0 / (h * v).powi(2);
            vec![(shifted(1.0 + h), w), (x.clone(), -2.0 * w), (shifted(1.0 - h), w)]
        }
    }
}

pub fn quantity_observable<T: Real>(opt: &OptionSpec<T>, which: Quantity, h: f64) -> Result<Observable<T>> {
    check_bump(h)?;
    let f = opt.log_function();
    Ok(Observable { label: format!("{which:?}:{}", f.label).to_lowercase(), f: f.evaluator()?, starts: fd_starts(opt, which, h) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreeksReport {
    pub price: Estimate,
    pub delta: Vec<Estimate>,
    /// Row-major `d×d`, symmetric by construction.
    pub gamma: Vec<Estimate>,
    pub n_steps: usize,
    pub n_samples: usize,
    pub bump: f64,
}

impl GreeksReport {
    pub fn gamma_at(&self, i: usize, j: usize) -> &Estimate {
        &self.gamma[i * self.delta.len() + j]
    }
}

/// Price, deltas and gammas by central differences in the spot with common
/// random numbers: every bumped spot is driven by the same Brownian path.
pub fn greeks_euler<T: Real>(
    market: &SdeModel<T>,
    opt: &OptionSpec<T>,
    n: usize,
    samples: usize,
    h: f64,
    rng: RngStream,
) -> Result<GreeksReport> {
    check_market(market, opt)?;
    check_bump(h)?;
    let d = opt.spot.len();
    let r = market.dim_r();
    let t = opt.maturity;
    let x0 = opt.log_spot();
    let up = T::lit((1.0 + h).ln());
    let down = T::lit((1.0 - h).ln());
    // starts: x0, then (x0 + up e_i, x0 + down e_i), then the four corners for i < j
    let mut starts = vec![x0.clone()];
    for i in 0..d {
        for s in [up, down] {
            let mut y = x0.clone();
            y[i] += s;
            starts.push(y);
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            for (si, sj) in [(up, up), (up, down), (down, up), (down, down)] {
                let mut y = x0.clone();
                y[i] += si;
                y[j] += sj;
                starts.push(y);
            }
        }
    }
    let f = opt.log_function().evaluator()?;
    let spot: Vec<f64> = opt.spot.iter().map(|v| v.as_f64()).collect();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| ((i + 1)..d).map(move |j| (i, j))).collect();
    let width = 1 + d + d + pairs.len();
    let stats = run_paths(
        samples,
        width,
        rng,
        || (BrownianSlice::empty(n, t, r), EulerWorkspace::new(d, r), vec![0.0; starts.len()]),
        |(slice, ws, vals), src, out| {
            slice.fill(src);
            for (v, x) in vals.iter_mut().zip(&starts) {
                euler_path(market, x, slice, ws)?;
                *v = f(&ws.state).as_f64();
            }
            out[0] = vals[0];
            for i in 0..d {
                let (p, m) = (vals[1 + 2 * i], vals[2 + 2 * i]);
                let hv = h * spot[i];
                out[1 + i] = (p - m) / (2.0 * hv);
                out[1 + d + i] = (p - 2.0 * vals[0] + m) / (hv * hv);
            }
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let base = 1 + 2 * d + 4 * k;
                let num = vals[base] - vals[base + 1] - vals[base + 2] + vals[base + 3];
                out[1 + 2 * d + k] = num / (4.0 * h * h * spot[i] * spot[j]);
            }
            Ok(())
        },
    )?;
    let mut gamma = vec![Estimate::exact(0.0, n); d * d];
    for i in 0..d {
        gamma[i * d + i] = stats[1 + d + i].estimate(n);
    }
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let e = stats[1 + 2 * d + k].estimate(n);
        gamma[i * d + j] = e;
        gamma[j * d + i] = e;
    }
    Ok(GreeksReport {
        price: stats[0].estimate(n),
        delta: (0..d).map(|i| stats[1 + i].estimate(n)).collect(),
        gamma,
        n_steps: n,
        n_samples: samples,
        bump: h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BumpCheck {
    pub coarse: GreeksReport,
    pub fine: GreeksReport,
    /// Largest `|Δ(h) − Δ(h/2)| / (3·SE)` over deltas and gammas.
    pub worst_ratio: f64,
    pub pass: bool,
}

/// Repeats [`greeks_euler`] at `h/2` on the same stream and compares.
pub fn bump_halving_check<T: Real>(
    market: &SdeModel<T>,
    opt: &OptionSpec<T>,
    n: usize,
    samples: usize,
    h: f64,
    rng: RngStream,
) -> Result<BumpCheck> {
    let coarse = greeks_euler(market, opt, n, samples, h, rng)?;
    let fine = greeks_euler(market, opt, n, samples, h / 2.0, rng)?;
    let mut worst = 0.0f64;
    let pairs = coarse.delta.iter().zip(&fine.delta).chain(coarse.gamma.iter().zip(&fine.gamma));
    for (a, b) in pairs {
        let se = a.std_error.max(b.std_error);
        let diff = (a.value - b.value).abs();
        worst = worst.max(if se > 0.0 { diff / (3.0 * se) } else if diff > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(BumpCheck { coarse, fine, worst_ratio: worst, pass: worst <= 1.0 })
}

/// Coupled bias ladder of price, delta or gamma (first coordinate) against
/// the Romberg fine-Euler reference at `n_ref`.
#[allow(clippy::too_many_arguments)]
pub fn quantity_ladder<T: Real>(
    market: &SdeModel<T>,
    opt: &OptionSpec<T>,
    which: Quantity,
    ladder: &[usize],
    n_ref: usize,
    samples: SampleSize,
    h: f64,
    rng: RngStream,
) -> Result<BiasLadder> {
    check_market(market, opt)?;
    let obs = quantity_observable(opt, which, h)?;
    bias_ladder(market, &obs, opt.maturity, ladder, &Reference::FineEuler { n_ref }, samples, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridLadderPoint {
    pub n: usize,
    pub value: f64,
    pub bias: f64,
    pub romberg_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridLadder {
    pub points: Vec<GridLadderPoint>,
    /// `2 q^{n_ref} − q^{n_ref/2}`.
    pub reference: f64,
}

impl GridLadder {
    /// `(n, bias, 0)` triples for [`crate::montecarlo::fit_rate`]; the values carry
    /// no sampling noise.
    pub fn rate_points(&self) -> Vec<(f64, f64, f64)> {
        self.points.iter().map(|p| (p.n as f64, p.bias, 0.0)).collect()
    }

    pub fn romberg_rate_points(&self) -> Vec<(f64, f64, f64)> {
        self.points.iter().map(|p| (p.n as f64, p.romberg_bias, 0.0)).collect()
    }
}

/// Sampling-free version of [`quantity_ladder`] for scalar markets, with
/// Euler expectations from grid propagation of the chain's density.
pub fn quantity_ladder_grid<T: Real>(
    market: &SdeModel<T>,
    opt: &OptionSpec<T>,
    which: Quantity,
    ladder: &[usize],
    n_ref: usize,
    h: f64,
) -> Result<GridLadder> {
    check_market(market, opt)?;
    check_bump(h)?;
    if n_ref < 2 || !n_ref.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("reference resolution {n_ref} must be even")));
    }
    let f = opt.log_function();
    let starts = fd_starts(opt, which, h);
    let quantity = |n: usize| -> Result<f64> {
        let mut acc = 0.0;
        for (x, w) in &starts {
            acc += w * euler_expectation_1d(market, &f, x[0], n, opt.maturity)?.as_f64();
        }
        Ok(acc)
    };
    let reference = 2.0 * quantity(n_ref)? - quantity(n_ref / 2)?;
    let mut points = Vec::with_capacity(ladder.len());
    for &n in ladder {
        let (v, v2) = (quantity(n)?, quantity(2 * n)?);
        points.push(GridLadderPoint { n, value: v, bias: v - reference, romberg_bias: 2.0 * v2 - v - reference });
    }
    Ok(GridLadder { points, reference })
}

/// `C_t^{which} φ(v)`: the Richardson limit of `n·(quantity^n − quantity^{ref})`.
#[allow(clippy::too_many_arguments)]
pub fn correction_estimate<T: Real>(
    market: &SdeModel<T>,
    opt: &OptionSpec<T>,
    which: Quantity,
    ladder: &[usize],
    n_ref: usize,
    samples: SampleSize,
    h: f64,
    rng: RngStream,
) -> Result<Estimate> {
    Ok(quantity_ladder(market, opt, which, ladder, n_ref, samples, h, rng)?.limit)
}

/// `C_t^{which} φ(v)` from the kernel: `∫ φ(e^y) ∂_x^k π(t, ln v, y) dy`
/// with the chain rule from `x = ln v` to `v`. One-dimensional markets with
/// an analytic density only.
pub fn correction_direct<T: Real>(market: &SdeModel<T>, opt: &OptionSpec<T>, which: Quantity, tol: T) -> Result<QuadResult<T>> {
    check_market(market, opt)?;
    if market.dim_d() != 1 {
        return Err(Error::UnsupportedFunctional("direct correction is one-dimensional".into()));
    }
    let density = market
        .exact_density()
        .ok_or_else(|| Error::MissingOracle(format!("{} has no analytic density for the kernel route", market.name)))?;
    let f = opt.log_function();
    let eval = f.evaluator()?;
    let t = opt.maturity;
    let x = opt.log_spot();
    let v = opt.spot[0];
    let kernel = |alpha: u32| -> Result<QuadResult<T>> {
        let a = MultiIndex::from_slice(&[alpha]);
        let b = MultiIndex::zero(1);
        let chart = density.forward_chart(t, &x);
        let mut failure = None;
        let mut worst = T::zero();
        let policy = GhPolicy { rtol: T::lit(1e-8), ..GhPolicy::default() }.with_atol(tol);
        let r = quadrature::expect_piecewise_1d(&chart, &f.breakpoints, policy, |y| {
            let p = density.density(t, &x, &[y]);
            let fy = eval(&[y]);
            if p == T::zero() || fy == T::zero() {
                return T::zero();
            }
            match principal_density_pi(market, t, &x, &[y], &a, &b, tol * T::lit(1e-2)) {
                Ok(pi) => {
                    worst = worst.max(pi.quad_error * fy.abs() / p);
                    fy * pi.value / p
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    T::zero()
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(QuadResult { value: r.value, error: r.error + worst, converged: r.converged, evaluations: r.evaluations })
    };
    Ok(match which {
        Quantity::Price => kernel(0)?,
        Quantity::Delta => {
            let k1 = kernel(1)?;
            QuadResult { value: k1.value / v, error: k1.error / v, ..k1 }
        }
        Quantity::Gamma => {
            let (k1, k2) = (kernel(1)?, kernel(2)?);
            let v2 = v * v;
            QuadResult {
                value: (k2.value - k1.value) / v2,
                error: (k1.error + k2.error) / v2,
                converged: k1.converged && k2.converged,
                evaluations: k1.evaluations + k2.evaluations,
            }
        }
    })
}

fn d1_d2(v: f64, k: f64, sigma: f64, t: f64) -> (f64, f64) {
    let s = sigma * t.sqrt();
    let d1 = ((v / k).ln() + 0.5 * sigma * sigma * t) / s;
    (d1, d1 - s)
}

/// Black–Scholes call price at zero rate.
pub fn bs_call(v: f64, k: f64, sigma: f64, t: f64) -> f64 {
    let (d1, d2) = d1_d2(v, k, sigma, t);
    v * normal_cdf(d1) - k * normal_cdf(d2)
}

pub fn bs_put(v: f64, k: f64, sigma: f64, t: f64) -> f64 {
    bs_call(v, k, sigma, t) - v + k
}

pub fn bs_digital(v: f64, k: f64, sigma: f64, t: f64) -> f64 {
    normal_cdf(d1_d2(v, k, sigma, t).1)
}

pub fn bs_call_delta(v: f64, k: f64, sigma: f64, t: f64) -> f64 {
    normal_cdf(d1_d2(v, k, sigma, t).0)
}

/// Gamma of calls and puts alike.
pub fn bs_gamma(v: f64, k: f64, sigma: f64, t: f64) -> f64 {
    normal_pdf(d1_d2(v, k, sigma, t).0) / (v * sigma * t.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_black_scholes_log_model, make_bounded_vol_model, make_ou_model};

    #[test]
    fn payoffs_and_config_names() {
        let p: Payoff = serde_json::from_str(r#"{"payoff": "call", "strike": 1.0}"#).unwrap();
        assert_eq!(p, Payoff::Call { strike: 1.0 });
        let q: Payoff = serde_json::from_str(r#"{"payoff": "power", "q": 2}"#).unwrap();
        assert_eq!(q.value(3.0f64), 9.0);
        assert!(serde_json::from_str::<Payoff>(r#"{"payoff": "call", "strike": 1.0, "x": 1}"#).is_err());
        assert_eq!(Payoff::Put { strike: 1.0 }.value(0.4f64), 0.6);
        assert_eq!(Payoff::Digital { strike: 1.0 }.value(1.2f64), 1.0);
    }

    #[test]
    fn rejects_bad_spot() {
        assert!(OptionSpec::new(Payoff::Identity, 1.0f64, vec![0.0]).is_err());
        assert!(OptionSpec::new(Payoff::Identity, 1.5f64, vec![1.0]).is_err());
    }

    #[test]
    fn unit_payoff_prices_exactly() {
        let m = make_bounded_vol_model(0.0, 0.4, 0.3).unwrap();
        let opt = OptionSpec::new(Payoff::Constant { value: 1.0 }, 1.0, vec![1.0]).unwrap();
        let p = price_euler(&m, &opt, 8, 2000, RngStream::new(1, 0)).unwrap();
        assert_eq!(p.value, 1.0);
        let g = greeks_euler(&m, &opt, 8, 2000, 0.01, RngStream::new(1, 0)).unwrap();
        assert_eq!(g.delta[0].value, 0.0);
        assert_eq!(g.gamma_at(0, 0).value, 0.0);
    }

    #[test]
    fn black_scholes_closed_forms() {
        let (v, k, s, t) = (1.0, 1.1, 0.25, 0.75);
        let call = bs_call(v, k, s, t);
        assert!((call - bs_put(v, k, s, t) - (v - k)).abs() < 1e-15);
        let fd = |f: &dyn Fn(f64) -> f64, h: f64| (f(v + h) - f(v - h)) / (2.0 * h);
        assert!((fd(&|x| bs_call(x, k, s, t), 1e-5) - bs_call_delta(v, k, s, t)).abs() < 1e-9);
        assert!((fd(&|x| bs_call_delta(x, k, s, t), 1e-5) - bs_gamma(v, k, s, t)).abs() < 1e-8);
        // Brenner–Subrahmanyam check at the money
        assert!((bs_call(1.0, 1.0, 0.2, 1.0) - 0.079_655_674_554_057_6).abs() < 1e-12);
    }

    #[test]
    fn black_scholes_price_matches_closed_form() {
        let sigma = 0.2;
        let m = make_black_scholes_log_model(sigma).unwrap();
        let opt = OptionSpec::new(Payoff::Call { strike: 1.0 }, 1.0, vec![1.0]).unwrap();
        let p = price_euler(&m, &opt, 3, 200_000, RngStream::new(5, 2)).unwrap();
        let exact = bs_call(1.0, 1.0, sigma, 1.0);
        assert!((p.value - exact).abs() < 3.0 * p.std_error, "{} vs {exact} ± {}", p.value, p.std_error);
    }

    #[test]
    fn crn_greeks_are_reproducible() {
        let m = make_bounded_vol_model(0.0, 0.4, 0.3).unwrap();
        let opt = OptionSpec::new(Payoff::Call { strike: 1.0 }, 1.0, vec![1.0]).unwrap();
        let a = greeks_euler(&m, &opt, 8, 3000, 0.01, RngStream::new(3, 4)).unwrap();
        let b = greeks_euler(&m, &opt, 8, 3000, 0.01, RngStream::new(3, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn put_call_parity_on_shared_paths() {
        let m = make_bounded_vol_model(0.0, 0.4, 0.3).unwrap();
        let rng = RngStream::new(8, 0);
        let spec = |p| OptionSpec::new(p, 1.0, vec![1.0]).unwrap();
        let call = price_euler(&m, &spec(Payoff::Call { strike: 1.0 }), 16, 20_000, rng).unwrap();
        let put = price_euler(&m, &spec(Payoff::Put { strike: 1.0 }), 16, 20_000, rng).unwrap();
        let fwd = price_euler(&m, &spec(Payoff::Identity), 16, 20_000, rng).unwrap();
        // identical paths make the parity hold path by path
        assert!((call.value - put.value - (fwd.value - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gamma_is_symmetric_in_two_dimensions() {
        let m = crate::models::make_constant_model(
            vec![-0.02, -0.045],
            crate::linalg::Matrix::from_row_major(2, 2, vec![0.2, 0.0, 0.15, 0.25]),
        )
        .unwrap();
        let opt = OptionSpec::new(Payoff::Call { strike: 1.0 }, 1.0, vec![1.0, 1.0]).unwrap();
        let g = greeks_euler(&m, &opt, 2, 5000, 0.01, RngStream::new(2, 2)).unwrap();
        assert_eq!(g.gamma_at(0, 1), g.gamma_at(1, 0));
    }

    #[test]
    fn direct_route_requires_density() {
        let m = make_bounded_vol_model(0.0, 0.4, 0.3).unwrap();
        let opt = OptionSpec::new(Payoff::Call { strike: 1.0 }, 1.0, vec![1.0]).unwrap();
        assert!(matches!(correction_direct(&m, &opt, Quantity::Price, 1e-6), Err(Error::MissingOracle(_))));
        let bs = make_black_scholes_log_model(0.2).unwrap();
        assert_eq!(correction_direct(&bs, &opt, Quantity::Price, 1e-6).unwrap().value, 0.0);
        let ou = make_ou_model(1.0, 1.0).unwrap();
        assert!(matches!(correction_direct(&ou, &opt, Quantity::Price, 1e-6), Err(Error::AssumptionViolation(_))));
    }
}
