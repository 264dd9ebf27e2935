//! The Euler scheme on the grid `k/n`, Brownian slices shared across
//! resolutions, and the closed-form Gaussian law of the scheme for affine
//! models.

use crate::error::{Error, Result};
use crate::gaussian::{AffineGaussianMap, GaussianLaw};
use crate::linalg::Matrix;
use crate::models::SdeModel;
use crate::multiindex::binomial;
use crate::montecarlo::{run_paths, Estimate};
use crate::functions::TestFunction;
use crate::quadrature::{self, Chart, GhPolicy};
use crate::real::{CompensatedSum, Real};
use crate::rng::{NormalSource, RngStream};

/// Number of full steps and the length of the trailing partial step for a
/// grid of mesh `1/n` stopped at `t`. `n·t` within `1e-9·n` of an integer is
/// treated as on the grid.
pub fn grid_steps<T: Real>(n: usize, t: T) -> (usize, T) {
    let nf = T::usize_lit(n);
    let nt = nf * t;
    let k0 = nt.round();
    if (nt - k0).abs() <= T::lit(1e-9) * nf {
        return (k0.as_f64() as usize, T::zero());
    }
    let k = nt.floor();
    (k.as_f64() as usize, t - k / nf)
}

/// Brownian increments over `[0, t]` on the grid `k/n`, with a final
/// fractional increment when `n·t` is not an integer.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianSlice<T> {
    pub n: usize,
    pub t: T,
    pub r: usize,
    pub full_steps: usize,
    pub frac: T,
    /// Step-major, `r` coordinates per step.
    pub increments: Vec<T>,
}

impl<T: Real> BrownianSlice<T> {
    pub fn empty(n: usize, t: T, r: usize) -> Self {
        let (full_steps, frac) = grid_steps(n, t);
        let steps = full_steps + usize::from(frac > T::zero());
        Self { n, t, r, full_steps, frac, increments: vec![T::zero(); steps * r] }
    }

    pub fn steps(&self) -> usize {
        self.full_steps + usize::from(self.frac > T::zero())
    }

    pub fn step_length(&self, k: usize) -> T {
        if k < self.full_steps {
            T::one() / T::usize_lit(self.n)
        } else {
            self.frac
        }
    }

    pub fn generate(n: usize, t: T, r: usize, source: &mut NormalSource) -> Self {
        let mut s = Self::empty(n, t, r);
        s.fill(source);
        s
    }

    /// Overwrites the increments with fresh draws from `source`.
    pub fn fill(&mut self, source: &mut NormalSource) {
        let full = (T::one() / T::usize_lit(self.n)).sqrt();
        let part = self.frac.sqrt();
        let r = self.r;
        for (k, chunk) in self.increments.chunks_exact_mut(r).enumerate() {
            let scale = if k < self.full_steps { full } else { part };
            for v in chunk {
                *v = scale * T::lit(source.next_normal());
            }
        }
    }

    /// Writes into `out` the slice at resolution `out.n`, which must divide
    /// `self.n`, by summing adjacent fine increments.
    pub fn coarsen_into(&self, out: &mut BrownianSlice<T>) -> Result<()> {
        if out.n == 0 || !self.n.is_multiple_of(out.n) {
            return Err(Error::NonGeometricLadder(vec![out.n, self.n]));
        }
        let f = self.n / out.n;
        let r = self.r;
        for j in 0..out.full_steps {
            for c in 0..r {
                let mut acc = T::zero();
                for k in (j * f)..((j + 1) * f) {
                    acc += self.increments[k * r + c];
                }
                out.increments[j * r + c] = acc;
            }
        }
        if out.frac > T::zero() {
            let j = out.full_steps;
            for c in 0..r {
                let mut acc = T::zero();
                for k in (j * f)..self.steps() {
                    acc += self.increments[k * r + c];
                }
                out.increments[j * r + c] = acc;
            }
        }
        Ok(())
    }

    pub fn coarsen(&self, n: usize) -> Result<Self> {
        let mut out = Self::empty(n, self.t, self.r);
        self.coarsen_into(&mut out)?;
        Ok(out)
    }

    /// `B_t`.
    pub fn terminal(&self, out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        for chunk in self.increments.chunks_exact(self.r) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EulerEndpoint<T> {
    pub value: Vec<T>,
    pub n: usize,
    pub t: T,
    pub x0: Vec<T>,
}

/// Scratch buffers for repeated Euler runs.
#[derive(Debug, Clone)]
pub struct EulerWorkspace<T> {
    pub state: Vec<T>,
    drift: Vec<T>,
    sigma: Vec<T>,
}

impl<T: Real> EulerWorkspace<T> {
    pub fn new(d: usize, r: usize) -> Self {
        Self { state: vec![T::zero(); d], drift: vec![T::zero(); d], sigma: vec![T::zero(); d * r] }
    }
}

/// Runs the scheme along `slice`; the endpoint is left in `ws.state`.
pub fn euler_path<T: Real>(model: &SdeModel<T>, x: &[T], slice: &BrownianSlice<T>, ws: &mut EulerWorkspace<T>) -> Result<()> {
    let (d, r) = (model.dim_d(), model.dim_r());
    ws.state.copy_from_slice(x);
    let h_full = T::one() / T::usize_lit(slice.n);
    for (k, db) in slice.increments.chunks_exact(r).enumerate() {
        let h = if k < slice.full_steps { h_full } else { slice.frac };
        model.drift(&ws.state, &mut ws.drift);
        model.diffusion(&ws.state, &mut ws.sigma);
        let mut finite = true;
        for i in 0..d {
            let mut v = ws.state[i] + ws.drift[i] * h;
            for c in 0..r {
                v += ws.sigma[i * r + c] * db[c];
            }
            finite &= v.is_finite();
            ws.state[i] = v;
        }
        if !finite {
            return Err(Error::SimulationBlowup { step: k });
        }
    }
    Ok(())
}

fn check_inputs<T: Real>(model: &SdeModel<T>, x: &[T], n: usize, t: T) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParameter("number of steps must be positive".into()));
    }
    if !(t > T::zero() && t <= T::one()) {
        return Err(Error::InvalidParameter(format!("time {t} outside (0, 1]")));
    }
    if x.len() != model.dim_d() {
        return Err(Error::InvalidParameter("starting point has wrong dimension".into()));
    }
    Ok(())
}

pub fn simulate_euler<T: Real>(model: &SdeModel<T>, x: &[T], n: usize, t: T, rng: RngStream) -> Result<EulerEndpoint<T>> {
    check_inputs(model, x, n, t)?;
    let slice = BrownianSlice::generate(n, t, model.dim_r(), &mut rng.normals());
    let mut ws = EulerWorkspace::new(model.dim_d(), model.dim_r());
    euler_path(model, x, &slice, &mut ws)?;
    Ok(EulerEndpoint { value: ws.state, n, t, x0: x.to_vec() })
}

/// Endpoints at resolutions `n` and `2n` driven by one Brownian path.
pub fn simulate_coupled<T: Real>(
    model: &SdeModel<T>,
    x: &[T],
    n: usize,
    t: T,
    rng: RngStream,
) -> Result<(EulerEndpoint<T>, EulerEndpoint<T>)> {
    let mut v = simulate_ladder(model, x, &[n, 2 * n], t, rng)?;
    let fine = v.pop().expect("two levels");
    let coarse = v.pop().expect("two levels");
    Ok((coarse, fine))
}

/// Endpoints at every resolution of `ladder`, all driven by the slice at the
/// finest resolution, which every other level must divide.
pub fn simulate_ladder<T: Real>(
    model: &SdeModel<T>,
    x: &[T],
    ladder: &[usize],
    t: T,
    rng: RngStream,
) -> Result<Vec<EulerEndpoint<T>>> {
    let finest = *ladder.iter().max().ok_or_else(|| Error::InvalidParameter("empty ladder".into()))?;
    check_inputs(model, x, finest, t)?;
    let slice = BrownianSlice::generate(finest, t, model.dim_r(), &mut rng.normals());
    let mut ws = EulerWorkspace::new(model.dim_d(), model.dim_r());
    ladder
        .iter()
        .map(|&n| {
            check_inputs(model, x, n, t)?;
            let s = slice.coarsen(n)?;
            euler_path(model, x, &s, &mut ws)?;
            Ok(EulerEndpoint { value: ws.state.clone(), n, t, x0: x.to_vec() })
        })
        .collect()
}

/// Gaussian transition `y ~ N(E x + c, V)` of the Euler chain for affine
/// drift `M x + c0` and constant diffusion, from the recursions
/// `m ← (I + M h) m + c0 h` and `V ← (I + M h) V (I + M h)* + a h`.
pub fn euler_exact_kernel_affine<T: Real>(model: &SdeModel<T>, n: usize, t: T) -> Result<AffineGaussianMap<T>> {
    let aff = model
        .affine()
        .ok_or_else(|| Error::NotAffine(format!("{} is not affine with constant diffusion", model.name)))?;
    if n == 0 || !(t > T::zero() && t <= T::one()) {
        return Err(Error::InvalidParameter("need n ≥ 1 and t in (0, 1]".into()));
    }
    let d = model.dim_d();
    let a = aff.sigma.matmul(&aff.sigma.transpose());
    let (k, frac) = grid_steps(n, t);
    let mut e = Matrix::identity(d);
    let mut c = vec![T::zero(); d];
    let mut v = Matrix::zeros(d, d);
    let h_full = T::one() / T::usize_lit(n);
    let mut step = |h: T| {
        let g = Matrix::identity(d).add(&aff.m.scale(h));
        e = g.matmul(&e);
        let gc = g.matvec(&c);
        for i in 0..d {
            c[i] = gc[i] + aff.c[i] * h;
        }
        v = g.matmul(&v).matmul(&g.transpose()).add(&a.scale(h));
    };
    for _ in 0..k {
        step(h_full);
    }
    if frac > T::zero() {
        step(frac);
    }
    AffineGaussianMap::new(e, c, v)
}

pub fn euler_exact_law_affine<T: Real>(model: &SdeModel<T>, x: &[T], n: usize, t: T) -> Result<GaussianLaw<T>> {
    Ok(euler_exact_kernel_affine(model, n, t)?.law(x))
}

/// Monte Carlo estimate of `E‖X_t^{n,x}‖^q` for even `q ≤ 8`.
pub fn empirical_moment<T: Real>(
    model: &SdeModel<T>,
    x: &[T],
    n: usize,
    t: T,
    q: u32,
    samples: usize,
    rng: RngStream,
) -> Result<Estimate> {
    if !q.is_multiple_of(2) || q > 8 {
        return Err(Error::InvalidParameter(format!("moment order {q} must be even and at most 8")));
    }
    check_inputs(model, x, n, t)?;
    let (d, r) = (model.dim_d(), model.dim_r());
    let stats = run_paths(
        samples,
        1,
        rng,
        || (BrownianSlice::empty(n, t, r), EulerWorkspace::new(d, r)),
        |(slice, ws), src, out| {
            slice.fill(src);
            euler_path(model, x, slice, ws)?;
            let norm2: T = ws.state.iter().map(|&v| v * v).sum();
            out[0] = norm2.as_f64().powi(q as i32 / 2);
            Ok(())
        },
    )?;
    Ok(stats[0].estimate(n))
}

/// `E[(X_t^{n,x})^k]` for the Euler chain of `dX = μX dt + σX dW`: a product
/// of one-step moments `E(1 + μh + σ√h Z)^k`.
pub fn gbm_euler_power_moment(mu: f64, sigma: f64, x: f64, k: u32, n: usize, t: f64) -> Result<f64> {
    if n == 0 || !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter("need n ≥ 1 and t in (0, 1]".into()));
    }
    let step = |h: f64| {
        let (a, b) = (1.0 + mu * h, sigma * h.sqrt());
        let mut acc = 0.0;
        let mut double_factorial = 1.0;
        for j in (0..=k).step_by(2) {
            if j >= 2 {
                double_factorial *= (j - 1) as f64;
            }
            acc += binomial(k, j) * a.powi((k - j) as i32) * b.powi(j as i32) * double_factorial;
        }
        acc
    };
    let (full, frac) = grid_steps(n, t);
    let mut m = x.powi(k as i32) * step(1.0 / n as f64).powi(full as i32);
    if frac > 0.0 {
        m *= step(frac);
    }
    Ok(m)
}

/// `E f(X_t^{n,x})` for a scalar model without sampling.
///
/// The density of the chain is carried on a uniform grid, each step applying
/// the Gaussian one-step kernel by the trapezoid rule; the last step is
/// integrated against `f` by quadrature, so kinks of `f` do not reach the grid.
pub fn euler_expectation_1d<T: Real>(model: &SdeModel<T>, f: &TestFunction<T>, x: T, n: usize, t: T) -> Result<T> {
    if model.dim_d() != 1 || model.dim_r() != 1 {
        return Err(Error::InvalidParameter("grid propagation needs a scalar model".into()));
    }
    check_inputs(model, &[x], n, t)?;
    let eval = f.evaluator()?;
    let coef = |z: T| {
        let (mut b, mut s) = ([T::zero()], [T::zero()]);
        model.drift(&[z], &mut b);
        model.diffusion(&[z], &mut s);
        (b[0], s[0].abs())
    };
    let last = |m: T, s: T| -> T {
        let chart = Chart::affine(vec![m], Matrix::diag(&[s]));
        if f.breakpoints.is_empty() {
            quadrature::expect(&chart, GhPolicy::default(), |y| eval(y)).value
        } else {
            quadrature::expect_piecewise_1d(&chart, &f.breakpoints, GhPolicy::default(), |y| eval(&[y])).value
        }
    };
    let (k, frac) = grid_steps(n, t);
    let h = T::one() / T::usize_lit(n);
    let mut steps = vec![h; k];
    if frac > T::zero() {
        steps.push(frac);
    }
    let (b0, s0) = coef(x);
    if steps.len() == 1 {
        return Ok(last(x + b0 * steps[0], s0 * steps[0].sqrt()));
    }
    let (mut s_lo, mut s_hi, mut b_hi) = (T::infinity(), T::zero(), T::zero());
    for i in -60..=60 {
        let (b, s) = coef(x + T::lit(i as f64 * 0.1));
        s_lo = s_lo.min(s);
        s_hi = s_hi.max(s);
        b_hi = b_hi.max(b.abs());
    }
    if !(s_lo > T::lit(1e-3) * s_hi) {
        return Err(Error::AssumptionViolation("diffusion too degenerate for grid propagation".into()));
    }
    let half_width = T::lit(9.0) * s_hi * t.sqrt() + b_hi * t + T::one();
    let dx = s_lo * h.sqrt() * T::lit(0.5);
    let cells = (T::lit(2.0) * half_width / dx).ceil().as_f64() as usize;
    if cells > 400_000 {
        return Err(Error::InvalidParameter(format!("grid of {cells} cells is too fine")));
    }
    let lo = x - half_width;
    let node = |i: usize| lo + dx * T::usize_lit(i);
    let norm = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let reach = T::lit(9.0);
    let mut p = vec![T::zero(); cells + 1];
    let spread = |p: &mut [T], m: T, s: T, mass: T| {
        let a = ((m - reach * s - lo) / dx).floor().max(T::zero()).as_f64() as usize;
        let b = (((m + reach * s - lo) / dx).ceil().as_f64().max(0.0) as usize).min(cells);
        for (i, slot) in p.iter_mut().enumerate().take(b + 1).skip(a) {
            let u = (node(i) - m) / s;
            *slot += mass * norm * (-T::lit(0.5) * u * u).exp() / s;
        }
    };
    spread(&mut p, x + b0 * steps[0], s0 * steps[0].sqrt(), T::one());
    let mut next = vec![T::zero(); cells + 1];
    for &step in &steps[1..steps.len() - 1] {
        next.iter_mut().for_each(|v| *v = T::zero());
        let peak = p.iter().fold(T::zero(), |a, &b| a.max(b));
        for (j, &pj) in p.iter().enumerate() {
            if pj <= peak * T::lit(1e-22) {
                continue;
            }
            let z = node(j);
            let (b, s) = coef(z);
            spread(&mut next, z + b * step, s * step.sqrt(), pj * dx);
        }
        std::mem::swap(&mut p, &mut next);
    }
    let step = *steps.last().expect("at least two steps");
    let peak = p.iter().fold(T::zero(), |a, &b| a.max(b));
    let mut acc = CompensatedSum::new();
    for (j, &pj) in p.iter().enumerate() {
        if pj <= peak * T::lit(1e-22) {
            continue;
        }
        let z = node(j);
        let (b, s) = coef(z);
        acc.add(pj * dx * last(z + b * step, s * step.sqrt()));
    }
    Ok(acc.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_constant_model, make_gbm_model, make_ou_model};

    #[test]
    fn gbm_moment_recursion() {
        let m = gbm_euler_power_moment(0.1, 0.3, 1.0, 1, 8, 1.0).unwrap();
        assert!((m - 1.0125f64.powi(8)).abs() < 1e-15);
        // one step: E(1 + μ + σZ)² = (1 + μ)² + σ²
        let m2 = gbm_euler_power_moment(0.1, 0.3, 2.0, 2, 1, 1.0).unwrap();
        assert!((m2 - 4.0 * (1.21 + 0.09)).abs() < 1e-14);
    }

    #[test]
    fn grid_propagation_matches_affine_law() {
        let m = make_ou_model(1.0, 1.0).unwrap();
        let f = TestFunction::power(2);
        for &(n, t) in &[(1usize, 1.0f64), (4, 1.0), (16, 1.0), (8, 0.6)] {
            let law = euler_exact_law_affine(&m, &[1.0], n, t).unwrap();
            let got = euler_expectation_1d(&m, &f, 1.0, n, t).unwrap();
            assert!((got - law.second_moment()).abs() < 1e-10, "n={n} t={t}: {got} vs {}", law.second_moment());
        }
    }

    #[test]
    fn grid_steps_snap_and_split() {
        assert_eq!(grid_steps(4, 1.0), (4, 0.0));
        assert_eq!(grid_steps(10, 0.3), (3, 0.0));
        let (k, f) = grid_steps(4, 0.6);
        assert_eq!(k, 2);
        assert!((f - 0.1f64).abs() < 1e-15);
    }

    #[test]
    fn coarse_increments_are_pairwise_sums() {
        let fine = BrownianSlice::<f64>::generate(16, 0.9, 2, &mut RngStream::new(3, 1).normals());
        let coarse = fine.coarsen(8).unwrap();
        assert_eq!(coarse.full_steps, 7);
        for j in 0..7 {
            for c in 0..2 {
                let s = fine.increments[(2 * j) * 2 + c] + fine.increments[(2 * j + 1) * 2 + c];
                assert_eq!(s.to_bits(), coarse.increments[j * 2 + c].to_bits());
            }
        }
        let (mut bf, mut bc) = ([0.0; 2], [0.0; 2]);
        fine.terminal(&mut bf);
        coarse.terminal(&mut bc);
        assert!((bf[0] - bc[0]).abs() < 1e-14);
        assert!(fine.coarsen(5).is_err());
    }

    #[test]
    fn single_step_scheme() {
        let m = make_ou_model(2.0, 0.5).unwrap();
        let rng = RngStream::new(1, 2);
        let e = simulate_euler(&m, &[1.0], 1, 1.0, rng).unwrap();
        let z = rng.normals().next_normal();
        assert!((e.value[0] - (1.0 - 2.0 + 0.5 * z)).abs() < 1e-15);
    }

    #[test]
    fn partial_step_uses_frozen_coefficients() {
        let m = make_gbm_model(0.1, 0.2).unwrap();
        let rng = RngStream::new(5, 0);
        let e = simulate_euler(&m, &[1.0], 2, 0.7, rng).unwrap();
        let mut src = rng.normals();
        let (z0, z1) = (src.next_normal(), src.next_normal());
        let x1 = 1.0 + 0.1 * 0.5 + 0.2 * 0.5f64.sqrt() * z0;
        let x2 = x1 + 0.1 * x1 * 0.2 + 0.2 * x1 * 0.2f64.sqrt() * z1;
        assert!((e.value[0] - x2).abs() < 1e-14);
    }

    #[test]
    fn blowup_is_reported_with_step() {
        let m = SdeModel::new("explode", 1, 1, |x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0] * 1e300, |_, o: &mut [f64]| o[0] = 1.0);
        let err = simulate_euler(&m, &[10.0], 4, 1.0, RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::SimulationBlowup { .. }));
    }

    #[test]
    fn coupled_constant_model_endpoints_agree() {
        let m = make_constant_model(vec![0.3f64], Matrix::diag(&[0.7])).unwrap();
        let (c, f) = simulate_coupled(&m, &[0.1], 8, 1.0, RngStream::new(2, 2)).unwrap();
        assert!((c.value[0] - f.value[0]).abs() < 1e-14);
    }

    #[test]
    fn affine_law_examples() {
        let ou = make_ou_model(1.0f64, 1.0).unwrap();
        let law = euler_exact_law_affine(&ou, &[1.0], 4, 1.0).unwrap();
        assert!((law.mean[0] - 0.316_406_25).abs() < 1e-15);
        let expected = 0.25 * (1.0 + 0.5625 + 0.316_406_25 + 0.177_978_515_625);
        assert!((law.cov[(0, 0)] - expected).abs() < 1e-15);
        let cst = make_constant_model(vec![0.4f64, -0.1], Matrix::from_rows(&[vec![1.0, 0.2], vec![0.0, 0.5]]).unwrap()).unwrap();
        let euler = euler_exact_law_affine(&cst, &[0.3, 0.2], 7, 0.8).unwrap();
        let exact = cst.exact_density().unwrap().law(0.8, &[0.3, 0.2]).unwrap();
        for i in 0..2 {
            assert!((euler.mean[i] - exact.mean[i]).abs() < 1e-15);
        }
        assert!(euler.cov.max_abs_diff(&exact.cov) < 1e-15);
        assert!(matches!(euler_exact_law_affine(&make_gbm_model(0.1, 0.2).unwrap(), &[1.0], 4, 1.0), Err(Error::NotAffine(_))));
    }

    #[test]
    fn moment_order_checked() {
        let m = make_ou_model(1.0, 1.0).unwrap();
        assert!(empirical_moment(&m, &[0.0], 4, 1.0, 3, 10, RngStream::new(0, 0)).is_err());
    }
}
