//! SDE models, their coefficient jets, and exact transition-density oracles.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::functions::TestFunction;
use crate::gaussian::{hermite_1d, AffineGaussianMap, GaussianLaw};
use crate::linalg::Matrix;
use crate::multiindex::{binomial, MultiIndex};
use crate::quadrature::{self, Chart, GhPolicy, QuadResult};
use crate::real::Real;
use crate::special::stirling_first_kind;

pub type CoefFn<T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync>;
/// `(α, x, out)`: writes `∂^α` of every component of a coefficient.
pub type DerivFn<T> = Arc<dyn Fn(&MultiIndex, &[T], &mut [T]) + Send + Sync>;
/// `(t, x, B_t, out)`: exact strong solution as a function of the terminal
/// Brownian value.
pub type StrongFn<T> = Arc<dyn Fn(T, &[T], &[T], &mut [T]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AssumptionFlags {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

/// Drift `M x + c` with constant diffusion `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStructure<T> {
    pub m: Matrix<T>,
    pub c: Vec<T>,
    pub sigma: Matrix<T>,
}

pub trait TransitionDensity<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// `∂_x^α ∂_y^β p(t, x, y)`.
    fn density_derivs(&self, alpha: &MultiIndex, beta: &MultiIndex, t: T, x: &[T], y: &[T]) -> T;

    fn density(&self, t: T, x: &[T], y: &[T]) -> T {
        let z = MultiIndex::zero(self.dim());
        self.density_derivs(&z, &z, t, x, y)
    }

    fn law(&self, _t: T, _x: &[T]) -> Option<GaussianLaw<T>> {
        None
    }

    /// Chart standardizing `y ↦ p(t, x, y)`.
    fn forward_chart(&self, t: T, x: &[T]) -> Chart<T>;

    /// Chart concentrating `z ↦ p(t, z, y)`.
    fn backward_chart(&self, t: T, y: &[T]) -> Chart<T>;
}

/// Gaussian transitions `y ~ N(E(t) x + c(t), V(t))`.
pub struct AffineGaussianDensity<T> {
    d: usize,
    kernel: Arc<dyn Fn(T) -> AffineGaussianMap<T> + Send + Sync>,
}

impl<T: Real> AffineGaussianDensity<T> {
    pub fn new(d: usize, kernel: impl Fn(T) -> AffineGaussianMap<T> + Send + Sync + 'static) -> Self {
        Self { d, kernel: Arc::new(kernel) }
    }

    pub fn kernel(&self, t: T) -> AffineGaussianMap<T> {
        (self.kernel)(t)
    }
}

impl<T: Real> TransitionDensity<T> for AffineGaussianDensity<T> {
    fn dim(&self) -> usize {
        self.d
    }

    fn density_derivs(&self, alpha: &MultiIndex, beta: &MultiIndex, t: T, x: &[T], y: &[T]) -> T {
        self.kernel(t).derivative(alpha, beta, x, y)
    }

    fn law(&self, t: T, x: &[T]) -> Option<GaussianLaw<T>> {
        Some(self.kernel(t).law(x))
    }

    fn forward_chart(&self, t: T, x: &[T]) -> Chart<T> {
        self.kernel(t).forward_chart(x)
    }

    fn backward_chart(&self, t: T, y: &[T]) -> Chart<T> {
        self.kernel(t).backward_chart(y).expect("invertible affine flow")
    }
}

/// One-dimensional lognormal transitions of `dS = μ S dt + σ S dB`.
#[derive(Debug, Clone)]
pub struct LognormalDensity<T> {
    pub mu: T,
    pub sigma: T,
}

impl<T: Real> LognormalDensity<T> {
    fn log_drift(&self) -> T {
        self.mu - T::lit(0.5) * self.sigma * self.sigma
    }
}

impl<T: Real> TransitionDensity<T> for LognormalDensity<T> {
    fn dim(&self) -> usize {
        1
    }

    fn density_derivs(&self, alpha: &MultiIndex, beta: &MultiIndex, t: T, x: &[T], y: &[T]) -> T {
        let (x, y) = (x[0], y[0]);
        if x <= T::zero() || y <= T::zero() {
            return T::zero();
        }
        let (a, b) = (alpha.get(0) as usize, beta.get(0) as usize);
        let var = self.sigma * self.sigma * t;
        let p = T::one() / var;
        let u = y.ln() - x.ln() - self.log_drift() * t;
        let phi = (-T::lit(0.5) * p * u * u).exp() / (T::lit(2.0) * T::PI() * var).sqrt();
        // ∂^m g(u) = (−1)^m H_m(u) φ(u)
        let g = |m: usize| {
            let s = if m.is_multiple_of(2) { T::one() } else { -T::one() };
            s * hermite_1d(p * u, p, m) * phi
        };
        // p = e^{−W} g(W − L − mt) with L = ln x, W = ln y, then convert
        // log-derivatives with Stirling numbers of the first kind.
        let sa = stirling_first_kind(a);
        let sb = stirling_first_kind(b);
        let mut acc = T::zero();
        for (j, &sj) in sa.iter().enumerate() {
            if sj == 0.0 {
                continue;
            }
            for (k, &sk) in sb.iter().enumerate() {
                if sk == 0.0 {
                    continue;
                }
                // ∂_L^j ∂_W^k [e^{−W} g(u)] = (−1)^j Σ_i C(k,i) (−1)^{k−i} e^{−W} g^{(j+i)}(u)
                let mut inner = T::zero();
                for i in 0..=k {
                    let sgn = if (k - i) % 2 == 0 { 1.0 } else { -1.0 };
                    inner += T::lit(binomial(k as u32, i as u32) * sgn) * g(j + i);
                }
                let sj_sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                acc += T::lit(sj * sk * sj_sign) * inner;
            }
        }
        acc / (y * x.powi(a as i32) * y.powi(b as i32))
    }

    fn forward_chart(&self, t: T, x: &[T]) -> Chart<T> {
        Chart::Log { center: vec![x[0].ln() + self.log_drift() * t], factor: Matrix::diag(&[self.sigma * t.sqrt()]) }
    }

    fn backward_chart(&self, t: T, y: &[T]) -> Chart<T> {
        Chart::Log { center: vec![y[0].ln() - self.log_drift() * t], factor: Matrix::diag(&[self.sigma * t.sqrt()]) }
    }
}

/// Values and first two derivatives of `b` and `a = σσ*` at a point.
///
/// Layout (row-major): `db[i·d + k] = ∂_k b_i`, `d2b[(i·d + k)·d + l]`,
/// `a[i·d + j]`, `da[(i·d + j)·d + k]`, `d2a[((i·d + j)·d + k)·d + l]`.
#[derive(Debug, Clone)]
pub struct CoefficientJet<T> {
    pub d: usize,
    pub b: Vec<T>,
    pub db: Vec<T>,
    pub d2b: Vec<T>,
    pub a: Vec<T>,
    pub da: Vec<T>,
    pub d2a: Vec<T>,
}

#[derive(Clone)]
pub struct SdeModel<T> {
    pub name: String,
    dim_d: usize,
    dim_r: usize,
    drift: CoefFn<T>,
    diffusion: CoefFn<T>,
    drift_derivs: Option<DerivFn<T>>,
    cov_derivs: Option<DerivFn<T>>,
    pub flags: AssumptionFlags,
    pub eta: Option<T>,
    exact_density: Option<Arc<dyn TransitionDensity<T>>>,
    affine: Option<AffineStructure<T>>,
    strong: Option<StrongFn<T>>,
    constant: bool,
}

impl<T: Real> fmt::Debug for SdeModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("d", &self.dim_d)
            .field("r", &self.dim_r)
            .field("flags", &self.flags)
            .field("eta", &self.eta)
            .finish()
    }
}

impl<T: Real> SdeModel<T> {
    pub fn new(
        name: &str,
        dim_d: usize,
        dim_r: usize,
        drift: impl Fn(&[T], &mut [T]) + Send + Sync + 'static,
        diffusion: impl Fn(&[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim_d,
            dim_r,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            drift_derivs: None,
            cov_derivs: None,
            flags: AssumptionFlags { a: true, b: false, c: false },
            eta: None,
            exact_density: None,
            affine: None,
            strong: None,
            constant: false,
        }
    }

    pub fn with_drift_derivs(mut self, f: impl Fn(&MultiIndex, &[T], &mut [T]) + Send + Sync + 'static) -> Self {
        self.drift_derivs = Some(Arc::new(f));
        self
    }

    pub fn with_cov_derivs(mut self, f: impl Fn(&MultiIndex, &[T], &mut [T]) + Send + Sync + 'static) -> Self {
        self.cov_derivs = Some(Arc::new(f));
        self
    }

    pub fn with_flags(mut self, flags: AssumptionFlags, eta: Option<T>) -> Self {
        self.flags = flags;
        self.eta = eta;
        self
    }

    pub fn with_density(mut self, density: impl TransitionDensity<T> + 'static) -> Self {
        self.exact_density = Some(Arc::new(density));
        self
    }

    pub fn with_affine(mut self, affine: AffineStructure<T>) -> Self {
        self.constant = affine.m.as_slice().iter().all(|&v| v == T::zero());
        self.affine = Some(affine);
        self
    }

    pub fn with_strong_solution(mut self, f: impl Fn(T, &[T], &[T], &mut [T]) + Send + Sync + 'static) -> Self {
        self.strong = Some(Arc::new(f));
        self
    }

    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    pub fn dim_r(&self) -> usize {
        self.dim_r
    }

    #[inline]
    pub fn drift(&self, x: &[T], out: &mut [T]) {
        (self.drift)(x, out)
    }

    /// Writes `σ(x)` row-major (`d × r`).
    #[inline]
    pub fn diffusion(&self, x: &[T], out: &mut [T]) {
        (self.diffusion)(x, out)
    }

    /// `a(x) = σσ*(x)`, row-major `d × d`.
    pub fn cov(&self, x: &[T], out: &mut [T]) {
        let (d, r) = (self.dim_d, self.dim_r);
        let mut s = vec![T::zero(); d * r];
        self.diffusion(x, &mut s);
        for i in 0..d {
            for j in 0..d {
                let mut v = T::zero();
                for k in 0..r {
                    v += s[i * r + k] * s[j * r + k];
                }
                out[i * d + j] = v;
            }
        }
    }

    pub fn exact_density(&self) -> Option<&dyn TransitionDensity<T>> {
        self.exact_density.as_deref()
    }

    pub fn require_density(&self) -> Result<&dyn TransitionDensity<T>> {
        self.exact_density().ok_or_else(|| Error::MissingOracle(format!("{} has no exact transition density", self.name)))
    }

    pub fn affine(&self) -> Option<&AffineStructure<T>> {
        self.affine.as_ref()
    }

    pub fn strong_solution(&self) -> Option<&StrongFn<T>> {
        self.strong.as_ref()
    }

    /// Constant drift and diffusion: the Euler scheme is exact in law.
    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn has_derivative_oracles(&self) -> bool {
        self.drift_derivs.is_some() && self.cov_derivs.is_some()
    }

    /// Coefficient jet from the derivative oracles, or from fourth-order
    /// central differences with step `max(1e-4, 1e-4·|z_i|)` when absent.
    pub fn jet(&self, z: &[T]) -> CoefficientJet<T> {
        let d = self.dim_d;
        let mut b = vec![T::zero(); d];
        let mut a = vec![T::zero(); d * d];
        self.drift(z, &mut b);
        self.cov(z, &mut a);
        let mut jet = CoefficientJet {
            d,
            b,
            db: vec![T::zero(); d * d],
            d2b: vec![T::zero(); d * d * d],
            a,
            da: vec![T::zero(); d * d * d],
            d2a: vec![T::zero(); d * d * d * d],
        };
        let drift_eval = |x: &[T], out: &mut [T]| self.drift(x, out);
        let cov_eval = |x: &[T], out: &mut [T]| self.cov(x, out);
        fill_derivs(z, d, d, self.drift_derivs.as_deref(), &drift_eval, &mut jet.db, &mut jet.d2b);
        fill_derivs(z, d, d * d, self.cov_derivs.as_deref(), &cov_eval, &mut jet.da, &mut jet.d2a);
        jet
    }

    /// Largest relative disagreement between the derivative oracles and
    /// finite differences over the probes.
    pub fn check_derivative_oracles(&self, probes: &[Vec<T>]) -> Result<T> {
        if !self.has_derivative_oracles() {
            return Err(Error::MissingOracle(format!("{} has no derivative oracles", self.name)));
        }
        let stripped = Self { drift_derivs: None, cov_derivs: None, ..self.clone() };
        let mut worst = T::zero();
        for z in probes {
            let (j1, j2) = (self.jet(z), stripped.jet(z));
            let pairs = [(&j1.db, &j2.db), (&j1.d2b, &j2.d2b), (&j1.da, &j2.da), (&j1.d2a, &j2.d2a)];
            for (u, v) in pairs {
                for (&p, &q) in u.iter().zip(v.iter()) {
                    worst = worst.max((p - q).abs() / (T::one() + p.abs()));
                }
            }
        }
        Ok(worst)
    }

    /// Smallest `ξ*a(x)ξ` over the probe points and unit directions.
    pub fn min_ellipticity(&self, points: &[Vec<T>]) -> T {
        let d = self.dim_d;
        let mut a = vec![T::zero(); d * d];
        let mut worst = T::infinity();
        for x in points {
            self.cov(x, &mut a);
            let m = Matrix::from_row_major(d, d, a.clone());
            worst = worst.min(m.min_symmetric_eigenvalue());
        }
        worst
    }
}

fn fd_step<T: Real>(x: T) -> T {
    T::lit(1e-4).max(T::lit(1e-4) * x.abs())
}

/// Fills first and second derivatives of a `width`-valued coefficient.
fn fill_derivs<T: Real>(
    z: &[T],
    d: usize,
    width: usize,
    oracle: Option<&(dyn Fn(&MultiIndex, &[T], &mut [T]) + Send + Sync)>,
    eval: &dyn Fn(&[T], &mut [T]),
    first: &mut [T],
    second: &mut [T],
) {
    let mut buf = vec![T::zero(); width];
    match oracle {
        Some(f) => {
            for k in 0..d {
                f(&MultiIndex::unit(d, k), z, &mut buf);
                for c in 0..width {
                    first[c * d + k] = buf[c];
                }
                for l in k..d {
                    f(&MultiIndex::unit(d, k).increment(l), z, &mut buf);
                    for c in 0..width {
                        second[(c * d + k) * d + l] = buf[c];
                        second[(c * d + l) * d + k] = buf[c];
                    }
                }
            }
        }
        None => {
            let mut x = z.to_vec();
            let mut acc = vec![T::zero(); width];
            let stencil = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];
            for k in 0..d {
                let hk = fd_step(z[k]);
                acc.iter_mut().for_each(|v| *v = T::zero());
                for &(s, w) in &stencil {
                    x[k] = z[k] + T::lit(s) * hk;
                    eval(&x, &mut buf);
                    for c in 0..width {
                        acc[c] += T::lit(w) * buf[c];
                    }
                }
                x[k] = z[k];
                for c in 0..width {
                    first[c * d + k] = acc[c] / (T::lit(12.0) * hk);
                }
                // pure second derivative
                let pure = [(-2.0, -1.0), (-1.0, 16.0), (0.0, -30.0), (1.0, 16.0), (2.0, -1.0)];
                acc.iter_mut().for_each(|v| *v = T::zero());
                for &(s, w) in &pure {
                    x[k] = z[k] + T::lit(s) * hk;
                    eval(&x, &mut buf);
                    for c in 0..width {
                        acc[c] += T::lit(w) * buf[c];
                    }
                }
                x[k] = z[k];
                for c in 0..width {
                    second[(c * d + k) * d + k] = acc[c] / (T::lit(12.0) * hk * hk);
                }
                for l in (k + 1)..d {
                    let hl = fd_step(z[l]);
                    acc.iter_mut().for_each(|v| *v = T::zero());
                    for &(s, ws) in &stencil {
                        for &(u, wu) in &stencil {
                            x[k] = z[k] + T::lit(s) * hk;
                            x[l] = z[l] + T::lit(u) * hl;
                            eval(&x, &mut buf);
                            for c in 0..width {
                                acc[c] += T::lit(ws * wu) * buf[c];
                            }
                        }
                    }
                    x[k] = z[k];
                    x[l] = z[l];
                    for c in 0..width {
                        let v = acc[c] / (T::lit(144.0) * hk * hl);
                        second[(c * d + k) * d + l] = v;
                        second[(c * d + l) * d + k] = v;
                    }
                }
            }
        }
    }
}

/// `dX = b0 dt + s0 dB`.
pub fn make_constant_model<T: Real>(b0: Vec<T>, s0: Matrix<T>) -> Result<SdeModel<T>> {
    let d = b0.len();
    if s0.rows() != d {
        return Err(Error::InvalidParameter("diffusion rows must match drift dimension".into()));
    }
    let r = s0.cols();
    let a = s0.matmul(&s0.transpose());
    let eta = a.min_symmetric_eigenvalue();
    if !(eta > T::zero()) || a.cholesky().is_err() {
        return Err(Error::AssumptionViolation("constant diffusion is not uniformly elliptic".into()));
    }
    let (bd, sd) = (b0.clone(), s0.as_slice().to_vec());
    let (bk, ak) = (b0.clone(), a.clone());
    let (bs, ss) = (b0.clone(), s0.clone());
    let model = SdeModel::new("constant", d, r, move |_, out| out.copy_from_slice(&bd), move |_, out| out.copy_from_slice(&sd))
        .with_drift_derivs(|_, _, out| out.iter_mut().for_each(|v| *v = T::zero()))
        .with_cov_derivs(|_, _, out| out.iter_mut().for_each(|v| *v = T::zero()))
        .with_flags(AssumptionFlags { a: true, b: true, c: true }, Some(eta))
        .with_density(AffineGaussianDensity::new(d, move |t| {
            let c: Vec<T> = bk.iter().map(|&v| v * t).collect();
            AffineGaussianMap::new(Matrix::identity(d), c, ak.scale(t)).expect("positive definite")
        }))
        .with_affine(AffineStructure { m: Matrix::zeros(d, d), c: b0, sigma: s0 })
        .with_strong_solution(move |t, x, bt, out| {
            let sb = ss.matvec(bt);
            for i in 0..out.len() {
                out[i] = x[i] + bs[i] * t + sb[i];
            }
        });
    Ok(model)
}

/// `dX = −θ X dt + σ₀ dB` on the line. Its drift is unbounded, so (B) fails.
pub fn make_ou_model<T: Real>(theta: T, sigma0: T) -> Result<SdeModel<T>> {
    if !(theta > T::zero() && sigma0 > T::zero()) {
        return Err(Error::InvalidParameter(format!("OU needs theta > 0 and sigma > 0, got {theta}, {sigma0}")));
    }
    let s2 = sigma0 * sigma0;
    let model = SdeModel::new("ou", 1, 1, move |x, out| out[0] = -theta * x[0], move |_, out| out[0] = sigma0)
        .with_drift_derivs(move |alpha, _, out| out[0] = if alpha.order() == 1 { -theta } else { T::zero() })
        .with_cov_derivs(|_, _, out| out[0] = T::zero())
        .with_flags(AssumptionFlags { a: true, b: false, c: true }, Some(s2))
        .with_density(AffineGaussianDensity::new(1, move |t| {
            let e = (-theta * t).exp();
            let v = s2 * (T::one() - (-T::lit(2.0) * theta * t).exp()) / (T::lit(2.0) * theta);
            AffineGaussianMap::new(Matrix::diag(&[e]), vec![T::zero()], Matrix::diag(&[v])).expect("positive variance")
        }))
        .with_affine(AffineStructure { m: Matrix::diag(&[-theta]), c: vec![T::zero()], sigma: Matrix::diag(&[sigma0]) });
    Ok(model)
}

/// `dS = μ S dt + σ₀ S dB` in natural coordinates on the positive half-line.
/// Conditions (B) and (C) hold only after the log transform.
pub fn make_gbm_model<T: Real>(mu: T, sigma0: T) -> Result<SdeModel<T>> {
    if !(sigma0 > T::zero()) || !mu.is_finite() {
        return Err(Error::InvalidParameter(format!("GBM needs sigma > 0, got {sigma0}")));
    }
    let s2 = sigma0 * sigma0;
    let model = SdeModel::new("gbm", 1, 1, move |x, out| out[0] = mu * x[0], move |x, out| out[0] = sigma0 * x[0])
        .with_drift_derivs(move |alpha, _, out| out[0] = if alpha.order() == 1 { mu } else { T::zero() })
        .with_cov_derivs(move |alpha, x, out| {
            out[0] = match alpha.order() {
                1 => T::lit(2.0) * s2 * x[0],
                2 => T::lit(2.0) * s2,
                _ => s2 * x[0] * x[0],
            }
        })
        .with_flags(AssumptionFlags { a: true, b: false, c: false }, None)
        .with_density(LognormalDensity { mu, sigma: sigma0 })
        .with_strong_solution(move |t, x, bt, out| {
            out[0] = x[0] * ((mu - T::lit(0.5) * s2) * t + sigma0 * bt[0]).exp()
        });
    Ok(model)
}

/// Log-coordinate coefficients of a GBM: `b = μ − σ₀²/2`, `σ = σ₀`.
pub fn gbm_log_coefficients<T: Real>(mu: T, sigma0: T) -> (T, T) {
    (mu - T::lit(0.5) * sigma0 * sigma0, sigma0)
}

/// Black–Scholes under zero rates, in log coordinates.
pub fn make_black_scholes_log_model<T: Real>(sigma0: T) -> Result<SdeModel<T>> {
    if !(sigma0 > T::zero()) {
        return Err(Error::InvalidParameter(format!("volatility must be positive, got {sigma0}")));
    }
    let (b, s) = gbm_log_coefficients(T::zero(), sigma0);
    let mut m = make_constant_model(vec![b], Matrix::diag(&[s]))?;
    m.name = "black-scholes".into();
    Ok(m)
}

/// Log-price model with `σ(x) = b0 + c0 tanh x` and `b(x) = a0 − σ(x)²/2`.
pub fn make_bounded_vol_model<T: Real>(a0: T, b0: T, c0: T) -> Result<SdeModel<T>> {
    if !(b0 > c0.abs()) || !a0.is_finite() {
        return Err(Error::InvalidParameter(format!("bounded vol needs b0 > |c0|, got b0={b0}, c0={c0}")));
    }
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    // (σ, σ′, σ″)
    let vol = move |x: T| {
        let th = x.tanh();
        let sech2 = T::one() - th * th;
        (b0 + c0 * th, c0 * sech2, -two * c0 * th * sech2)
    };
    let mut model = SdeModel::new(
        "bounded-vol",
        1,
        1,
        move |x, out| {
            let s = vol(x[0]).0;
            out[0] = a0 - half * s * s
        },
        move |x, out| out[0] = vol(x[0]).0,
    )
    .with_drift_derivs(move |alpha, x, out| {
        let (s, s1, s2) = vol(x[0]);
        out[0] = match alpha.order() {
            1 => -s * s1,
            2 => -(s1 * s1 + s * s2),
            _ => a0 - half * s * s,
        }
    })
    .with_cov_derivs(move |alpha, x, out| {
        let (s, s1, s2) = vol(x[0]);
        out[0] = match alpha.order() {
            1 => two * s * s1,
            2 => two * (s1 * s1 + s * s2),
            _ => s * s,
        }
    })
    .with_flags(AssumptionFlags { a: true, b: true, c: true }, Some((b0 - c0.abs()) * (b0 - c0.abs())));
    if c0 == T::zero() {
        let b = a0 - half * b0 * b0;
        let exact = make_constant_model(vec![b], Matrix::diag(&[b0]))?;
        model.exact_density = exact.exact_density.clone();
        model.affine = exact.affine.clone();
        model.strong = exact.strong.clone();
        model.constant = true;
    }
    Ok(model)
}

/// `P_t f(x) = E f(X_t^x)` from the exact density.
pub fn semigroup_apply<T: Real>(model: &SdeModel<T>, t: T, f: &TestFunction<T>, x: &[T]) -> Result<QuadResult<T>> {
    let density = model.require_density()?;
    if let Some((y, beta)) = f.dirac_data() {
        let alpha = MultiIndex::zero(x.len());
        let v = density.density_derivs(&alpha, &beta, t, x, y);
        return Ok(QuadResult::exact(T::lit(beta.sign()) * v));
    }
    let eval = f.evaluator()?;
    let chart = density.forward_chart(t, x);
    let r = if x.len() == 1 && !f.breakpoints.is_empty() {
        quadrature::expect_piecewise_1d(&chart, &f.breakpoints, GhPolicy::default(), |z| eval(&[z]))
    } else {
        quadrature::expect(&chart, GhPolicy::default(), |z| eval(z))
    };
    if !r.converged {
        return Err(Error::Unconverged { what: "semigroup quadrature".into(), error: r.error.as_f64(), tolerance: GhPolicy::<f64>::default().rtol });
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;
    use crate::special::normal_pdf;

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn brownian_motion_density_is_standard_normal() {
        let m = make_constant_model(vec![0.0], Matrix::identity(1)).unwrap();
        let p = m.exact_density().unwrap();
        for y in [-1.3, 0.0, 0.4] {
            assert!((p.density(1.0, &[0.0], &[y]) - normal_pdf(y)).abs() < 1e-15);
        }
        let law = make_constant_model(vec![1.0], Matrix::identity(1)).unwrap().exact_density().unwrap().law(1.0, &[0.0]).unwrap();
        assert_eq!(law.mean, vec![1.0]);
        assert_eq!(law.cov, Matrix::identity(1));
    }

    #[test]
    fn constant_model_rejects_singular_diffusion() {
        let s = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(matches!(make_constant_model(vec![0.0, 0.0], s), Err(Error::AssumptionViolation(_))));
    }

    #[test]
    fn ou_law_and_variance() {
        let m = make_ou_model(1.0, 1.0).unwrap();
        let law = m.exact_density().unwrap().law(1.0, &[2.0]).unwrap();
        assert!((law.mean[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((law.cov[(0, 0)] - 0.432_332_358_381_693_6).abs() < 1e-12);
        assert!(make_ou_model(0.0, 1.0).is_err());
    }

    #[test]
    fn ou_density_derivative_matches_finite_difference() {
        let m = make_ou_model(1.0, 1.0).unwrap();
        let p = m.exact_density().unwrap();
        let z = MultiIndex::zero(1);
        let one = MultiIndex::unit(1, 0);
        let analytic = p.density_derivs(&z, &one, 1.0, &[0.0], &[0.5]);
        let numeric = fd(|y| p.density(1.0, &[0.0], &[y]), 0.5, 1e-3);
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn lognormal_derivatives_match_finite_differences() {
        let p = LognormalDensity { mu: 0.1, sigma: 0.3 };
        let (t, x, y) = (0.7, 1.1, 1.3);
        for a in 0..3u32 {
            for b in 0..3u32 {
                let (ai, bi) = (MultiIndex::from_slice(&[a]), MultiIndex::from_slice(&[b]));
                let dy = p.density_derivs(&ai, &MultiIndex::from_slice(&[b + 1]), t, &[x], &[y]);
                let ny = fd(|v| p.density_derivs(&ai, &bi, t, &[x], &[v]), y, 1e-4);
                assert!((dy - ny).abs() < 1e-6 * (1.0 + dy.abs()), "a={a} b={b}: {dy} vs {ny}");
                let dx = p.density_derivs(&MultiIndex::from_slice(&[a + 1]), &bi, t, &[x], &[y]);
                let nx = fd(|v| p.density_derivs(&ai, &bi, t, &[v], &[y]), x, 1e-4);
                assert!((dx - nx).abs() < 1e-6 * (1.0 + dx.abs()), "a={a} b={b}: {dx} vs {nx}");
            }
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let models = [
            make_constant_model(vec![0.3f64], Matrix::diag(&[0.8])).unwrap(),
            make_ou_model(1.0, 1.0).unwrap(),
            make_gbm_model(0.1, 0.2).unwrap(),
        ];
        for m in &models {
            let p = m.exact_density().unwrap();
            for t in [0.1, 0.5, 1.0] {
                for x in [0.5, 1.0, 2.0] {
                    let chart = p.forward_chart(t, &[x]);
                    let r = integrate(&chart, GhPolicy::default(), |y| p.density(t, &[x], y));
                    assert!((r.value - 1.0).abs() < 1e-8, "{} t={t} x={x}: {}", m.name, r.value);
                }
            }
        }
    }

    #[test]
    fn chapman_kolmogorov_for_ou() {
        let m = make_ou_model(0.7f64, 1.2).unwrap();
        let p = m.exact_density().unwrap();
        let (s, t, x, y) = (0.3, 1.0, 0.4, -0.2);
        let chart = p.forward_chart(s, &[x]);
        let r = quadrature::expect(&chart, GhPolicy::default(), |z| p.density(t - s, z, &[y]));
        assert!((r.value - p.density(t, &[x], &[y])).abs() < 1e-12);
    }

    #[test]
    fn semigroup_examples() {
        let bm = make_constant_model(vec![0.0f64], Matrix::identity(1)).unwrap();
        let v = semigroup_apply(&bm, 1.0, &TestFunction::power(2), &[0.0]).unwrap().value;
        assert!((v - 1.0).abs() < 1e-12);
        let ou = make_ou_model(1.0, 1.0).unwrap();
        let v = semigroup_apply(&ou, 1.0, &TestFunction::dirac(vec![0.0]), &[0.0]).unwrap().value;
        let var = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI * var).sqrt()).abs() < 1e-14);
        assert!((v - 0.606_738).abs() < 1e-6);
        let gbm = make_gbm_model(0.1, 1.0).unwrap();
        for s in [0.5, 1.0, 3.0] {
            let v = semigroup_apply(&gbm, 1.0, &TestFunction::identity(), &[s]).unwrap().value;
            assert!((v - s * 0.1f64.exp()).abs() < 1e-9 * s);
        }
        let v = semigroup_apply(&make_gbm_model(0.0f64, 0.3).unwrap(), 0.6, &TestFunction::identity(), &[2.0]).unwrap().value;
        assert!((v - 2.0).abs() < 1e-10);
    }

    #[test]
    fn semigroup_of_exp_abs_on_brownian_motion() {
        let bm = make_constant_model(vec![0.0], Matrix::identity(1)).unwrap();
        let v = semigroup_apply(&bm, 1.0, &TestFunction::exp_abs(), &[0.0]).unwrap().value;
        let exact = 2.0 * 0.5f64.exp() * crate::special::normal_cdf(1.0);
        assert!((v - exact).abs() < 1e-10);
    }

    #[test]
    fn dirac_derivative_pairing_sign() {
        let ou = make_ou_model(1.0, 1.0).unwrap();
        let p = ou.exact_density().unwrap();
        let f = TestFunction::dirac_deriv(vec![0.3], MultiIndex::unit(1, 0)).unwrap();
        let v = semigroup_apply(&ou, 1.0, &f, &[1.0]).unwrap().value;
        let numeric = fd(|y| p.density(1.0, &[1.0], &[y]), 0.3, 1e-3);
        assert!((v + numeric).abs() < 1e-9);
    }

    #[test]
    fn missing_density_is_reported() {
        let m = make_bounded_vol_model(0.0, 0.4, 0.3).unwrap();
        assert!(matches!(semigroup_apply(&m, 1.0, &TestFunction::identity(), &[0.0]), Err(Error::MissingOracle(_))));
    }

    #[test]
    fn derivative_oracles_agree_with_finite_differences() {
        let probes: Vec<Vec<f64>> = (-6..=6).map(|k| vec![k as f64 * 0.37]).collect();
        for m in [
            make_bounded_vol_model(0.05, 0.4, 0.3).unwrap(),
            make_gbm_model(0.1, 0.2).unwrap(),
            make_ou_model(1.5, 0.5).unwrap(),
        ] {
            assert!(m.check_derivative_oracles(&probes).unwrap() < 1e-6, "{}", m.name);
        }
    }

    #[test]
    fn finite_difference_jet_in_two_dimensions() {
        let m = SdeModel::new(
            "toy",
            2,
            2,
            |x: &[f64], out: &mut [f64]| {
                out[0] = x[0].sin() * x[1];
                out[1] = x[0] * x[0];
            },
            |x: &[f64], out: &mut [f64]| {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[0] = 1.0 + 0.1 * x[1].cos();
                out[3] = 1.0;
            },
        );
        let z = [0.3, -0.7];
        let j = m.jet(&z);
        // ∂_0 ∂_1 b_0 = cos x0
        assert!((j.d2b[1] - 0.3f64.cos()).abs() < 1e-6);
        assert!((j.d2b[4] - 2.0).abs() < 1e-6);
        // a_00 = (1 + 0.1 cos x1)^2, ∂_1 a_00 = −0.2 sin x1 (1 + 0.1 cos x1)
        let expected = -0.2 * (-0.7f64).sin() * (1.0 + 0.1 * (-0.7f64).cos());
        assert!((j.da[1] - expected).abs() < 1e-8);
    }

    #[test]
    fn bounded_vol_properties() {
        let m = make_bounded_vol_model(0.0, 0.4, 0.3).unwrap();
        let mut s = [0.0];
        m.diffusion(&[0.0], &mut s);
        assert_eq!(s[0], 0.4);
        let grid: Vec<Vec<f64>> = (-50..=50).map(|k| vec![k as f64 * 0.2]).collect();
        assert!(m.min_ellipticity(&grid) >= m.eta.unwrap() - 1e-15);
        assert!(make_bounded_vol_model(0.0, 0.3, 0.3).is_err());
        assert!(make_bounded_vol_model(0.0, 0.4, 0.0).unwrap().is_constant());
    }

    #[test]
    fn gbm_log_coefficients_example() {
        let (b, s) = gbm_log_coefficients(0.1f64, 0.2);
        assert!((b - 0.08).abs() < 1e-15);
        assert_eq!(s, 0.2);
    }

    #[test]
    fn works_in_single_precision() {
        let m = make_ou_model(1.0f32, 1.0f32).unwrap();
        let v = m.exact_density().unwrap().density(1.0, &[0.0], &[0.0]);
        assert!((v - 0.606_738f32).abs() < 1e-5);
    }
}
