//! The principal error operator `L₂*`, the coefficient `C_t` of the `1/n`
//! term, the density kernel `π`, and Gaussian-tail certificates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::euler::euler_exact_kernel_affine;
use crate::functions::TestFunction;
use crate::models::{SdeModel, TransitionDensity};
use crate::multiindex::MultiIndex;
use crate::quadrature::{self, adaptive_gauss_legendre, Chart, GhPolicy, QuadResult};
use crate::real::Real;

const TIME_MAX_DEPTH: u32 = 14;

/// A function with derivative oracles up to the order `L₂*` needs.
pub trait Target<T> {
    /// `∂^γ g(z)`, or `None` when that order is unavailable.
    fn derivative(&self, gamma: &MultiIndex, z: &[T]) -> Option<T>;
}

impl<T, F> Target<T> for F
where
    F: Fn(&MultiIndex, &[T]) -> Option<T>,
{
    fn derivative(&self, gamma: &MultiIndex, z: &[T]) -> Option<T> {
        self(gamma, z)
    }
}

/// One-dimensional polynomial `Σ c_k z^k` with exact derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial<T> {
    pub coeffs: Vec<T>,
}

impl<T: Real> Target<T> for Polynomial<T> {
    fn derivative(&self, gamma: &MultiIndex, z: &[T]) -> Option<T> {
        if gamma.dim() != 1 || z.len() != 1 {
            return None;
        }
        let m = gamma.get(0) as usize;
        let mut value = T::zero();
        for (k, &c) in self.coeffs.iter().enumerate().skip(m).rev() {
            let falling: f64 = ((k - m + 1)..=k).map(|v| v as f64).product();
            value = value * z[0] + c * T::lit(falling);
        }
        Some(value)
    }
}

/// `L₂*` written as `Σ_{1≤|γ|≤3} g*_γ ∂^γ`, with the coefficients assembled
/// from the model's coefficient jet.
pub struct L2Operator<'a, T: Real> {
    model: &'a SdeModel<T>,
    gammas: Vec<MultiIndex>,
    first: Vec<usize>,
    second: Vec<usize>,
    third: Vec<usize>,
}

impl<'a, T: Real> L2Operator<'a, T> {
    pub fn new(model: &'a SdeModel<T>) -> Self {
        let d = model.dim_d();
        let gammas = MultiIndex::all_with_order(d, 1, 3);
        let pos = |m: MultiIndex| gammas.iter().position(|g| *g == m).expect("multi-index of order ≤ 3");
        let mut first = Vec::with_capacity(d);
        let mut second = Vec::with_capacity(d * d);
        let mut third = Vec::with_capacity(d * d * d);
        for i in 0..d {
            let ei = MultiIndex::unit(d, i);
            first.push(pos(ei.clone()));
            for j in 0..d {
                let eij = ei.increment(j);
                second.push(pos(eij.clone()));
                for k in 0..d {
                    third.push(pos(eij.increment(k)));
                }
            }
        }
        Self { model, gammas, first, second, third }
    }

    pub fn gammas(&self) -> &[MultiIndex] {
        &self.gammas
    }

    /// Writes `g*_γ(z)` for every `γ` in [`Self::gammas`].
    pub fn coefficients(&self, z: &[T], out: &mut [T]) {
        let d = self.model.dim_d();
        let jet = self.model.jet(z);
        let half = T::lit(0.5);
        let quarter = T::lit(0.25);
        out.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..d {
            let mut bi = T::zero();
            for k in 0..d {
                bi += jet.b[k] * jet.db[i * d + k];
                for l in 0..d {
                    bi += half * jet.a[k * d + l] * jet.d2b[(i * d + k) * d + l];
                }
            }
            out[self.first[i]] -= bi;
            for j in 0..d {
                let ij = i * d + j;
                let mut aij = T::zero();
                for k in 0..d {
                    aij += half * jet.b[k] * jet.da[ij * d + k];
                    aij += jet.a[j * d + k] * jet.db[i * d + k];
                    for l in 0..d {
                        aij += quarter * jet.a[k * d + l] * jet.d2a[(ij * d + k) * d + l];
                    }
                }
                out[self.second[ij]] -= aij;
                for k in 0..d {
                    let mut kijk = T::zero();
                    for l in 0..d {
                        kijk += jet.a[k * d + l] * jet.da[ij * d + l];
                    }
                    out[self.third[ij * d + k]] -= half * kijk;
                }
            }
        }
    }

    /// `∂^{γ₁} g*_γ(z)` for every `γ₁` of order at most 3 (outer index, in
    /// `MultiIndex::all_with_order(d, 0, 3)` order) and every `γ`.
    ///
    /// Fourth-order central differences with step `1e-2·max(1, |z_i|)`.
    pub fn coefficient_derivatives(&self, z: &[T]) -> Vec<Vec<T>> {
        let d = z.len();
        let m = self.gammas.len();
        let orders = MultiIndex::all_with_order(d, 0, 3);
        let steps: Vec<T> = z.iter().map(|v| T::lit(1e-2) * v.abs().max(T::one())).collect();
        let mut point = z.to_vec();
        let mut buf = vec![T::zero(); m];
        let mut out = Vec::with_capacity(orders.len());
        for g1 in &orders {
            let stencils: Vec<&[(i32, f64)]> = g1.as_slice().iter().map(|&k| stencil(k)).collect();
            let mut acc = vec![T::zero(); m];
            let mut idx = vec![0usize; d];
            loop {
                let mut w = 1.0;
                for i in 0..d {
                    let (off, wi) = stencils[i][idx[i]];
                    w *= wi;
                    point[i] = z[i] + T::lit(off as f64) * steps[i];
                }
                self.coefficients(&point, &mut buf);
                for (a, &b) in acc.iter_mut().zip(&buf) {
                    *a += T::lit(w) * b;
                }
                let mut i = 0;
                while i < d {
                    idx[i] += 1;
                    if idx[i] < stencils[i].len() {
                        break;
                    }
                    idx[i] = 0;
                    i += 1;
                }
                if i == d {
                    break;
                }
            }
            let mut scale = T::one();
            for i in 0..d {
                scale *= steps[i].powi(g1.get(i) as i32);
            }
            acc.iter_mut().for_each(|v| *v /= scale);
            out.push(acc);
        }
        out
    }

    /// `L₂* g(z)`.
    pub fn apply(&self, g: &impl Target<T>, z: &[T]) -> Result<T> {
        let mut coef = vec![T::zero(); self.gammas.len()];
        self.coefficients(z, &mut coef);
        let mut acc = T::zero();
        for (gamma, &c) in self.gammas.iter().zip(&coef) {
            if c == T::zero() {
                continue;
            }
            let dg = g
                .derivative(gamma, z)
                .ok_or_else(|| Error::MissingOracle(format!("derivative {gamma} of the target")))?;
            acc += c * dg;
        }
        Ok(acc)
    }
}

fn stencil(order: u32) -> &'static [(i32, f64)] {
    const S0: [(i32, f64); 1] = [(0, 1.0)];
    const S1: [(i32, f64); 4] = [(-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)];
    const S2: [(i32, f64); 5] =
        [(-2, -1.0 / 12.0), (-1, 16.0 / 12.0), (0, -30.0 / 12.0), (1, 16.0 / 12.0), (2, -1.0 / 12.0)];
    const S3: [(i32, f64); 6] =
        [(-3, 1.0 / 8.0), (-2, -1.0), (-1, 13.0 / 8.0), (1, -13.0 / 8.0), (2, 1.0), (3, -1.0 / 8.0)];
    match order {
        0 => &S0,
        1 => &S1,
        2 => &S2,
        _ => &S3,
    }
}

/// `L₂* g(z)` for a target with derivative oracles up to order 3.
pub fn apply_l2star<T: Real>(model: &SdeModel<T>, g: &impl Target<T>, z: &[T]) -> Result<T> {
    L2Operator::new(model).apply(g, z)
}

/// `∂_x^α ∂_y^β π(t, x, y)` with its quadrature error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiEvaluation<T> {
    pub value: T,
    pub quad_error: T,
    pub converged: bool,
    pub t: T,
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub alpha: MultiIndex,
    pub beta: MultiIndex,
}

impl<T: Real> PiEvaluation<T> {
    pub fn require(self, tol: T) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::Unconverged { what: "principal density".into(), error: self.quad_error.as_f64(), tolerance: tol.as_f64() })
        }
    }
}

fn check_time<T: Real>(t: T, split: T) -> Result<()> {
    if !(t > T::zero() && t <= T::one()) {
        return Err(Error::InvalidParameter(format!("t = {t} outside (0, 1]")));
    }
    if !(split > T::zero() && split < T::one()) {
        return Err(Error::InvalidParameter(format!("split {split} outside (0, 1)")));
    }
    Ok(())
}

fn inner_policy<T: Real>(tol: T) -> GhPolicy<T> {
    GhPolicy::default().with_atol(tol * T::lit(1e-3))
}

/// `∂_x^α ∂_y^β π(t, x, y)` with the time split at `t/2`.
pub fn principal_density_pi<T: Real>(
    model: &SdeModel<T>,
    t: T,
    x: &[T],
    y: &[T],
    alpha: &MultiIndex,
    beta: &MultiIndex,
    tol: T,
) -> Result<PiEvaluation<T>> {
    principal_density_pi_split(model, t, x, y, alpha, beta, tol, T::lit(0.5))
}

/// `∂_x^α ∂_y^β π(t, x, y)` with the time split at `split·t`.
///
/// For `s ≤ split·t` the `γ` derivatives fall on `p(t−s, ·, y)` and the space
/// integral uses the chart of `p(s, x, ·)`. For `s > split·t` they are moved
/// onto `g*_γ p(s, x, ·)` by parts and the chart of `p(t−s, ·, y)` is used.
#[allow(clippy::too_many_arguments)]
pub fn principal_density_pi_split<T: Real>(
    model: &SdeModel<T>,
    t: T,
    x: &[T],
    y: &[T],
    alpha: &MultiIndex,
    beta: &MultiIndex,
    tol: T,
    split: T,
) -> Result<PiEvaluation<T>> {
    check_time(t, split)?;
    let density = model.require_density()?;
    let d = model.dim_d();
    if x.len() != d || y.len() != d || alpha.dim() != d || beta.dim() != d {
        return Err(Error::InvalidParameter("dimension mismatch in principal density".into()));
    }
    if model.is_constant() {
        return Ok(PiEvaluation {
            value: T::zero(),
            quad_error: T::zero(),
            converged: true,
            t,
            x: x.to_vec(),
            y: y.to_vec(),
            alpha: alpha.clone(),
            beta: beta.clone(),
        });
    }
    let op = L2Operator::new(model);
    let gammas = op.gammas().to_vec();
    let orders = MultiIndex::all_with_order(d, 0, 3);
    let splits: Vec<Vec<(usize, MultiIndex, T)>> = gammas
        .iter()
        .map(|g| {
            let sign = T::lit(g.sign());
            g.leibniz_splits()
                .into_iter()
                .map(|(g1, c)| {
                    let k = orders.iter().position(|o| *o == g1).expect("order ≤ 3");
                    let rest = MultiIndex::from_slice(
                        &g.as_slice().iter().zip(g1.as_slice()).map(|(a, b)| a - b).collect::<Vec<_>>(),
                    );
                    (k, rest, sign * T::lit(c))
                })
                .collect()
        })
        .collect();
    let policy = inner_policy(tol);
    let zero = MultiIndex::zero(d);
    let half = T::lit(0.5);
    let mut coef = vec![T::zero(); gammas.len()];

    let minus = |s: T, coef: &mut Vec<T>| -> (T, T) {
        let chart = density.forward_chart(s, x);
        let r = quadrature::integrate(&chart, policy, |z| {
            let px = density.density_derivs(alpha, &zero, s, x, z);
            if px == T::zero() {
                return T::zero();
            }
            op.coefficients(z, coef);
            let mut acc = T::zero();
            for (g, &c) in gammas.iter().zip(coef.iter()) {
                if c != T::zero() {
                    acc += c * density.density_derivs(g, beta, t - s, z, y);
                }
            }
            acc * px
        });
        (half * r.value, half * r.error)
    };
    let plus = |s: T| -> (T, T) {
        let chart = density.backward_chart(t - s, y);
        let r = quadrature::integrate(&chart, policy, |z| {
            let q = density.density_derivs(&zero, beta, t - s, z, y);
            if q == T::zero() {
                return T::zero();
            }
            let jets = op.coefficient_derivatives(z);
            let mut acc = T::zero();
            for (gi, terms) in splits.iter().enumerate() {
                for (k, rest, w) in terms {
                    let c = jets[*k][gi];
                    if c != T::zero() {
                        acc += *w * c * density.density_derivs(alpha, rest, s, x, z);
                    }
                }
            }
            acc * q
        });
        (half * r.value, half * r.error)
    };

    let cut = split * t;
    let left = adaptive_gauss_legendre(|s| minus(s, &mut coef), T::zero(), cut, tol * half, TIME_MAX_DEPTH);
    let right = adaptive_gauss_legendre(plus, cut, t, tol * half, TIME_MAX_DEPTH);
    let quad_error = left.error + right.error;
    Ok(PiEvaluation {
        value: left.value + right.value,
        quad_error,
        converged: left.converged && right.converged && quad_error <= tol,
        t,
        x: x.to_vec(),
        y: y.to_vec(),
        alpha: alpha.clone(),
        beta: beta.clone(),
    })
}

/// Inner `∂_z^γ P_{t−s} f(z)` for every `γ`, with an error estimate.
fn semigroup_derivatives<T: Real>(
    density: &dyn TransitionDensity<T>,
    f: &TestFunction<T>,
    gammas: &[MultiIndex],
    tau: T,
    z: &[T],
    policy: GhPolicy<T>,
    out: &mut [T],
) -> Result<T> {
    let eval = f.evaluator()?;
    let chart = density.forward_chart(tau, z);
    if z.len() == 1 && !f.breakpoints.is_empty() {
        let mut err = T::zero();
        for (g, o) in gammas.iter().zip(out.iter_mut()) {
            let r = quadrature::expect_piecewise_1d(&chart, &f.breakpoints, policy, |y| {
                let p = density.density(tau, z, &[y]);
                if p == T::zero() {
                    return T::zero();
                }
                eval(&[y]) * density.density_derivs(g, &MultiIndex::zero(1), tau, z, &[y]) / p
            });
            *o = r.value;
            err = err.max(r.error);
        }
        return Ok(err);
    }
    let zero = MultiIndex::zero(z.len());
    let r = quadrature::expect_vec(&chart, gammas.len(), policy, |y, o| {
        let p = density.density(tau, z, y);
        if p == T::zero() {
            o.iter_mut().for_each(|v| *v = T::zero());
            return;
        }
        let fy = eval(y);
        for (g, v) in gammas.iter().zip(o.iter_mut()) {
            *v = fy * density.density_derivs(g, &zero, tau, z, y) / p;
        }
    });
    out.copy_from_slice(&r.values);
    Ok(r.error)
}

fn semigroup_value<T: Real>(
    density: &dyn TransitionDensity<T>,
    f: &TestFunction<T>,
    tau: T,
    z: &[T],
    policy: GhPolicy<T>,
) -> Result<QuadResult<T>> {
    let eval = f.evaluator()?;
    let chart = density.forward_chart(tau, z);
    Ok(if z.len() == 1 && !f.breakpoints.is_empty() {
        quadrature::expect_piecewise_1d(&chart, &f.breakpoints, policy, |y| eval(&[y]))
    } else {
        quadrature::expect(&chart, policy, |y| eval(y))
    })
}

/// `C_t f(x) = ½ ∫₀ᵗ P_s L₂* P_{t−s} f(x) ds`.
///
/// Dirac-type `f` reduce to the kernel: `C_t(∂^β δ_y)(x) = (−1)^{|β|} ∂_y^β π(t, x, y)`.
pub fn principal_term_ct<T: Real>(model: &SdeModel<T>, f: &TestFunction<T>, t: T, x: &[T], tol: T) -> Result<QuadResult<T>> {
    principal_term_ct_split(model, f, t, x, tol, T::lit(0.5))
}

pub fn principal_term_ct_split<T: Real>(
    model: &SdeModel<T>,
    f: &TestFunction<T>,
    t: T,
    x: &[T],
    tol: T,
    split: T,
) -> Result<QuadResult<T>> {
    check_time(t, split)?;
    let d = model.dim_d();
    if x.len() != d {
        return Err(Error::InvalidParameter("dimension mismatch in principal term".into()));
    }
    if let Some((y, beta)) = f.dirac_data() {
        let pi = principal_density_pi_split(model, t, x, y, &MultiIndex::zero(d), &beta, tol, split)?.require(tol)?;
        let sign = T::lit(beta.sign());
        return Ok(QuadResult { value: sign * pi.value, error: pi.quad_error, converged: true, evaluations: 0 });
    }
    let density = model.require_density()?;
    let op = L2Operator::new(model);
    let gammas = op.gammas().to_vec();
    let orders = MultiIndex::all_with_order(d, 0, 3);
    let policy = inner_policy(tol);
    let half = T::lit(0.5);
    let mut failure: Option<Error> = None;

    let mut minus = |s: T| -> (T, T) {
        let chart = density.forward_chart(s, x);
        let mut coef = vec![T::zero(); gammas.len()];
        let mut inner = vec![T::zero(); gammas.len()];
        let mut inner_err = T::zero();
        let r = quadrature::expect(&chart, policy, |z| {
            op.coefficients(z, &mut coef);
            if coef.iter().all(|c| *c == T::zero()) {
                return T::zero();
            }
            match semigroup_derivatives(density, f, &gammas, t - s, z, policy, &mut inner) {
                Ok(e) => {
                    let w: T = coef.iter().map(|c| c.abs()).sum();
                    inner_err = inner_err.max(w * e);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
            coef.iter().zip(&inner).map(|(&c, &v)| c * v).sum()
        });
        (half * r.value, half * (r.error + inner_err))
    };
    let cut = split * t;
    let left = adaptive_gauss_legendre(&mut minus, T::zero(), cut, tol * half, TIME_MAX_DEPTH);

    let mut plus = |s: T| -> (T, T) {
        let chart = density.forward_chart(s, x);
        let mut inner_err = T::zero();
        let r = quadrature::integrate(&chart, policy, |z| {
            let jets = op.coefficient_derivatives(z);
            if jets.iter().all(|row| row.iter().all(|c| *c == T::zero())) {
                return T::zero();
            }
            let mut acc = T::zero();
            for (gi, g) in gammas.iter().enumerate() {
                let sign = T::lit(g.sign());
                for (g1, c) in g.leibniz_splits() {
                    let k = orders.iter().position(|o| *o == g1).expect("order ≤ 3");
                    let cg = jets[k][gi];
                    if cg == T::zero() {
                        continue;
                    }
                    let rest = MultiIndex::from_slice(
                        &g.as_slice().iter().zip(g1.as_slice()).map(|(a, b)| a - b).collect::<Vec<_>>(),
                    );
                    acc += sign * T::lit(c) * cg * density.density_derivs(&MultiIndex::zero(d), &rest, s, x, z);
                }
            }
            if acc == T::zero() {
                return T::zero();
            }
            match semigroup_value(density, f, t - s, z, policy) {
                Ok(u) => {
                    inner_err = inner_err.max(u.error);
                    acc * u.value
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    T::zero()
                }
            }
        });
        (half * r.value, half * (r.error + inner_err))
    };
    let right = adaptive_gauss_legendre(&mut plus, cut, t, tol * half, TIME_MAX_DEPTH);
    if let Some(e) = failure {
        return Err(e);
    }
    let error = left.error + right.error;
    if !(left.converged && right.converged && error <= tol) {
        return Err(Error::Unconverged { what: "principal term".into(), error: error.as_f64(), tolerance: tol.as_f64() });
    }
    Ok(QuadResult { value: left.value + right.value, error, converged: true, evaluations: left.evaluations + right.evaluations })
}

/// `∂_x^α ∂_y^β (p_n − p)(t, x, y)` from the Gaussian closed forms.
pub fn density_error_exact<T: Real>(
    model: &SdeModel<T>,
    n: usize,
    t: T,
    x: &[T],
    y: &[T],
    alpha: &MultiIndex,
    beta: &MultiIndex,
) -> Result<T> {
    let kernel = euler_exact_kernel_affine(model, n, t)?;
    let density = model.require_density()?;
    if model.is_constant() {
        // the Euler chain of a constant-coefficient model is its exact law
        return Ok(T::zero());
    }
    Ok(kernel.derivative(alpha, beta, x, y) - density.density_derivs(alpha, beta, t, x, y))
}

/// `(⟨S, p_n(t, x, ·)⟩, ⟨S, p(t, x, ·)⟩)` for an affine model.
pub fn distribution_pairing<T: Real>(model: &SdeModel<T>, s: &TestFunction<T>, n: usize, t: T, x: &[T]) -> Result<(T, T)> {
    let kernel = euler_exact_kernel_affine(model, n, t)?;
    let density = model.require_density()?;
    let d = model.dim_d();
    if let Some((y, beta)) = s.dirac_data() {
        let alpha = MultiIndex::zero(d);
        let sign = T::lit(beta.sign());
        let exact = sign * density.density_derivs(&alpha, &beta, t, x, y);
        let approx = if model.is_constant() { exact } else { sign * kernel.derivative(&alpha, &beta, x, y) };
        return Ok((approx, exact));
    }
    let eval = s.evaluator()?;
    let policy = GhPolicy::default();
    let pair = |chart: &Chart<T>| -> Result<T> {
        let r = if d == 1 && !s.breakpoints.is_empty() {
            quadrature::expect_piecewise_1d(chart, &s.breakpoints, policy, |y| eval(&[y]))
        } else {
            quadrature::expect(chart, policy, |y| eval(y))
        };
        if !r.converged {
            return Err(Error::Unconverged { what: "pairing quadrature".into(), error: r.error.as_f64(), tolerance: policy.rtol.as_f64() });
        }
        Ok(r.value)
    };
    let exact = pair(&density.forward_chart(t, x))?;
    let approx = if model.is_constant() { exact } else { pair(&kernel.forward_chart(x))? };
    Ok((approx, exact))
}

/// `⟨S, π(t, x, ·)⟩`: Dirac kinds evaluate the kernel, one-dimensional
/// functions integrate `f(y) π(t, x, y)` over `y` directly.
pub fn pair_with_pi<T: Real>(model: &SdeModel<T>, s: &TestFunction<T>, t: T, x: &[T], tol: T) -> Result<QuadResult<T>> {
    let d = model.dim_d();
    let alpha = MultiIndex::zero(d);
    if let Some((y, beta)) = s.dirac_data() {
        let pi = principal_density_pi(model, t, x, y, &alpha, &beta, tol)?.require(tol)?;
        return Ok(QuadResult { value: T::lit(beta.sign()) * pi.value, error: pi.quad_error, converged: true, evaluations: 1 });
    }
    if d != 1 {
        return Err(Error::UnsupportedFunctional("kernel pairing is one-dimensional".into()));
    }
    let density = model.require_density()?;
    let eval = s.evaluator()?;
    let chart = density.forward_chart(t, x);
    let mut failure: Option<Error> = None;
    let mut worst = T::zero();
    let policy = GhPolicy { rtol: T::lit(1e-8), ..GhPolicy::default() }.with_atol(tol);
    let r = quadrature::expect_piecewise_1d(&chart, &s.breakpoints, policy, |y| {
        let p = density.density(t, x, &[y]);
        if p == T::zero() {
            return T::zero();
        }
        match principal_density_pi(model, t, x, &[y], &alpha, &alpha, tol * T::lit(1e-2)) {
            Ok(pi) => {
                worst = worst.max(pi.quad_error * eval(&[y]).abs() / p);
                eval(&[y]) * pi.value / p
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
    let error = r.error + worst;
    Ok(QuadResult { value: r.value, error, converged: r.converged, evaluations: r.evaluations })
}

/// Gaussian-tail envelope `c1 t^{−(order+d+l)/2} exp(−c2 ‖x−y‖²/t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailBoundSpec<T> {
    pub l: u32,
    pub c1: T,
    pub c2: T,
    /// `|α| + |β|` of the kernel derivative being bounded.
    pub order: u32,
}

impl<T: Real> TailBoundSpec<T> {
    pub fn new(l: u32, c1: T, c2: T, order: u32) -> Result<Self> {
        if !(c2 > T::zero()) || c1 < T::zero() {
            return Err(Error::InvalidParameter(format!("tail constants c1 = {c1}, c2 = {c2}")));
        }
        Ok(Self { l, c1, c2, order })
    }

    /// Envelope divided by `c1`.
    fn shape(&self, t: T, x: &[T], y: &[T]) -> T {
        let d = x.len();
        let r2: T = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let power = T::lit((self.order as usize + d + self.l as usize) as f64 * 0.5);
        t.powf(-power) * (-self.c2 * r2 / t).exp()
    }

    pub fn envelope(&self, t: T, x: &[T], y: &[T]) -> T {
        self.c1 * self.shape(t, x, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailProbe<T> {
    pub t: T,
    pub x: Vec<T>,
    pub y: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport<T> {
    pub max_violation_ratio: T,
    pub worst: Option<TailProbe<T>>,
}

/// Largest `|kernel| / envelope` over the probes.
pub fn check_tail_bound<T: Real>(
    mut kernel: impl FnMut(T, &[T], &[T]) -> T,
    spec: &TailBoundSpec<T>,
    grid: &[TailProbe<T>],
) -> TailReport<T> {
    let mut report = TailReport { max_violation_ratio: T::zero(), worst: None };
    for p in grid {
        let k = kernel(p.t, &p.x, &p.y).abs();
        if k == T::zero() {
            continue;
        }
        let ratio = k / spec.envelope(p.t, &p.x, &p.y);
        if ratio > report.max_violation_ratio || !ratio.is_finite() {
            report.max_violation_ratio = ratio;
            report.worst = Some(p.clone());
        }
    }
    report
}

/// Fits tail constants to sampled kernel values.
///
/// For each `c2` on the grid the smallest admissible `c1` is computed; the
/// largest `c2` whose `c1` stays within twice the smallest one is kept, and
/// `c1` is inflated by 5%.
pub fn fit_tail_bound<T: Real>(samples: &[(TailProbe<T>, T)], l: u32, order: u32, c2_grid: &[T]) -> Result<TailBoundSpec<T>> {
    if c2_grid.is_empty() {
        return Err(Error::InvalidParameter("empty c2 grid".into()));
    }
    let needed: Vec<(T, T)> = c2_grid
        .iter()
        .map(|&c2| {
            let spec = TailBoundSpec { l, c1: T::one(), c2, order };
            let c1 = samples
                .iter()
                .map(|(p, v)| v.abs() / spec.shape(p.t, &p.x, &p.y))
                .fold(T::zero(), |a, b| a.max(b));
            (c2, c1)
        })
        .filter(|(_, c1)| c1.is_finite())
        .collect();
    let floor = needed.iter().map(|(_, c1)| *c1).fold(T::infinity(), |a, b| a.min(b));
    let (c2, c1) = needed
        .iter()
        .filter(|(_, c1)| *c1 <= T::lit(2.0) * floor)
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .copied()
        .ok_or_else(|| Error::InvalidParameter("no admissible tail constants".into()))?;
    TailBoundSpec::new(l, c1 * T::lit(1.05), c2, order)
}

/// Grid approximation of `N_q(k) = Σ_{|α|,|β|≤q} sup_y |y^α ∂^β k(y)|`.
pub fn seminorm_nq<T: Real>(mut k: impl FnMut(&MultiIndex, &[T]) -> T, d: usize, q: u32, grid: &[Vec<T>]) -> T {
    let indices = MultiIndex::all_with_order(d, 0, q);
    let mut total = T::zero();
    for beta in &indices {
        let values: Vec<T> = grid.iter().map(|y| k(beta, y)).collect();
        for alpha in &indices {
            let sup = grid
                .iter()
                .zip(&values)
                .map(|(y, &v)| {
                    let mono = y.iter().zip(alpha.as_slice()).fold(T::one(), |acc, (&yi, &a)| acc * yi.powi(a as i32));
                    (mono * v).abs()
                })
                .fold(T::zero(), |a, b| a.max(b));
            total += sup;
        }
    }
    total
}
