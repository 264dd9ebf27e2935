//! Gaussian laws and affine Gaussian transition kernels.
//!
//! For affine drift and constant diffusion both the diffusion and its Euler
//! scheme have Gaussian transitions `y ~ N(E·x + c, V)`. Derivatives of the
//! kernel in `x` and `y` reduce to derivatives of the centred Gaussian
//! density, computed with the multivariate Hermite recursion
//! `H_{γ+e_k} = w_k H_γ − Σ_l P_{kl} γ_l H_{γ−e_l}` where `P = V^{-1}` and
//! `w = P u`, so that `∂^γ φ_V(u) = (−1)^{|γ|} H_γ(u) φ_V(u)`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::multiindex::MultiIndex;
use crate::quadrature::Chart;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw<T> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
}

impl<T: Real> GaussianLaw<T> {
    /// Builds a law after checking symmetry; slightly negative eigenvalues
    /// from rounding are tolerated.
    pub fn new(mean: Vec<T>, cov: Matrix<T>) -> Result<Self> {
        let d = mean.len();
        if cov.rows() != d || cov.cols() != d {
            return Err(Error::InvalidParameter("covariance shape mismatch".into()));
        }
        let scale = cov.as_slice().iter().fold(T::one(), |m, &x| m.max(x.abs()));
        let tol = T::lit(1e-12) * scale;
        if !cov.is_symmetric(tol) {
            return Err(Error::InvalidParameter("covariance not symmetric".into()));
        }
        if cov.min_symmetric_eigenvalue() < -tol {
            return Err(Error::InvalidParameter("covariance not positive semidefinite".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn chart(&self) -> Result<Chart<T>> {
        Ok(Chart::affine(self.mean.clone(), self.cov.cholesky()?))
    }

    pub fn pdf(&self, y: &[T]) -> Result<T> {
        let k = GaussianDensity::new(&self.cov)?;
        let u: Vec<T> = y.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        Ok(k.value(&u))
    }

    /// `E‖X‖^2`.
    pub fn second_moment(&self) -> T {
        let tr: T = (0..self.dim()).map(|i| self.cov[(i, i)]).sum();
        tr + self.mean.iter().map(|&m| m * m).sum()
    }
}

/// Centered Gaussian density `φ_V` with derivative support.
#[derive(Debug, Clone)]
pub struct GaussianDensity<T> {
    precision: Matrix<T>,
    norm: T,
}

impl<T: Real> GaussianDensity<T> {
    pub fn new(cov: &Matrix<T>) -> Result<Self> {
        let l = cov.cholesky()?;
        let d = cov.rows();
        let det_sqrt = (0..d).fold(T::one(), |acc, i| acc * l[(i, i)]);
        let norm = T::one() / ((T::lit(2.0) * T::PI()).powf(T::lit(d as f64 / 2.0)) * det_sqrt);
        Ok(Self { precision: cov.inverse()?, norm })
    }

    pub fn dim(&self) -> usize {
        self.precision.rows()
    }

    fn quad_form(&self, u: &[T]) -> T {
        let d = self.dim();
        let mut q = T::zero();
        for i in 0..d {
            for j in 0..d {
                q += u[i] * self.precision[(i, j)] * u[j];
            }
        }
        q
    }

    pub fn value(&self, u: &[T]) -> T {
        self.norm * (-T::lit(0.5) * self.quad_form(u)).exp()
    }

    /// `∂^γ φ_V(u)`.
    pub fn derivative(&self, u: &[T], gamma: &MultiIndex) -> T {
        let phi = self.value(u);
        if gamma.is_zero() {
            return phi;
        }
        T::lit(gamma.sign()) * self.hermite(u, gamma) * phi
    }

    /// `H_γ(u)` with `∂^γ φ_V = (−1)^{|γ|} H_γ φ_V`.
    pub fn hermite(&self, u: &[T], gamma: &MultiIndex) -> T {
        let d = self.dim();
        if d == 1 {
            let p = self.precision[(0, 0)];
            return hermite_1d(u[0] * p, p, gamma.get(0) as usize);
        }
        let w = self.precision.matvec(u);
        // dense table over the box 0 ≤ η ≤ γ, filled in order of increasing length
        let dims: Vec<usize> = gamma.as_slice().iter().map(|&g| g as usize + 1).collect();
        let size: usize = dims.iter().product();
        let flat = |eta: &[usize]| -> usize {
            let mut idx = 0;
            for i in (0..d).rev() {
                idx = idx * dims[i] + eta[i];
            }
            idx
        };
        let mut table = vec![T::zero(); size];
        let mut boxes: Vec<Vec<usize>> = Vec::with_capacity(size);
        let mut cur = vec![0usize; d];
        loop {
            boxes.push(cur.clone());
            let mut i = 0;
            loop {
                if i == d {
                    break;
                }
                cur[i] += 1;
                if cur[i] < dims[i] {
                    break;
                }
                cur[i] = 0;
                i += 1;
            }
            if i == d {
                break;
            }
        }
        boxes.sort_by_key(|e| e.iter().sum::<usize>());
        for eta in &boxes {
            let len: usize = eta.iter().sum();
            if len == 0 {
                table[flat(eta)] = T::one();
                continue;
            }
            let k = eta.iter().position(|&e| e > 0).unwrap();
            let mut prev = eta.clone();
            prev[k] -= 1;
            let mut v = w[k] * table[flat(&prev)];
            for l in 0..d {
                if prev[l] > 0 {
                    let mut pp = prev.clone();
                    pp[l] -= 1;
                    v -= self.precision[(k, l)] * T::usize_lit(prev[l]) * table[flat(&pp)];
                }
            }
            table[flat(eta)] = v;
        }
        table[size - 1]
    }
}

/// One-dimensional `H_n` for precision `p` evaluated at `w = p·u`.
#[inline]
pub fn hermite_1d<T: Real>(w: T, p: T, n: usize) -> T {
    let mut h0 = T::one();
    if n == 0 {
        return h0;
    }
    let mut h1 = w;
    for k in 1..n {
        let h2 = w * h1 - p * T::usize_lit(k) * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Affine Gaussian transition `y ~ N(E·x + c, V)` at a fixed time.
#[derive(Debug, Clone)]
pub struct AffineGaussianMap<T> {
    pub e: Matrix<T>,
    pub c: Vec<T>,
    pub cov: Matrix<T>,
    density: GaussianDensity<T>,
    chol: Matrix<T>,
}

impl<T: Real> AffineGaussianMap<T> {
    pub fn new(e: Matrix<T>, c: Vec<T>, cov: Matrix<T>) -> Result<Self> {
        let density = GaussianDensity::new(&cov)?;
        let chol = cov.cholesky()?;
        Ok(Self { e, c, cov, density, chol })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn mean(&self, x: &[T]) -> Vec<T> {
        let ex = self.e.matvec(x);
        ex.iter().zip(&self.c).map(|(&a, &b)| a + b).collect()
    }

    pub fn law(&self, x: &[T]) -> GaussianLaw<T> {
        GaussianLaw { mean: self.mean(x), cov: self.cov.clone() }
    }

    pub fn forward_chart(&self, x: &[T]) -> Chart<T> {
        Chart::affine(self.mean(x), self.chol.clone())
    }

    /// Chart of `z ↦ p(z, y)`: Gaussian in `z` with mean `E^{-1}(y − c)` and
    /// covariance `E^{-1} V E^{-T}`.
    pub fn backward_chart(&self, y: &[T]) -> Result<Chart<T>> {
        let inv = self.e.inverse()?;
        let shifted: Vec<T> = y.iter().zip(&self.c).map(|(&a, &b)| a - b).collect();
        Ok(Chart::affine(inv.matvec(&shifted), inv.matmul(&self.chol)))
    }

    fn residual(&self, x: &[T], y: &[T]) -> Vec<T> {
        let m = self.mean(x);
        y.iter().zip(&m).map(|(&a, &b)| a - b).collect()
    }

    pub fn density(&self, x: &[T], y: &[T]) -> T {
        self.density.value(&self.residual(x, y))
    }

    /// `∂_x^α ∂_y^β p(x, y)`.
    pub fn derivative(&self, alpha: &MultiIndex, beta: &MultiIndex, x: &[T], y: &[T]) -> T {
        let d = self.dim();
        if d == 1 {
            let u = y[0] - self.e[(0, 0)] * x[0] - self.c[0];
            let p = self.density.precision[(0, 0)];
            let (a, b) = (alpha.get(0) as usize, beta.get(0) as usize);
            let n = a + b;
            let phi = self.density.norm * (-T::lit(0.5) * p * u * u).exp();
            let h = hermite_1d(p * u, p, n);
            // ∂_x = −E ∂_u ; ∂^n φ = (−1)^n H_n φ
            let sign = if b % 2 == 0 { T::one() } else { -T::one() };
            return sign * self.e[(0, 0)].powi(a as i32) * h * phi;
        }
        let u = self.residual(x, y);
        let mut acc = T::zero();
        for (gamma, coef) in self.u_expansion(alpha, beta) {
            acc += coef * self.density.derivative(&u, &gamma);
        }
        acc
    }

    /// Writes `∂_x^α ∂_y^β` as `Σ coef · ∂_u^γ` with `u = y − E x − c`.
    fn u_expansion(&self, alpha: &MultiIndex, beta: &MultiIndex) -> Vec<(MultiIndex, T)> {
        let d = self.dim();
        let mut terms: Vec<(MultiIndex, T)> = vec![(beta.clone(), T::one())];
        for i in 0..d {
            for _ in 0..alpha.get(i) {
                let mut next: Vec<(MultiIndex, T)> = Vec::new();
                for (g, c) in &terms {
                    for k in 0..d {
                        let coef = -self.e[(k, i)] * *c;
                        if coef == T::zero() {
                            continue;
                        }
                        let ng = g.increment(k);
                        match next.iter_mut().find(|(m, _)| *m == ng) {
                            Some((_, v)) => *v += coef,
                            None => next.push((ng, coef)),
                        }
                    }
                }
                terms = next;
            }
        }
        terms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn one_dim_derivatives_match_finite_differences() {
        let k = AffineGaussianMap::new(Matrix::diag(&[0.6]), vec![0.2], Matrix::diag(&[0.4])).unwrap();
        let (x, y) = (0.3, 0.9);
        for a in 0..3u32 {
            for b in 0..3u32 {
                let alpha = MultiIndex::from_slice(&[a]);
                let beta_next = MultiIndex::from_slice(&[b + 1]);
                let beta = MultiIndex::from_slice(&[b]);
                let analytic = k.derivative(&alpha, &beta_next, &[x], &[y]);
                let numeric = fd(|yy| k.derivative(&alpha, &beta, &[x], &[yy]), y, 1e-3);
                assert!((analytic - numeric).abs() < 1e-8 * (1.0 + analytic.abs()), "a={a} b={b}");
                let alpha_next = MultiIndex::from_slice(&[a + 1]);
                let analytic = k.derivative(&alpha_next, &beta, &[x], &[y]);
                let numeric = fd(|xx| k.derivative(&alpha, &beta, &[xx], &[y]), x, 1e-3);
                assert!((analytic - numeric).abs() < 1e-8 * (1.0 + analytic.abs()), "a={a} b={b}");
            }
        }
    }

    #[test]
    fn multi_dim_derivatives_match_finite_differences() {
        let e = Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.2, 1.1]]).unwrap();
        let v = Matrix::from_rows(&[vec![0.5, 0.1], vec![0.1, 0.3]]).unwrap();
        let k = AffineGaussianMap::new(e, vec![0.1, -0.3], v).unwrap();
        let x = [0.2, -0.1];
        let y = [0.4, 0.2];
        let cases = [([1u32, 0], [0u32, 1]), ([0, 2], [1, 0]), ([1, 1], [1, 0]), ([0, 0], [2, 1])];
        for (a, b) in cases {
            let alpha = MultiIndex::from_slice(&a);
            let beta = MultiIndex::from_slice(&b);
            let analytic = k.derivative(&alpha, &beta.increment(1), &x, &y);
            let numeric = fd(|t| k.derivative(&alpha, &beta, &x, &[y[0], t]), y[1], 1e-3);
            assert!((analytic - numeric).abs() < 1e-7 * (1.0 + analytic.abs()), "{a:?} {b:?}");
            let analytic = k.derivative(&alpha.increment(0), &beta, &x, &y);
            let numeric = fd(|t| k.derivative(&alpha, &beta, &[t, x[1]], &y), x[0], 1e-3);
            assert!((analytic - numeric).abs() < 1e-7 * (1.0 + analytic.abs()), "{a:?} {b:?}");
        }
    }

    #[test]
    fn standard_normal_peak() {
        let law: GaussianLaw<f64> = GaussianLaw::new(vec![0.0], Matrix::identity(1)).unwrap();
        assert!((law.pdf(&[0.0]).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let cov = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(GaussianLaw::new(vec![0.0, 0.0], cov).is_err());
    }
}
