//! Test functionals: pointwise functions with growth certificates, and the
//! Dirac-type distributions paired with densities.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::multiindex::MultiIndex;
use crate::real::Real;

pub type PointFn<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionKind<T> {
    /// `|∂^α f(y)| ≤ c(1 + ‖y‖^q)`.
    SmoothPoly { c: T, q: T },
    Bounded { bound: T },
    /// `|f(y)| ≤ c1 exp(c2 ‖y‖^mu)` with `mu ∈ (0, 2)`.
    ExpGrowth { mu: T, c1: T, c2: T },
    Dirac { y: Vec<T> },
    /// `⟨∂^β δ_y, φ⟩ = (−1)^{|β|} ∂^β φ(y)`.
    DiracDeriv { y: Vec<T>, beta: MultiIndex },
}

#[derive(Clone)]
pub struct TestFunction<T> {
    pub label: String,
    pub kind: FunctionKind<T>,
    eval: Option<PointFn<T>>,
    /// Kinks or jumps of a one-dimensional `f`, used to split quadrature.
    pub breakpoints: Vec<T>,
}

impl<T: Real> fmt::Debug for TestFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("label", &self.label).field("kind", &self.kind).finish()
    }
}

impl<T: Real> TestFunction<T> {
    pub fn smooth(label: &str, c: T, q: T, f: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        Self { label: label.into(), kind: FunctionKind::SmoothPoly { c, q }, eval: Some(Arc::new(f)), breakpoints: vec![] }
    }

    pub fn bounded(label: &str, bound: T, f: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        Self { label: label.into(), kind: FunctionKind::Bounded { bound }, eval: Some(Arc::new(f)), breakpoints: vec![] }
    }

    pub fn exp_growth(
        label: &str,
        mu: T,
        c1: T,
        c2: T,
        f: impl Fn(&[T]) -> T + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(mu > T::zero() && mu < T::lit(2.0)) {
            return Err(Error::InvalidParameter(format!("growth exponent {mu} outside (0, 2)")));
        }
        Ok(Self { label: label.into(), kind: FunctionKind::ExpGrowth { mu, c1, c2 }, eval: Some(Arc::new(f)), breakpoints: vec![] })
    }

    pub fn with_breakpoints(mut self, points: Vec<T>) -> Self {
        self.breakpoints = points;
        self
    }

    /// `y ↦ y_0`.
    pub fn identity() -> Self {
        Self::smooth("identity", T::one(), T::one(), |y| y[0])
    }

    /// `y ↦ y_0^k`.
    pub fn power(k: u32) -> Self {
        let c = T::lit(2f64.powi(k as i32).max(1.0) * (1..=k.max(1)).product::<u32>() as f64);
        Self::smooth(&format!("power{k}"), c, T::lit(k as f64), move |y| y[0].powi(k as i32))
    }

    /// `y ↦ exp(|y_0|)`, a member of the exponential-growth class with `μ = 1`.
    pub fn exp_abs() -> Self {
        Self {
            label: "exp-abs".into(),
            kind: FunctionKind::ExpGrowth { mu: T::one(), c1: T::one(), c2: T::one() },
            eval: Some(Arc::new(|y: &[T]| y[0].abs().exp())),
            breakpoints: vec![T::zero()],
        }
    }

    pub fn dirac(y: Vec<T>) -> Self {
        Self { label: "dirac".into(), kind: FunctionKind::Dirac { y }, eval: None, breakpoints: vec![] }
    }

    pub fn dirac_deriv(y: Vec<T>, beta: MultiIndex) -> Result<Self> {
        if beta.dim() != y.len() || beta.order() > 2 {
            return Err(Error::InvalidParameter(format!("Dirac derivative order {beta} not supported")));
        }
        Ok(Self { label: format!("dirac-deriv{beta}"), kind: FunctionKind::DiracDeriv { y, beta }, eval: None, breakpoints: vec![] })
    }

    pub fn is_pointwise(&self) -> bool {
        self.eval.is_some()
    }

    pub fn is_dirac(&self) -> bool {
        matches!(self.kind, FunctionKind::Dirac { .. } | FunctionKind::DiracDeriv { .. })
    }

    pub fn eval(&self, y: &[T]) -> Result<T> {
        match &self.eval {
            Some(f) => Ok(f(y)),
            None => Err(Error::UnsupportedFunctional(format!("{} has no pointwise values", self.label))),
        }
    }

    /// Pointwise evaluator; callers must check `is_pointwise` first.
    pub fn evaluator(&self) -> Result<PointFn<T>> {
        self.eval.clone().ok_or_else(|| Error::UnsupportedFunctional(format!("{} has no pointwise values", self.label)))
    }

    /// Point and multi-index `(y, β)` of a Dirac-type functional.
    pub fn dirac_data(&self) -> Option<(&[T], MultiIndex)> {
        match &self.kind {
            FunctionKind::Dirac { y } => Some((y, MultiIndex::zero(y.len()))),
            FunctionKind::DiracDeriv { y, beta } => Some((y, beta.clone())),
            _ => None,
        }
    }

    /// Envelope the certificate promises at `y`.
    pub fn envelope(&self, y: &[T]) -> Option<T> {
        let norm = y.iter().map(|&v| v * v).sum::<T>().sqrt();
        match &self.kind {
            FunctionKind::SmoothPoly { c, q } => Some(*c * (T::one() + norm.powf(*q))),
            FunctionKind::Bounded { bound } => Some(*bound),
            FunctionKind::ExpGrowth { mu, c1, c2 } => Some(*c1 * (*c2 * norm.powf(*mu)).exp()),
            _ => None,
        }
    }

    /// Checks `|f| ≤ envelope` on the given probes. Returns the worst ratio.
    pub fn check_growth(&self, probes: &[Vec<T>]) -> Result<T> {
        let mut worst = T::zero();
        for y in probes {
            let env = self
                .envelope(y)
                .ok_or_else(|| Error::UnsupportedFunctional(format!("{} has no growth certificate", self.label)))?;
            let v = self.eval(y)?.abs();
            worst = worst.max(v / env);
        }
        Ok(worst)
    }
}
