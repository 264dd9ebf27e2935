//! Weak error analysis for Euler discretizations of diffusions.

pub mod error;
pub mod error_expansion;
pub mod euler;
pub mod functions;
pub mod gaussian;
pub mod linalg;
pub mod models;
pub mod montecarlo;
pub mod multiindex;
pub mod pricing;
pub mod quadrature;
pub mod real;
pub mod report;
pub mod rng;
pub mod special;
pub mod study;

pub use error::{Error, Result};
pub use error_expansion::{
    apply_l2star, check_tail_bound, density_error_exact, distribution_pairing, principal_density_pi, principal_term_ct,
    seminorm_nq, PiEvaluation, TailBoundSpec,
};
pub use gaussian::{AffineGaussianMap, GaussianDensity, GaussianLaw};
pub use euler::{euler_exact_law_affine, simulate_coupled, simulate_euler, BrownianSlice, EulerEndpoint};
pub use functions::{FunctionKind, TestFunction};
pub use linalg::Matrix;
pub use models::{
    make_black_scholes_log_model, make_bounded_vol_model, make_constant_model, make_gbm_model, make_ou_model,
    semigroup_apply, AssumptionFlags, SdeModel, TransitionDensity,
};
pub use multiindex::MultiIndex;
pub use montecarlo::{Estimate, RateFit};
pub use pricing::{greeks_euler, price_euler, GreeksReport, OptionSpec, Payoff, Quantity};
pub use real::Real;
pub use rng::RngStream;
pub use study::{run_study, StudyConfig, StudyKind, StudyReport};

pub type MatrixF64 = Matrix<f64>;
pub type GaussianLawF64 = GaussianLaw<f64>;
pub type SdeModelF64 = SdeModel<f64>;
pub type TestFunctionF64 = TestFunction<f64>;
