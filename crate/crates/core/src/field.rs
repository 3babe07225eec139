//! Scalar fields `ℝⁿ → ℝ` with gradients (Lyapunov, barrier and merged functions).

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::linalg::norm;

/// Central-difference step used for gradient cross-checks.
pub const FD_STEP: f64 = 1e-6;
/// Relative agreement required between analytic and finite-difference gradients.
pub const GRADIENT_TOL: f64 = 1e-6;

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientKind {
    Analytic,
    FiniteDifference(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("gradient of {field} disagrees with central differences at {point:?}: relative error {error:e} > {tol:e}")]
pub struct GradientMismatch {
    pub field: String,
    pub point: Vec<f64>,
    pub error: f64,
    pub tol: f64,
}

#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    value: ValueFn,
    gradient: GradFn,
    kind: GradientKind,
    description: String,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("description", &self.description)
            .finish()
    }
}

pub fn central_difference(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let xi = x[i];
            probe[i] = xi + h;
            let fp = f(&probe);
            probe[i] = xi - h;
            let fm = f(&probe);
            probe[i] = xi;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

impl ScalarField {
    pub fn analytic<V, G>(dim: usize, description: impl Into<String>, value: V, gradient: G) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            kind: GradientKind::Analytic,
            description: description.into(),
        }
    }

    /// A field whose gradient is always taken by central differences with step `h`.
    pub fn finite_difference<V>(dim: usize, description: impl Into<String>, h: f64, value: V) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        let value: ValueFn = Arc::new(value);
        let inner = value.clone();
        Self {
            dim,
            value,
            gradient: Arc::new(move |x| central_difference(&*inner, x, h)),
            kind: GradientKind::FiniteDifference(h),
            description: description.into(),
        }
    }

    /// Parses an expression and differentiates it symbolically.
    pub fn from_expr(dim: usize, src: &str) -> Result<Self, ExprError> {
        let e = Expr::parse(src)?;
        e.check_dim(dim)?;
        let grad = e.gradient(dim)?;
        let e2 = e.clone();
        Ok(Self::analytic(
            dim,
            src.to_string(),
            move |x| e2.eval(x),
            move |x| grad.iter().map(|g| g.eval(x)).collect(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> GradientKind {
        self.kind
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }

    /// Relative disagreement between the declared gradient and central
    /// differences, normalised by `max(‖∇f‖, 1)`.
    pub fn gradient_error(&self, x: &[f64]) -> f64 {
        let g = self.gradient(x);
        let fd = central_difference(&*self.value, x, FD_STEP);
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        norm(&diff) / norm(&g).max(1.0)
    }

    pub fn check_gradient_at(&self, points: &[Vec<f64>], tol: f64) -> Result<f64, GradientMismatch> {
        let mut worst = 0.0_f64;
        for p in points {
            let err = self.gradient_error(p);
            if !(err <= tol) {
                return Err(GradientMismatch {
                    field: self.description.clone(),
                    point: p.clone(),
                    error: err,
                    tol,
                });
            }
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Cross-checks the gradient at `count` seeded uniform points of a box.
    /// Returns the worst relative error seen.
    pub fn check_gradient(
        &self,
        bounds: &[(f64, f64)],
        count: usize,
        seed: u64,
        tol: f64,
    ) -> Result<f64, GradientMismatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..count)
            .map(|_| bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
            .collect();
        self.check_gradient_at(&points, tol)
    }
}
