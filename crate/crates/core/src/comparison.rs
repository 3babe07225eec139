//! Comparison functions (classes P, K, K∞, KK, KL) and the comparison-lemma flow.
//!
//! A [`MonotoneFn`] is a scalar map on the half-line `[0, ∞)`. Catalog shapes
//! (identity, linear, power, odd polynomial) carry their class analytically;
//! compositions and numerical inverses inherit the weakest class of their
//! factors. Inversion is always numerical: comparison functions are only
//! guaranteed monotone, so we bisect on a bracket that grows geometrically
//! from `[0, 1]`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default absolute tolerance for [`MonotoneFn::inverse`].
pub const INVERSE_TOL: f64 = 1e-10;
/// Bracket growth stops once the upper end passes this value.
pub const INVERSE_HORIZON: f64 = 1e12;
/// Default fixed step for [`comparison_flow`].
pub const FLOW_STEP: f64 = 1e-3;
/// Flow values are capped here; hitting the cap is reported as saturation.
pub const FLOW_CAP: f64 = 1e12;
/// Horizon used when probing K∞ unboundedness.
pub const KINF_HORIZON: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComparisonError {
    #[error("argument {0} is outside the domain [0, inf)")]
    Domain(f64),
    #[error("value {y} is not enclosed by a bracket below {horizon} (function {label})")]
    Range { y: f64, horizon: f64, label: String },
    #[error("integration step must be positive, got {0}")]
    Step(f64),
    #[error("parameter {name} = {value} is out of range ({expected})")]
    Parameter {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("{label} is not of class {required:?}: {reason}")]
    Class {
        label: String,
        required: FnClass,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, ComparisonError>;

/// Class tag of a scalar comparison function. Ordered from weakest to strongest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FnClass {
    P,
    K,
    Kinf,
}

/// Catalog entry used by experiment files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FnDecl {
    Identity,
    Linear {
        c: f64,
    },
    /// `c * s^p`
    Power {
        p: f64,
        #[serde(default = "unit")]
        c: f64,
    },
    /// `a * s + b * s^3`
    PolyOdd {
        a: f64,
        b: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl FnDecl {
    pub fn build(&self) -> Result<MonotoneFn> {
        match *self {
            FnDecl::Identity => Ok(MonotoneFn::identity()),
            FnDecl::Linear { c } => MonotoneFn::linear(c),
            FnDecl::Power { p, c } => MonotoneFn::power(c, p),
            FnDecl::PolyOdd { a, b } => MonotoneFn::poly_odd(a, b),
        }
    }
}

type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Repr {
    Identity,
    Linear(f64),
    Power { c: f64, p: f64 },
    PolyOdd { a: f64, b: f64 },
    /// Factors listed outermost first, as in `f ∘ g ∘ h`.
    Compose(Vec<MonotoneFn>),
    Inverse { inner: MonotoneFn, tol: f64 },
    Custom(ScalarMap),
}

/// A scalar comparison function on `[0, ∞)`.
#[derive(Clone)]
pub struct MonotoneFn {
    repr: Arc<Repr>,
    class: FnClass,
    label: String,
}

impl fmt::Debug for MonotoneFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MonotoneFn({}, {:?})", self.label, self.class)
    }
}

impl fmt::Display for MonotoneFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

fn positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ComparisonError::Parameter {
            name,
            value,
            expected: "finite and > 0",
        })
    }
}

impl MonotoneFn {
    fn from_repr(repr: Repr, class: FnClass, label: String) -> Self {
        Self {
            repr: Arc::new(repr),
            class,
            label,
        }
    }

    pub fn identity() -> Self {
        Self::from_repr(Repr::Identity, FnClass::Kinf, "s".into())
    }

    pub fn linear(c: f64) -> Result<Self> {
        positive("c", c)?;
        Ok(Self::from_repr(Repr::Linear(c), FnClass::Kinf, format!("{c}*s")))
    }

    /// `c * s^p` with `c, p > 0`.
    pub fn power(c: f64, p: f64) -> Result<Self> {
        positive("c", c)?;
        positive("p", p)?;
        Ok(Self::from_repr(
            Repr::Power { c, p },
            FnClass::Kinf,
            format!("{c}*s^{p}"),
        ))
    }

    /// `a * s + b * s^3` with `a, b ≥ 0`, not both zero.
    pub fn poly_odd(a: f64, b: f64) -> Result<Self> {
        for (name, v) in [("a", a), ("b", b)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ComparisonError::Parameter {
                    name,
                    value: v,
                    expected: "finite and >= 0",
                });
            }
        }
        if a == 0.0 && b == 0.0 {
            return Err(ComparisonError::Parameter {
                name: "a",
                value: a,
                expected: "a + b > 0",
            });
        }
        Ok(Self::from_repr(
            Repr::PolyOdd { a, b },
            FnClass::Kinf,
            format!("{a}*s + {b}*s^3"),
        ))
    }

    /// Wraps an arbitrary evaluator. The declared class is trusted until
    /// [`MonotoneFn::validate`] is called.
    pub fn custom<F>(label: impl Into<String>, class: FnClass, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::from_repr(Repr::Custom(Arc::new(f)), class, label.into())
    }

    pub fn class(&self) -> FnClass {
        self.class
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Relabels the function, e.g. to mark it as a fitted artifact.
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        if s < 0.0 || s.is_nan() {
            return Err(ComparisonError::Domain(s));
        }
        self.apply(s)
    }

    fn apply(&self, s: f64) -> Result<f64> {
        Ok(match &*self.repr {
            Repr::Identity => s,
            Repr::Linear(c) => c * s,
            Repr::Power { c, p } => c * s.powf(*p),
            Repr::PolyOdd { a, b } => a * s + b * s * s * s,
            Repr::Compose(fs) => {
                let mut v = s;
                for f in fs.iter().rev() {
                    // Intermediate values are outputs of class-P maps; clamp
                    // round-off below zero back onto the domain.
                    v = f.apply(v.max(0.0))?;
                }
                v
            }
            Repr::Inverse { inner, tol } => inner.inverse(s, *tol)?,
            Repr::Custom(f) => f(s),
        })
    }

    /// Solves `f(s) = y` by bisection with geometric bracket growth from `[0, 1]`.
    pub fn inverse(&self, y: f64, tol: f64) -> Result<f64> {
        self.inverse_within(y, tol, INVERSE_HORIZON)
    }

    pub fn inverse_within(&self, y: f64, tol: f64, horizon: f64) -> Result<f64> {
        if y.is_nan() {
            return Err(ComparisonError::Domain(y));
        }
        let range_err = || ComparisonError::Range {
            y,
            horizon,
            label: self.label.clone(),
        };
        if y >= 0.0 {
            let exact = match &*self.repr {
                Repr::Identity => Some(y),
                Repr::Linear(c) => Some(y / c),
                Repr::Power { c, p } => Some((y / c).powf(1.0 / p)),
                _ => None,
            };
            if let Some(s) = exact {
                return if s <= horizon { Ok(s) } else { Err(range_err()) };
            }
        }
        let f0 = self.apply(0.0)?;
        if y < f0 - tol {
            return Err(range_err());
        }
        if (y - f0).abs() <= tol && y <= f0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while self.apply(hi)? < y {
            lo = hi;
            hi *= 2.0;
            if hi > horizon {
                return Err(range_err());
            }
        }
        let mut best = (f64::INFINITY, hi);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            let fm = self.apply(mid)?;
            let err = (fm - y).abs();
            if err < best.0 {
                best = (err, mid);
            }
            let width = hi - lo;
            if err <= tol && width <= tol * mid.max(1.0) {
                return Ok(mid);
            }
            if mid <= lo || mid >= hi {
                break;
            }
            if fm < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(best.1)
    }

    /// The numerical inverse as a function of its own.
    pub fn inverted(&self) -> MonotoneFn {
        self.inverted_with_tol(INVERSE_TOL)
    }

    pub fn inverted_with_tol(&self, tol: f64) -> MonotoneFn {
        match &*self.repr {
            Repr::Inverse { inner, .. } => return inner.clone(),
            Repr::Identity => return self.clone(),
            Repr::Linear(c) => return Self::from_repr(Repr::Linear(1.0 / c), self.class, format!("({})^-1", self.label)),
            Repr::Power { c, p } => {
                return Self::from_repr(
                    Repr::Power {
                        c: c.powf(-1.0 / p),
                        p: 1.0 / p,
                    },
                    self.class,
                    format!("({})^-1", self.label),
                )
            }
            _ => {}
        }
        Self::from_repr(
            Repr::Inverse {
                inner: self.clone(),
                tol,
            },
            self.class,
            format!("({})^-1", self.label),
        )
    }

    /// Pointwise check of the declared class on a log-spaced sample of `[0, horizon]`.
    ///
    /// Strict increase is required between consecutive samples; K∞ growth is
    /// accepted when `f(horizon) ≥ 10 f(1)`.
    pub fn validate(&self, required: FnClass, horizon: f64) -> Result<()> {
        let fail = |reason: String| ComparisonError::Class {
            label: self.label.clone(),
            required,
            reason,
        };
        if self.class < required {
            return Err(fail(format!("declared class is {:?}", self.class)));
        }
        let mut samples = vec![0.0];
        let (lo, hi) = (1e-6_f64.ln(), horizon.ln());
        let n = 240;
        samples.extend((0..=n).map(|i| (lo + (hi - lo) * i as f64 / n as f64).exp()));
        let mut prev = self.apply(0.0)?;
        if !(prev.is_finite() && prev >= 0.0) {
            return Err(fail(format!("f(0) = {prev} is not a nonnegative value")));
        }
        if required >= FnClass::K && prev.abs() > 1e-12 {
            return Err(fail(format!("f(0) = {prev} != 0")));
        }
        for w in samples.windows(2) {
            let v = self.apply(w[1])?;
            if !(v > prev) {
                return Err(fail(format!(
                    "not strictly increasing between s = {} and s = {}",
                    w[0], w[1]
                )));
            }
            prev = v;
        }
        if required == FnClass::Kinf {
            let f1 = self.apply(1.0)?;
            let fh = self.apply(horizon)?;
            if !(fh >= 10.0 * f1) {
                return Err(fail(format!(
                    "growth f({horizon}) = {fh} does not clear 10 f(1) = {}",
                    10.0 * f1
                )));
            }
        }
        Ok(())
    }
}

/// Composes factors listed outermost first: `compose(&[f, g, h])(s) = f(g(h(s)))`.
pub fn compose(fs: &[MonotoneFn]) -> MonotoneFn {
    match fs.len() {
        0 => MonotoneFn::identity(),
        1 => fs[0].clone(),
        _ => {
            let class = fs.iter().map(|f| f.class).min().unwrap_or(FnClass::Kinf);
            let label = fs
                .iter()
                .map(|f| format!("({})", f.label))
                .collect::<Vec<_>>()
                .join(" o ");
            MonotoneFn::from_repr(Repr::Compose(fs.to_vec()), class, label)
        }
    }
}

/// Outcome of integrating the comparison flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowValue {
    pub value: f64,
    /// The flow hit [`FLOW_CAP`] before the requested time.
    pub saturated: bool,
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(ComparisonError::Parameter {
            name: "theta",
            value: theta,
            expected: "0 < theta < 1",
        })
    }
}

/// Fixed-step RK4 integrator for `y' = rate * alpha(y)` with `alpha` of class P.
///
/// The state only moves forward in time. A negative `rate` gives the
/// decaying flow used for KL bounds; the state is then clamped at zero.
#[derive(Clone, Debug)]
pub struct FlowIntegrator {
    alpha: MonotoneFn,
    rate: f64,
    step: f64,
    t: f64,
    y: f64,
    saturated: bool,
}

impl FlowIntegrator {
    pub fn new(alpha: MonotoneFn, rate: f64, y0: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(ComparisonError::Step(step));
        }
        if y0 < 0.0 || y0.is_nan() {
            return Err(ComparisonError::Domain(y0));
        }
        Ok(Self {
            alpha,
            rate,
            step,
            t: 0.0,
            y: y0.min(FLOW_CAP),
            saturated: y0 >= FLOW_CAP,
        })
    }

    fn rhs(&self, y: f64) -> Result<f64> {
        Ok(self.rate * self.alpha.eval(y.max(0.0))?)
    }

    /// Advances to `t_target` using the largest uniform step not above `step`.
    pub fn advance_to(&mut self, t_target: f64) -> Result<FlowValue> {
        if t_target < self.t {
            return Err(ComparisonError::Domain(t_target));
        }
        let span = t_target - self.t;
        if span > 0.0 && !self.saturated {
            let n = (span / self.step).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for _ in 0..n {
                let y = self.y;
                let k1 = self.rhs(y)?;
                let k2 = self.rhs(y + 0.5 * h * k1)?;
                let k3 = self.rhs(y + 0.5 * h * k2)?;
                let k4 = self.rhs(y + h * k3)?;
                let next = (y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).max(0.0);
                if !next.is_finite() || next >= FLOW_CAP {
                    self.y = FLOW_CAP;
                    self.saturated = true;
                    break;
                }
                self.y = next;
            }
        }
        self.t = t_target;
        Ok(FlowValue {
            value: self.y,
            saturated: self.saturated,
        })
    }
}

/// Solution `α̃(s, t) = y(t)` of `y' = (1 − θ) α(y)`, `y(0) = s`, where the
/// caller supplies `alpha = α₃ ∘ α₁⁻¹`.
pub fn comparison_flow(alpha: &MonotoneFn, theta: f64, s: f64, t: f64, step: f64) -> Result<FlowValue> {
    check_theta(theta)?;
    if t < 0.0 {
        return Err(ComparisonError::Domain(t));
    }
    let mut flow = FlowIntegrator::new(alpha.clone(), 1.0 - theta, s, step)?;
    flow.advance_to(t)
}

/// Evaluates the comparison flow from one initial value at a nondecreasing
/// sequence of times, integrating once.
pub fn comparison_flow_series(
    alpha: &MonotoneFn,
    theta: f64,
    s: f64,
    times: &[f64],
    step: f64,
) -> Result<Vec<FlowValue>> {
    check_theta(theta)?;
    let mut flow = FlowIntegrator::new(alpha.clone(), 1.0 - theta, s, step)?;
    times.iter().map(|&t| flow.advance_to(t)).collect()
}

type PairMap = Arc<dyn Fn(f64, f64) -> Result<f64> + Send + Sync>;

/// A function of class KK: zero at the origin, strictly increasing in both arguments.
#[derive(Clone)]
pub struct KKFn {
    eval: PairMap,
    label: String,
}

impl fmt::Debug for KKFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KKFn({})", self.label)
    }
}

impl KKFn {
    pub fn new<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, f64) -> Result<f64> + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            label: label.into(),
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        if s < 0.0 || s.is_nan() {
            return Err(ComparisonError::Domain(s));
        }
        if t < 0.0 || t.is_nan() {
            return Err(ComparisonError::Domain(t));
        }
        (self.eval)(s, t)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// A function of class KL: class K in `s`, decreasing to zero in `t`.
#[derive(Clone)]
pub struct KLFn {
    eval: PairMap,
    label: String,
}

impl fmt::Debug for KLFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KLFn({})", self.label)
    }
}

impl KLFn {
    pub fn new<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, f64) -> Result<f64> + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            label: label.into(),
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        if s < 0.0 || s.is_nan() {
            return Err(ComparisonError::Domain(s));
        }
        if t < 0.0 || t.is_nan() {
            return Err(ComparisonError::Domain(t));
        }
        (self.eval)(s, t)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// The flow `α̃` packaged as a KK function.
pub fn comparison_flow_kk(alpha: MonotoneFn, theta: f64, step: f64) -> Result<KKFn> {
    check_theta(theta)?;
    if !(step > 0.0) {
        return Err(ComparisonError::Step(step));
    }
    let label = format!("flow[(1-{theta})*({})]", alpha.label());
    Ok(KKFn::new(label, move |s, t| {
        comparison_flow(&alpha, theta, s, t, step).map(|v| v.value)
    }))
}
