//! Compactly supported barrier, merged Lyapunov-barrier function and its
//! gradient feedback law.

use std::f64::consts::PI;
use std::io::{self, Write};

use thiserror::Error;

use crate::dynamics::FeedbackLaw;
use crate::field::ScalarField;
use crate::geometry::{GeometryError, Region};
use crate::linalg::{add, axpy, distance, dot, norm, scale, sub};

/// Default step of the path-integral quadrature.
pub const QUADRATURE_STEP: f64 = 1e-4;
const LEVEL_TOL: f64 = 1e-8;
const BOUNDARY_SAMPLES: usize = 64;

/// The outside constant is the continuous extension `G(−depth) = −depth/2`.
/// A literal `−depth` would make the barrier jump across the support boundary.
pub const OUTSIDE_VALUE_NOTE: &str =
    "outside the support the barrier equals G(-depth) = -depth/2, the continuous extension";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, MergeError>;

/// `G(b) = ½(b + (δ/π) sin(πb/δ))`, the antiderivative of `½(cos(πb/δ) + 1)` with `G(0) = 0`.
pub fn smooth_clamp(b: f64, depth: f64) -> f64 {
    0.5 * (b + depth / PI * (PI * b / depth).sin())
}

/// `G'(b) = ½(cos(πb/δ) + 1)`
pub fn smooth_clamp_slope(b: f64, depth: f64) -> f64 {
    0.5 * ((PI * b / depth).cos() + 1.0)
}

/// `B̃ = G(B)` inside the support, `G(−depth)` outside.
#[derive(Clone, Debug)]
pub struct CompactBarrier {
    pub base: ScalarField,
    pub unsafe_set: Region,
    pub support: Region,
    pub depth: f64,
    pub outside_value: f64,
    pub quadrature_step: f64,
}

/// Builds the compactly supported barrier.
///
/// Requires `B = 0` on ∂D and `B` constant (`= −depth < 0`) on ∂X, checked on
/// sampled boundary points. Those two facts make the closed form `G(B)` agree
/// with the path integral from ∂D for every path.
pub fn compact_support_transform(
    b: &ScalarField,
    unsafe_set: &Region,
    support: &Region,
    quadrature_step: f64,
) -> Result<CompactBarrier> {
    if !(quadrature_step > 0.0) {
        return Err(MergeError::Parameter(format!("quadrature step must be positive, got {quadrature_step}")));
    }
    unsafe_set.validate()?;
    support.validate()?;
    if unsafe_set.dim() != 2 || support.dim() != 2 || b.dim() != 2 {
        return Err(MergeError::UnsupportedShape("only planar sets are supported".into()));
    }
    for p in unsafe_set.boundary_samples(BOUNDARY_SAMPLES)? {
        let v = b.value(&p);
        if v.abs() > LEVEL_TOL {
            return Err(MergeError::UnsupportedShape(format!(
                "B = {v:e} at {p:?} on the unsafe-set boundary (must vanish)"
            )));
        }
    }
    let outer = support.boundary_samples(BOUNDARY_SAMPLES)?;
    let levels: Vec<f64> = outer.iter().map(|p| b.value(p)).collect();
    let depth = -levels.iter().sum::<f64>() / levels.len() as f64;
    if !(depth > 0.0) {
        return Err(MergeError::UnsupportedShape(format!("B on the support boundary is {}, must be negative", -depth)));
    }
    if let Some((p, v)) = outer
        .iter()
        .zip(&levels)
        .find(|(_, v)| (*v + depth).abs() > LEVEL_TOL * depth.max(1.0))
    {
        return Err(MergeError::UnsupportedShape(format!(
            "B is not constant on the support boundary: {v} at {p:?} vs mean {}",
            -depth
        )));
    }
    Ok(CompactBarrier {
        base: b.clone(),
        unsafe_set: unsafe_set.clone(),
        support: support.clone(),
        depth,
        outside_value: smooth_clamp(-depth, depth),
        quadrature_step,
    })
}

impl CompactBarrier {
    fn inside(&self, x: &[f64]) -> bool {
        self.support.contains(x).unwrap_or(false)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        if self.inside(x) {
            smooth_clamp(self.base.value(x), self.depth)
        } else {
            self.outside_value
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        if self.inside(x) {
            self.inner_gradient(x)
        } else {
            vec![0.0; x.len()]
        }
    }

    /// The inside formula `½(cos(πB/δ) + 1)∇B`, evaluated regardless of membership.
    pub fn inner_gradient(&self, x: &[f64]) -> Vec<f64> {
        scale(&self.base.gradient(x), smooth_clamp_slope(self.base.value(x), self.depth))
    }

    pub fn as_field(&self) -> ScalarField {
        let (a, b) = (self.clone(), self.clone());
        ScalarField::analytic(
            2,
            format!("compact barrier of {} (depth {})", self.base.description(), self.depth),
            move |x| a.value(x),
            move |x| b.gradient(x),
        )
    }

    /// Nearest point of ∂D to `x` (centre-ray projection onto the nearest disk).
    pub fn anchor(&self, x: &[f64]) -> Result<Vec<f64>> {
        let balls = self.unsafe_set.balls();
        let best = balls
            .iter()
            .min_by(|a, b| {
                (distance(x, &a.center) - a.radius)
                    .abs()
                    .total_cmp(&(distance(x, &b.center) - b.radius).abs())
            })
            .ok_or_else(|| MergeError::UnsupportedShape("unsafe set has no disks".into()))?;
        let off = sub(x, &best.center);
        let r = norm(&off);
        if r == 0.0 {
            return Ok(add(&best.center, &{
                let mut e = vec![0.0; x.len()];
                e[0] = best.radius;
                e
            }));
        }
        Ok(axpy(&best.center, best.radius / r, &off))
    }

    /// `B(ω) + ∫_Γ ½(cos(πB/δ) + 1) ∇B · dσ` along the straight segment from
    /// `from` (a point of ∂D) to `x`, by composite Simpson with the configured step.
    pub fn path_integral_from(&self, from: &[f64], x: &[f64]) -> f64 {
        let dir = sub(x, from);
        let len = norm(&dir);
        let mut n = (len / self.quadrature_step).ceil().max(2.0) as usize;
        if n % 2 == 1 {
            n += 1;
        }
        let integrand = |tau: f64| {
            let p = axpy(from, tau, &dir);
            smooth_clamp_slope(self.base.value(&p), self.depth) * dot(&self.base.gradient(&p), &dir)
        };
        let h = 1.0 / n as f64;
        let mut acc = integrand(0.0) + integrand(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(i as f64 * h);
        }
        self.base.value(from) + acc * h / 3.0
    }

    /// Path integral along the radial segment from the nearest point of ∂D.
    /// `None` outside the support, where the barrier is the constant extension.
    pub fn path_integral(&self, x: &[f64]) -> Result<Option<f64>> {
        if !self.inside(x) {
            return Ok(None);
        }
        let w = self.anchor(x)?;
        Ok(Some(self.path_integral_from(&w, x)))
    }
}

/// `W = V + k1·B̃ + k2`.
#[derive(Clone, Debug)]
pub struct MergedFunction {
    pub v_part: ScalarField,
    pub b_part: CompactBarrier,
    pub k1: f64,
    pub k2: f64,
}

/// `k1 = 0` is allowed and reduces W to the shifted Lyapunov function.
pub fn merged_w(v: &ScalarField, bt: &CompactBarrier, k1: f64, k2: f64) -> Result<MergedFunction> {
    if !(k1 >= 0.0 && k1.is_finite()) {
        return Err(MergeError::Parameter(format!("k1 must be finite and >= 0, got {k1}")));
    }
    if !k2.is_finite() {
        return Err(MergeError::Parameter(format!("k2 must be finite, got {k2}")));
    }
    Ok(MergedFunction {
        v_part: v.clone(),
        b_part: bt.clone(),
        k1,
        k2,
    })
}

impl MergedFunction {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.v_part.value(x) + self.k1 * self.b_part.value(x) + self.k2
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        axpy(&self.v_part.gradient(x), self.k1, &self.b_part.gradient(x))
    }

    pub fn as_field(&self) -> ScalarField {
        let (a, b) = (self.clone(), self.clone());
        ScalarField::analytic(
            2,
            format!("W = V + {}*Bt + {}", self.k1, self.k2),
            move |x| a.value(x),
            move |x| b.gradient(x),
        )
    }

    /// Difference between the inside and outside branch formulas of the law at `x`.
    pub fn branch_mismatch(&self, x: &[f64]) -> f64 {
        self.k1 * norm(&self.b_part.inner_gradient(x))
    }
}

/// `v = −∇W`: `−∇V − k1∇B̃` inside the support, `−∇V` outside.
pub fn gradient_control(w: &MergedFunction) -> FeedbackLaw {
    let (law, jump) = (w.clone(), w.clone());
    FeedbackLaw::new(format!("v = -grad W (k1 = {}, k2 = {})", w.k1, w.k2), move |x| {
        let gv = law.v_part.gradient(x);
        let g = if law.b_part.inside(x) {
            axpy(&gv, law.k1, &law.b_part.inner_gradient(x))
        } else {
            gv
        };
        scale(&g, -1.0)
    })
    .with_branch_jump(move |x| jump.branch_mismatch(x))
}

/// Dense planar grid dump with header `x1,x2,value`.
pub fn write_grid_csv<W: Write>(
    mut out: W,
    f: &dyn Fn(&[f64]) -> f64,
    bounds: [(f64, f64); 2],
    resolution: usize,
) -> io::Result<()> {
    writeln!(out, "x1,x2,value")?;
    let r = resolution.max(2);
    let at = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (r - 1) as f64;
    for i in 0..r {
        for j in 0..r {
            let p = [at(bounds[0], i), at(bounds[1], j)];
            writeln!(out, "{},{},{}", p[0], p[1], f(&p))?;
        }
    }
    Ok(())
}
