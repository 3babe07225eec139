//! Grid-based falsification of Lyapunov and barrier inequalities.
//!
//! Every check is a list of [`ConditionFamily`] values. A family maps a state
//! to an affine-in-input margin `base − lin·v + supply(‖v‖)`; the inequality
//! holds at `(ξ, v)` when the margin is `≥ 0` (or `> 0` for strict families).
//! Families are public so a witness can be re-evaluated on its own.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{ComparisonError, FnClass, FnDecl, MonotoneFn, KINF_HORIZON};
use crate::dynamics::ControlAffineSystem;
use crate::field::{GradientMismatch, ScalarField, GRADIENT_TOL};
use crate::geometry::{GeometryError, Region, SafetyGeometry};
use crate::linalg::{dot, lex_cmp, mat_t_vec, norm};

/// Points closer than this to the unsafe set are skipped by distance-denominated bounds.
pub const D_EXCLUSION: f64 = 1e-9;
/// `|B| ≤ LEVEL_BAND` stands in for the zero level set.
pub const LEVEL_BAND: f64 = 1e-2;
/// Relative slack applied by [`fit_envelope`].
pub const ENVELOPE_SAFETY: f64 = 1e-6;
/// Gradient cross-check sample count and seed.
pub const GRADIENT_SAMPLES: usize = 1000;
pub const GRADIENT_SEED: u64 = 0x5eed;

const UNBOUNDED_NOTE: &str =
    "bounds required on an unbounded set were checked on the grid window only";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertError {
    #[error("grid: {0}")]
    Grid(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("gradient cross-check aborted the check: {0}")]
    Gradient(#[from] GradientMismatch),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, CertError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
    /// Inputs tried at every point. Empty means the autonomous part only.
    #[serde(default)]
    pub input_samples: Vec<Vec<f64>>,
    #[serde(default)]
    pub exclusion: Option<Region>,
}

impl GridSpec {
    pub fn new(bounds: Vec<(f64, f64)>, resolution: usize) -> Self {
        Self {
            bounds,
            resolution,
            input_samples: Vec::new(),
            exclusion: None,
        }
    }

    pub fn with_inputs(mut self, inputs: Vec<Vec<f64>>) -> Self {
        self.input_samples = inputs;
        self
    }

    pub fn excluding(mut self, region: Region) -> Self {
        self.exclusion = Some(region);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(CertError::Grid(format!("resolution must be >= 2, got {}", self.resolution)));
        }
        if self.bounds.is_empty() {
            return Err(CertError::Grid("bounds are empty".into()));
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(CertError::Grid(format!("bounds[{i}] = ({lo}, {hi}) is not a proper interval")));
            }
        }
        if let Some(dim) = self.input_samples.first().map(Vec::len) {
            if self.input_samples.iter().any(|v| v.len() != dim) {
                return Err(CertError::Grid("input samples have mixed dimensions".into()));
            }
        }
        Ok(())
    }

    pub fn point_count(&self) -> usize {
        self.resolution.pow(self.bounds.len() as u32)
    }

    /// The `index`-th grid point, first coordinate varying slowest.
    pub fn point(&self, mut index: usize) -> Vec<f64> {
        let r = self.resolution;
        let mut p = vec![0.0; self.bounds.len()];
        for (k, &(lo, hi)) in self.bounds.iter().enumerate().rev() {
            let i = index % r;
            index /= r;
            p[k] = if i == r - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (r - 1) as f64
            };
        }
        p
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.point_count()).map(|i| self.point(i))
    }
}

/// Inputs covering the ball of radius `radius`: the origin plus, for each of
/// `levels` norms, `directions` unit vectors (planar) or `±e_i` (other dimensions).
pub fn ball_input_samples(dim: usize, radius: f64, directions: usize, levels: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]];
    for l in 1..=levels {
        let r = radius * l as f64 / levels as f64;
        if dim == 2 {
            for k in 0..directions {
                let a = std::f64::consts::TAU * k as f64 / directions as f64;
                out.push(vec![r * a.cos(), r * a.sin()]);
            }
        } else {
            for i in 0..dim {
                for s in [1.0, -1.0] {
                    let mut v = vec![0.0; dim];
                    v[i] = s * r;
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Relative round-off allowed on non-strict inequalities, scaled by the
/// magnitudes of the compared terms.
pub const ROUNDOFF: f64 = 1e-12;

/// Margin value with the magnitude of the terms that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margin {
    pub value: f64,
    pub scale: f64,
}

/// Margin at one state, as a function of the input:
/// `Σ terms − lin·v + supply(‖v‖)`.
#[derive(Clone, Debug)]
pub struct AffineMargin {
    pub base: f64,
    pub base_scale: f64,
    /// Empty for input-free conditions.
    pub lin: Vec<f64>,
    pub supply: Option<MonotoneFn>,
}

impl AffineMargin {
    pub fn state(terms: &[f64]) -> Self {
        Self::affine(terms, Vec::new(), None)
    }

    pub fn affine(terms: &[f64], lin: Vec<f64>, supply: Option<MonotoneFn>) -> Self {
        Self {
            base: terms.iter().sum(),
            base_scale: terms.iter().map(|t| t.abs()).sum(),
            lin,
            supply,
        }
    }

    pub fn at(&self, v: &[f64]) -> Result<Margin> {
        let mut m = Margin {
            value: self.base,
            scale: self.base_scale,
        };
        if !self.lin.is_empty() && !v.is_empty() {
            let p = dot(&self.lin, v);
            m.value -= p;
            m.scale += p.abs();
        }
        if let Some(s) = &self.supply {
            let y = s.eval(norm(v))?;
            m.value += y;
            m.scale += y.abs();
        }
        Ok(m)
    }
}

type PointFn = Arc<dyn Fn(&[f64]) -> Result<Option<AffineMargin>> + Send + Sync>;

/// One inequality family with its domain.
#[derive(Clone)]
pub struct ConditionFamily {
    pub id: String,
    pub description: String,
    pub strict: bool,
    pub uses_input: bool,
    point: PointFn,
}

impl std::fmt::Debug for ConditionFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ConditionFamily({}: {})", self.id, self.description)
    }
}

impl ConditionFamily {
    pub fn new<F>(id: &str, description: &str, strict: bool, uses_input: bool, point: F) -> Self
    where
        F: Fn(&[f64]) -> Result<Option<AffineMargin>> + Send + Sync + 'static,
    {
        Self {
            id: id.to_string(),
            description: description.to_string(),
            strict,
            uses_input,
            point: Arc::new(point),
        }
    }

    /// `None` when `x` lies outside the family's domain.
    pub fn affine(&self, x: &[f64]) -> Result<Option<AffineMargin>> {
        (self.point)(x)
    }

    pub fn margin(&self, x: &[f64], v: &[f64]) -> Result<Option<Margin>> {
        match self.affine(x)? {
            Some(a) => a.at(v).map(Some),
            None => Ok(None),
        }
    }

    pub fn holds(&self, m: Margin) -> bool {
        if self.strict {
            m.value > 0.0
        } else {
            m.value >= -ROUNDOFF * m.scale
        }
    }

    /// Standalone re-evaluation: true when `(x, v)` is in the domain and violates the inequality.
    pub fn violated(&self, x: &[f64], v: &[f64]) -> Result<bool> {
        Ok(matches!(self.margin(x, v)?, Some(m) if !self.holds(m)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub id: String,
    pub description: String,
    pub verdict: Verdict,
    pub worst_margin: f64,
    pub witness_point: Option<Vec<f64>>,
    pub witness_input: Option<Vec<f64>>,
    pub checked_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub condition_id: String,
    pub verdict: Verdict,
    pub worst_margin: f64,
    /// The failing family with the smallest margin, or the tightest family on a pass.
    pub witness_family: Option<String>,
    pub witness_point: Option<Vec<f64>>,
    pub witness_input: Option<Vec<f64>>,
    pub checked_count: usize,
    pub families: Vec<FamilyReport>,
    pub window: Vec<(f64, f64)>,
    pub resolution: usize,
    pub notes: Vec<String>,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn family(&self, id: &str) -> Option<&FamilyReport> {
        self.families.iter().find(|f| f.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Fixed-width text table, one row per family.
pub fn summary_table(reports: &[CertificateReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:<24} {:<7} {:>14} {:>10}  witness",
        "condition", "family", "verdict", "worst_margin", "checked"
    );
    for r in reports {
        for f in &r.families {
            let w = f
                .witness_point
                .as_ref()
                .map(|p| format!("{p:.4?}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<22} {:<24} {:<7} {:>14.6e} {:>10}  {}",
                r.condition_id,
                f.id,
                match f.verdict {
                    Verdict::Pass => "pass",
                    Verdict::Fail => "FAIL",
                },
                f.worst_margin,
                f.checked_count,
                w
            );
        }
    }
    s
}

#[derive(Clone, Debug)]
struct Best {
    margin: f64,
    point: Vec<f64>,
    input: Option<Vec<f64>>,
}

impl Best {
    /// Smaller margin wins, NaN counts as worst, ties go to the
    /// lexicographically smaller witness.
    fn beats(&self, other: &Best) -> bool {
        match (self.margin.is_nan(), other.margin.is_nan()) {
            (true, false) => return true,
            (false, true) => return false,
            _ => {}
        }
        match self.margin.partial_cmp(&other.margin).unwrap_or(Ordering::Equal) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => {
                let empty = Vec::new();
                lex_cmp(&self.point, &other.point)
                    .then_with(|| {
                        lex_cmp(
                            self.input.as_ref().unwrap_or(&empty),
                            other.input.as_ref().unwrap_or(&empty),
                        )
                    })
                    == Ordering::Less
            }
        }
    }
}

fn pick(a: Option<Best>, b: Option<Best>) -> Option<Best> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.beats(&a) { b } else { a }),
        (a, b) => a.or(b),
    }
}

#[derive(Clone, Debug, Default)]
struct Acc {
    worst: Option<Best>,
    worst_violation: Option<Best>,
    count: usize,
    violations: usize,
}

impl Acc {
    fn merge(self, other: Acc) -> Acc {
        Acc {
            worst: pick(self.worst, other.worst),
            worst_violation: pick(self.worst_violation, other.worst_violation),
            count: self.count + other.count,
            violations: self.violations + other.violations,
        }
    }

    fn offer(&mut self, fam: &ConditionFamily, m: Margin, point: &[f64], input: Option<&[f64]>) {
        self.count += 1;
        let cand = || {
            Some(Best {
                margin: m.value,
                point: point.to_vec(),
                input: input.map(<[f64]>::to_vec),
            })
        };
        if !fam.holds(m) {
            self.violations += 1;
            self.worst_violation = pick(self.worst_violation.take(), cand());
        }
        let replaces = self.worst.as_ref().is_none_or(|w| !(m.value > w.margin));
        if replaces {
            self.worst = pick(self.worst.take(), cand());
        }
    }
}

/// Inputs to try for one affine margin: the declared samples, plus for each
/// distinct sample norm the input aligned with `lin` (the exact worst case on
/// that sphere).
fn inputs_for(aff: &AffineMargin, samples: &[Vec<f64>], dim_u: usize) -> Vec<Vec<f64>> {
    if samples.is_empty() {
        return vec![vec![0.0; dim_u]];
    }
    let mut out = samples.to_vec();
    let ln = norm(&aff.lin);
    if ln > 0.0 {
        let mut norms: Vec<f64> = samples.iter().map(|v| norm(v)).filter(|r| *r > 0.0).collect();
        norms.sort_by(f64::total_cmp);
        norms.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        for r in norms {
            out.push(aff.lin.iter().map(|c| c * r / ln).collect());
        }
    }
    out
}

/// Evaluates every family on the grid in parallel.
pub fn run_families(
    condition_id: &str,
    families: &[ConditionFamily],
    grid: &GridSpec,
    dim_u: usize,
    mut notes: Vec<String>,
) -> Result<CertificateReport> {
    grid.validate()?;
    let n_fam = families.len();
    let accs: Vec<Acc> = (0..grid.point_count())
        .into_par_iter()
        .try_fold(
            || vec![Acc::default(); n_fam],
            |mut accs, idx| -> Result<Vec<Acc>> {
                let x = grid.point(idx);
                if let Some(ex) = &grid.exclusion {
                    if ex.contains(&x)? {
                        return Ok(accs);
                    }
                }
                for (fam, acc) in families.iter().zip(accs.iter_mut()) {
                    let Some(aff) = fam.affine(&x)? else { continue };
                    if fam.uses_input {
                        for v in inputs_for(&aff, &grid.input_samples, dim_u) {
                            let m = aff.at(&v)?;
                            acc.offer(fam, m, &x, Some(&v));
                        }
                    } else {
                        let m = aff.at(&[])?;
                        acc.offer(fam, m, &x, None);
                    }
                }
                Ok(accs)
            },
        )
        .try_reduce(
            || vec![Acc::default(); n_fam],
            |a, b| Ok(a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect()),
        )?;

    let mut reports = Vec::with_capacity(n_fam);
    for (fam, acc) in families.iter().zip(accs) {
        if acc.count == 0 {
            notes.push(format!("{}: no grid point fell in the domain (vacuous pass)", fam.id));
        }
        let fail = acc.violations > 0;
        if fail {
            notes.push(format!("{}: {} of {} evaluations violate the inequality", fam.id, acc.violations, acc.count));
        }
        let shown = if fail { acc.worst_violation } else { acc.worst };
        reports.push(FamilyReport {
            id: fam.id.clone(),
            description: fam.description.clone(),
            verdict: if fail { Verdict::Fail } else { Verdict::Pass },
            worst_margin: shown.as_ref().map_or(f64::INFINITY, |b| b.margin),
            witness_point: shown.as_ref().map(|b| b.point.clone()),
            witness_input: shown.and_then(|b| b.input),
            checked_count: acc.count,
        });
    }
    let verdict = if reports.iter().all(|r| r.verdict == Verdict::Pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let key = reports
        .iter()
        .filter(|r| r.checked_count > 0 && (verdict == Verdict::Pass || r.verdict == Verdict::Fail))
        .min_by(|a, b| a.worst_margin.total_cmp(&b.worst_margin));
    Ok(CertificateReport {
        condition_id: condition_id.to_string(),
        verdict,
        worst_margin: reports.iter().map(|r| r.worst_margin).fold(f64::INFINITY, f64::min),
        witness_family: key.map(|r| r.id.clone()),
        witness_point: key.and_then(|r| r.witness_point.clone()),
        witness_input: key.and_then(|r| r.witness_input.clone()),
        checked_count: reports.iter().map(|r| r.checked_count).sum(),
        families: reports,
        window: grid.bounds.clone(),
        resolution: grid.resolution,
        notes,
    })
}

fn gradient_guard(fields: &[&ScalarField], grid: &GridSpec) -> Result<()> {
    for f in fields {
        f.check_gradient(&grid.bounds, GRADIENT_SAMPLES, GRADIENT_SEED, GRADIENT_TOL)?;
    }
    Ok(())
}

fn require_class(fs: &[&MonotoneFn], class: FnClass) -> Result<()> {
    for f in fs {
        f.validate(class, KINF_HORIZON)
            .map_err(|e| CertError::Precondition(e.to_string()))?;
    }
    Ok(())
}

fn check_dims(sys: &ControlAffineSystem, grid: &GridSpec) -> Result<()> {
    if grid.bounds.len() != sys.dim_x {
        return Err(CertError::Grid(format!(
            "grid has {} dimensions, system has {}",
            grid.bounds.len(),
            sys.dim_x
        )));
    }
    if grid.input_samples.first().is_some_and(|v| v.len() != sys.dim_u) {
        return Err(CertError::Grid("input samples do not match the input dimension".into()));
    }
    Ok(())
}

/// `(∇F·f, gᵀ∇F)` at `x`.
fn lie_parts(field: &ScalarField, sys: &ControlAffineSystem, x: &[f64]) -> (f64, Vec<f64>) {
    let grad = field.gradient(x);
    let lf = dot(&grad, &sys.drift(x));
    let lg = if sys.dim_u > 0 {
        mat_t_vec(&sys.gain(x), sys.dim_x, sys.dim_u, &grad)
    } else {
        Vec::new()
    };
    (lf, lg)
}

pub fn iss_lyapunov_families(
    v: &ScalarField,
    sys: &ControlAffineSystem,
    a1: &MonotoneFn,
    a2: &MonotoneFn,
    a3: &MonotoneFn,
    gamma: &MonotoneFn,
) -> Vec<ConditionFamily> {
    let (v1, a1) = (v.clone(), a1.clone());
    let (v2, a2) = (v.clone(), a2.clone());
    let (v3, s3, a3, gamma) = (v.clone(), sys.clone(), a3.clone(), gamma.clone());
    vec![
        ConditionFamily::new("lower", "a1(|x|) <= V(x)", false, false, move |x| {
            Ok(Some(AffineMargin::state(&[v1.value(x), -a1.eval(norm(x))?])))
        }),
        ConditionFamily::new("upper", "V(x) <= a2(|x|)", false, false, move |x| {
            Ok(Some(AffineMargin::state(&[a2.eval(norm(x))?, -v2.value(x)])))
        }),
        ConditionFamily::new(
            "dissipation",
            "dV.(f + g v) <= -a3(|x|) + gamma(|v|)",
            false,
            true,
            move |x| {
                let (lf, lg) = lie_parts(&v3, &s3, x);
                Ok(Some(AffineMargin::affine(&[-a3.eval(norm(x))?, -lf], lg, Some(gamma.clone()))))
            },
        ),
    ]
}

/// ISS Lyapunov sandwich and dissipation inequality.
pub fn check_iss_lyapunov(
    v: &ScalarField,
    sys: &ControlAffineSystem,
    a1: &MonotoneFn,
    a2: &MonotoneFn,
    a3: &MonotoneFn,
    gamma: &MonotoneFn,
    grid: &GridSpec,
) -> Result<CertificateReport> {
    check_dims(sys, grid)?;
    gradient_guard(&[v], grid)?;
    let fams = iss_lyapunov_families(v, sys, a1, a2, a3, gamma);
    let mut notes = vec![UNBOUNDED_NOTE.to_string()];
    if grid.input_samples.is_empty() {
        notes.push("no input samples: autonomous part only".into());
    }
    run_families("iss_lyapunov", &fams, grid, sys.dim_u, notes)
}

pub fn barrier_certificate_families(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    unsafe_set: &Region,
    initial: &Region,
) -> Vec<ConditionFamily> {
    let (b1, d1) = (b.clone(), unsafe_set.clone());
    let (b2, x0) = (b.clone(), initial.clone());
    let (b3, s3) = (b.clone(), sys.clone());
    vec![
        ConditionFamily::new("unsafe_positive", "B > 0 on D", true, false, move |x| {
            Ok(d1.contains(x)?.then(|| AffineMargin::state(&[b1.value(x)])))
        }),
        ConditionFamily::new("initial_negative", "B < 0 on X0", true, false, move |x| {
            Ok(x0.contains(x)?.then(|| AffineMargin::state(&[-b2.value(x)])))
        }),
        ConditionFamily::new("level_set_flow", "dB.f <= 0 where |B| <= band", false, false, move |x| {
            if b3.value(x).abs() > LEVEL_BAND {
                return Ok(None);
            }
            let (lf, _) = lie_parts(&b3, &s3, x);
            Ok(Some(AffineMargin::state(&[-lf])))
        }),
    ]
}

/// Barrier certificate for an autonomous system (feedback already folded into the drift).
pub fn check_barrier_certificate(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    unsafe_set: &Region,
    initial: &Region,
    grid: &GridSpec,
) -> Result<CertificateReport> {
    check_dims(sys, grid)?;
    gradient_guard(&[b], grid)?;
    let fams = barrier_certificate_families(b, sys, unsafe_set, initial);
    let notes = vec![format!("zero level set approximated by |B| <= {LEVEL_BAND}")];
    run_families("barrier_certificate", &fams, grid, sys.dim_u, notes)
}

pub fn strict_barrier_families(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    unsafe_set: &Region,
    alpha: &MonotoneFn,
    within: Option<&Region>,
) -> Vec<ConditionFamily> {
    let (b, sys, d, alpha) = (b.clone(), sys.clone(), unsafe_set.clone(), alpha.clone());
    let within = within.cloned();
    vec![ConditionFamily::new(
        "strict_decrease",
        "dB.f <= -alpha(|x|_D) off D",
        false,
        false,
        move |x| {
            if let Some(w) = &within {
                if !w.contains(x)? {
                    return Ok(None);
                }
            }
            let dist = d.distance(x)?;
            if dist < D_EXCLUSION {
                return Ok(None);
            }
            let (lf, _) = lie_parts(&b, &sys, x);
            Ok(Some(AffineMargin::state(&[-alpha.eval(dist)?, -lf])))
        },
    )]
}

/// Strict barrier decrease, optionally restricted to `within`.
pub fn check_strict_barrier(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    unsafe_set: &Region,
    alpha: &MonotoneFn,
    within: Option<&Region>,
    grid: &GridSpec,
) -> Result<CertificateReport> {
    require_class(&[alpha], FnClass::K)?;
    check_dims(sys, grid)?;
    gradient_guard(&[b], grid)?;
    let fams = strict_barrier_families(b, sys, unsafe_set, alpha, within);
    run_families("strict_barrier", &fams, grid, sys.dim_u, Vec::new())
}

pub fn robust_barrier_families(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    within: Option<&Region>,
) -> Vec<ConditionFamily> {
    let (b, sys) = (b.clone(), sys.clone());
    let within = within.cloned();
    vec![ConditionFamily::new(
        "robust_decrease",
        "dB.(f + g v) <= 0 for all v in U",
        false,
        true,
        move |x| {
            if let Some(w) = &within {
                if !w.contains(x)? {
                    return Ok(None);
                }
            }
            let (lf, lg) = lie_parts(&b, &sys, x);
            Ok(Some(AffineMargin::affine(&[-lf], lg, None)))
        },
    )]
}

/// Input-robust barrier decrease over `within × U` (whole grid when `within` is `None`).
pub fn check_robust_barrier(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    within: Option<&Region>,
    grid: &GridSpec,
) -> Result<CertificateReport> {
    check_dims(sys, grid)?;
    gradient_guard(&[b], grid)?;
    let fams = robust_barrier_families(b, sys, within);
    run_families("robust_barrier", &fams, grid, sys.dim_u, Vec::new())
}

pub fn issf_barrier_families(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    geom: &SafetyGeometry,
    alphas: [&MonotoneFn; 4],
) -> Vec<ConditionFamily> {
    let [a1, a2, a3, a4] = alphas.map(Clone::clone);
    let (b1, g1) = (b.clone(), geom.clone());
    let (b2, g2) = (b.clone(), geom.clone());
    let (b3, g3, s3) = (b.clone(), geom.clone(), sys.clone());
    vec![
        ConditionFamily::new("lower", "-a1(|x|_D) <= B off D", false, false, move |x| {
            let d = g1.dist_to_unsafe(x);
            if d < D_EXCLUSION {
                return Ok(None);
            }
            Ok(Some(AffineMargin::state(&[b1.value(x), a1.eval(d)?])))
        }),
        ConditionFamily::new("upper", "B <= -a2(|x|_D) off D", false, false, move |x| {
            let d = g2.dist_to_unsafe(x);
            if d < D_EXCLUSION {
                return Ok(None);
            }
            Ok(Some(AffineMargin::state(&[-a2.eval(d)?, -b2.value(x)])))
        }),
        ConditionFamily::new(
            "dissipation",
            "dB.(f + g v) <= -a3(|x|_D) + a4(|v|) on X minus D",
            false,
            true,
            move |x| {
                let d = g3.dist_to_unsafe(x);
                if d < D_EXCLUSION || !g3.in_locality(x) {
                    return Ok(None);
                }
                let (lf, lg) = lie_parts(&b3, &s3, x);
                Ok(Some(AffineMargin::affine(&[-a3.eval(d)?, -lf], lg, Some(a4.clone()))))
            },
        ),
    ]
}

/// ISSf barrier sandwich (off D) and dissipation (on X minus D).
pub fn check_issf_barrier(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    geom: &SafetyGeometry,
    alphas: [&MonotoneFn; 4],
    grid: &GridSpec,
) -> Result<CertificateReport> {
    require_class(&alphas, FnClass::Kinf)?;
    check_dims(sys, grid)?;
    gradient_guard(&[b], grid)?;
    let fams = issf_barrier_families(b, sys, geom, alphas);
    run_families("issf_barrier", &fams, grid, sys.dim_u, vec![UNBOUNDED_NOTE.to_string()])
}

pub fn merged_w_families(
    w: &ScalarField,
    sys: &ControlAffineSystem,
    geom: &SafetyGeometry,
    c: f64,
    alphas: [&MonotoneFn; 7],
) -> Vec<ConditionFamily> {
    let [a1, a2, a3, a4, a5, a6, a7] = alphas.map(Clone::clone);
    let (w1, w2) = (w.clone(), w.clone());
    let (w3, g3) = (w.clone(), geom.clone());
    let (w4, g4) = (w.clone(), geom.clone());
    let (w5, g5, s5) = (w.clone(), geom.clone(), sys.clone());
    let off_d_in_x = |g: &SafetyGeometry, x: &[f64]| {
        let d = g.dist_to_unsafe(x);
        (d >= D_EXCLUSION && g.in_locality(x)).then_some(d)
    };
    vec![
        ConditionFamily::new("lower", "a1(|x|) <= W", false, false, move |x| {
            Ok(Some(AffineMargin::state(&[w1.value(x), -a1.eval(norm(x))?])))
        }),
        ConditionFamily::new("upper", "W <= a2(|x|)", false, false, move |x| {
            Ok(Some(AffineMargin::state(&[a2.eval(norm(x))?, -w2.value(x)])))
        }),
        ConditionFamily::new("shift_lower", "-a3(|x|_D) <= W - c on X minus D", false, false, move |x| {
            let Some(d) = off_d_in_x(&g3, x) else { return Ok(None) };
            Ok(Some(AffineMargin::state(&[w3.value(x), -c, a3.eval(d)?])))
        }),
        ConditionFamily::new("shift_upper", "W - c <= -a4(|x|_D) on X minus D", false, false, move |x| {
            let Some(d) = off_d_in_x(&g4, x) else { return Ok(None) };
            Ok(Some(AffineMargin::state(&[c, -w4.value(x), -a4.eval(d)?])))
        }),
        ConditionFamily::new(
            "dissipation",
            "dW.(f + g v) <= -a5(|x|) - 1_X a6(|x|_D) + a7(|v|)",
            false,
            true,
            move |x| {
                let d = g5.dist_to_unsafe(x);
                let local = if g5.in_locality(x) { a6.eval(d)? } else { 0.0 };
                let (lf, lg) = lie_parts(&w5, &s5, x);
                Ok(Some(AffineMargin::affine(
                    &[-a5.eval(norm(x))?, -local, -lf],
                    lg,
                    Some(a7.clone()),
                )))
            },
        ),
    ]
}

/// Merged Lyapunov-barrier conditions: global sandwich, shifted sandwich on
/// X minus D, and the combined dissipation inequality.
pub fn check_merged_w(
    w: &ScalarField,
    sys: &ControlAffineSystem,
    geom: &SafetyGeometry,
    c: f64,
    alphas: [&MonotoneFn; 7],
    grid: &GridSpec,
) -> Result<CertificateReport> {
    if !(c > 0.0) {
        return Err(CertError::Precondition(format!("shift c must be positive, got {c}")));
    }
    require_class(&alphas, FnClass::Kinf)?;
    check_dims(sys, grid)?;
    gradient_guard(&[w], grid)?;
    let fams = merged_w_families(w, sys, geom, c, alphas);
    let notes = vec![UNBOUNDED_NOTE.to_string(), format!("shift c = {c}")];
    run_families("merged_w", &fams, grid, sys.dim_u, notes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeShape {
    Linear,
    Quadratic,
    /// `a s + b s³`
    PolyOdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeSide {
    /// `α(s) ≤ y` at every sample.
    Lower,
    /// `α(s) ≥ y` at every sample.
    Upper,
}

#[derive(Clone, Debug)]
pub struct FittedEnvelope {
    pub decl: FnDecl,
    pub func: MonotoneFn,
    /// Set when a coefficient had to be clamped to stay class K∞.
    pub note: Option<String>,
}

const DEGENERATE_COEF: f64 = 1e-12;

/// Proposes a K∞ bound from `(s, y)` samples. Samples with `s ≤ 0` are ignored.
///
/// Coefficients are extreme ratios over the samples, then shrunk (lower) or
/// grown (upper) by `safety`. A lower bound that cannot be positive is clamped
/// to a tiny coefficient and the clamp is reported in `note`; the result then
/// fails re-certification rather than silently passing.
pub fn fit_envelope(samples: &[(f64, f64)], shape: EnvelopeShape, side: EnvelopeSide, safety: f64) -> FittedEnvelope {
    let pts: Vec<(f64, f64)> = samples.iter().copied().filter(|&(s, y)| s > 0.0 && y.is_finite()).collect();
    let lower = side == EnvelopeSide::Lower;
    let extreme = |it: &mut dyn Iterator<Item = f64>| -> f64 {
        if lower {
            it.fold(f64::INFINITY, f64::min)
        } else {
            it.fold(f64::NEG_INFINITY, f64::max)
        }
    };
    let grow = if lower { 1.0 - safety } else { 1.0 + safety };
    let mut notes = Vec::new();
    let mut fix = |name: &str, v: f64| -> f64 {
        let v = v * grow;
        if v.is_finite() && v > 0.0 {
            v
        } else {
            notes.push(format!("{name} = {v:e} clamped to {DEGENERATE_COEF:e}"));
            DEGENERATE_COEF
        }
    };
    let decl = match shape {
        EnvelopeShape::Linear => FnDecl::Linear {
            c: fix("c", extreme(&mut pts.iter().map(|&(s, y)| y / s))),
        },
        EnvelopeShape::Quadratic => FnDecl::Power {
            p: 2.0,
            c: fix("c", extreme(&mut pts.iter().map(|&(s, y)| y / (s * s)))),
        },
        EnvelopeShape::PolyOdd => {
            let (a, b) = if lower {
                let a = extreme(&mut pts.iter().map(|&(s, y)| y / s));
                let b = pts.iter().map(|&(s, y)| (y - a * s) / s.powi(3)).fold(f64::INFINITY, f64::min);
                (a, b.max(0.0))
            } else {
                // Slope from the small-argument samples, cubic term covers the rest.
                let small: Vec<_> = pts.iter().filter(|p| p.0 <= 1.0).collect();
                let a = if small.is_empty() {
                    DEGENERATE_COEF
                } else {
                    small.iter().map(|&&(s, y)| y / s).fold(f64::NEG_INFINITY, f64::max)
                };
                let b = pts.iter().map(|&(s, y)| (y - a * s) / s.powi(3)).fold(0.0, f64::max);
                (a, b)
            };
            let a = fix("a", a);
            let b = if b > 0.0 { b * grow } else { 0.0 };
            FnDecl::PolyOdd { a, b }
        }
    };
    let side_label = if lower { "lower" } else { "upper" };
    let func = decl
        .build()
        .expect("fitted coefficients are positive")
        .with_label(format!("fitted {side_label} {decl:?}"));
    FittedEnvelope {
        decl,
        func,
        note: (!notes.is_empty()).then(|| notes.join("; ")),
    }
}

fn grid_samples<T, F>(grid: &GridSpec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f64]) -> Option<T> + Send + Sync,
{
    (0..grid.point_count())
        .into_par_iter()
        .filter_map(|i| {
            let x = grid.point(i);
            if let Some(ex) = &grid.exclusion {
                if ex.contains(&x).unwrap_or(false) {
                    return None;
                }
            }
            f(&x)
        })
        .collect()
}

/// Shapes used when fitting ISSf barrier envelopes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssfShapes {
    pub a1: EnvelopeShape,
    pub a2: EnvelopeShape,
    pub a3: EnvelopeShape,
}

impl Default for IssfShapes {
    fn default() -> Self {
        Self {
            a1: EnvelopeShape::PolyOdd,
            a2: EnvelopeShape::Linear,
            a3: EnvelopeShape::Linear,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IssfEnvelopes {
    pub alphas: [FittedEnvelope; 4],
}

impl IssfEnvelopes {
    pub fn funcs(&self) -> [&MonotoneFn; 4] {
        [
            &self.alphas[0].func,
            &self.alphas[1].func,
            &self.alphas[2].func,
            &self.alphas[3].func,
        ]
    }
}

/// Fits ISSf barrier envelopes from the grid.
///
/// The sandwich comes from `(|x|_D, −B)`. The dissipation split bounds the
/// input term by `‖gᵀ∇B‖·‖v‖`, so `a4` is linear with the largest such gain on
/// X minus D and `a3` is fitted below `−∇B·f`.
pub fn fit_issf_envelopes(
    b: &ScalarField,
    sys: &ControlAffineSystem,
    geom: &SafetyGeometry,
    grid: &GridSpec,
    shapes: IssfShapes,
) -> Result<IssfEnvelopes> {
    grid.validate()?;
    check_dims(sys, grid)?;
    let sandwich = grid_samples(grid, |x| {
        let d = geom.dist_to_unsafe(x);
        (d >= D_EXCLUSION).then(|| (d, -b.value(x)))
    });
    let local: Vec<(f64, f64, f64)> = grid_samples(grid, |x| {
        let d = geom.dist_to_unsafe(x);
        if d < D_EXCLUSION || !geom.in_locality(x) {
            return None;
        }
        let (lf, lg) = lie_parts(b, sys, x);
        Some((d, -lf, norm(&lg)))
    });
    let a1 = fit_envelope(&sandwich, shapes.a1, EnvelopeSide::Upper, ENVELOPE_SAFETY);
    let a2 = fit_envelope(&sandwich, shapes.a2, EnvelopeSide::Lower, ENVELOPE_SAFETY);
    let dissip: Vec<(f64, f64)> = local.iter().map(|&(d, q, _)| (d, q)).collect();
    let a3 = fit_envelope(&dissip, shapes.a3, EnvelopeSide::Lower, ENVELOPE_SAFETY);
    let gains: Vec<(f64, f64)> = local.iter().map(|&(_, _, g)| (1.0, g)).collect();
    let a4 = fit_envelope(&gains, EnvelopeShape::Linear, EnvelopeSide::Upper, ENVELOPE_SAFETY);
    Ok(IssfEnvelopes {
        alphas: [a1, a2, a3, a4],
    })
}

#[derive(Clone, Debug)]
pub struct MergedEnvelopes {
    pub c: f64,
    pub alphas: [FittedEnvelope; 7],
}

impl MergedEnvelopes {
    pub fn funcs(&self) -> [&MonotoneFn; 7] {
        std::array::from_fn(|i| &self.alphas[i].func)
    }

    pub fn notes(&self) -> Vec<String> {
        self.alphas
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.note.as_ref().map(|n| format!("a{}: {n}", i + 1)))
            .collect()
    }
}

/// Fits `c` and the seven envelopes for a merged function.
///
/// `c` is the largest value of W on sampled points of ∂D. The supply is fixed
/// to `a7(s) = s²/2`, which leaves the budget `q = −∇W·f − ½‖gᵀ∇W‖²`; `a5` and
/// `a6` each take half of it.
pub fn fit_merged_envelopes(
    w: &ScalarField,
    sys: &ControlAffineSystem,
    geom: &SafetyGeometry,
    grid: &GridSpec,
) -> Result<MergedEnvelopes> {
    grid.validate()?;
    check_dims(sys, grid)?;
    let c = geom
        .unsafe_set
        .boundary_samples(1024)?
        .iter()
        .map(|p| w.value(p))
        .fold(f64::NEG_INFINITY, f64::max);
    let budget = |x: &[f64]| {
        let (lf, lg) = lie_parts(w, sys, x);
        -lf - 0.5 * dot(&lg, &lg)
    };
    let global = grid_samples(grid, |x| Some((norm(x), w.value(x))));
    let shifted = grid_samples(grid, |x| {
        let d = geom.dist_to_unsafe(x);
        (d >= D_EXCLUSION && geom.in_locality(x)).then(|| (d, c - w.value(x)))
    });
    let global_q = grid_samples(grid, |x| Some((norm(x), 0.5 * budget(x))));
    let local_q = grid_samples(grid, |x| {
        let d = geom.dist_to_unsafe(x);
        (d >= D_EXCLUSION && geom.in_locality(x)).then(|| (d, 0.5 * budget(x)))
    });
    use EnvelopeShape::*;
    use EnvelopeSide::*;
    let a7 = FnDecl::Power { p: 2.0, c: 0.5 };
    Ok(MergedEnvelopes {
        c,
        alphas: [
            fit_envelope(&global, Quadratic, Lower, ENVELOPE_SAFETY),
            fit_envelope(&global, Quadratic, Upper, ENVELOPE_SAFETY),
            fit_envelope(&shifted, Linear, Upper, ENVELOPE_SAFETY),
            fit_envelope(&shifted, Linear, Lower, ENVELOPE_SAFETY),
            fit_envelope(&global_q, Quadratic, Lower, ENVELOPE_SAFETY),
            fit_envelope(&local_q, Linear, Lower, ENVELOPE_SAFETY),
            FittedEnvelope {
                func: a7.build()?.with_label("a7(s) = s^2/2"),
                decl: a7,
                note: None,
            },
        ],
    })
}
