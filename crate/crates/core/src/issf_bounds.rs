//! Safety gains from an ISSf barrier: the bundle `(σ, μ, φ, δ)`, residuals of
//! the safety inequality along trajectories, admissibility and envelopes.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{
    compose, comparison_flow_kk, ComparisonError, FlowIntegrator, FnClass, KKFn, KLFn, MonotoneFn,
    FLOW_CAP, FLOW_STEP, INVERSE_HORIZON, INVERSE_TOL, KINF_HORIZON,
};
use crate::dynamics::{DisturbanceSignal, EventKind, Trajectory};
use crate::geometry::SafetyGeometry;
use crate::linalg::norm;

/// Residuals above `−RESIDUAL_TOL` count as satisfied (round-off plus integration error).
pub const RESIDUAL_TOL: f64 = 1e-6;
/// Violations lasting this many consecutive samples always fail the verdict.
pub const PERSISTENT_RUN: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IssfError {
    #[error("parameter {name} = {value} must lie in (0, 1)")]
    Parameter { name: &'static str, value: f64 },
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error("trajectory is empty")]
    EmptyTrajectory,
}

pub type Result<T> = std::result::Result<T, IssfError>;

fn unit_interval(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(IssfError::Parameter { name, value })
    }
}

/// The safety gains `σ(|x|_D) ≥ min{μ(|x₀|_D, t), δ} − φ(‖u‖)`.
#[derive(Clone, Debug)]
pub struct IssfGainBundle {
    pub sigma: MonotoneFn,
    pub mu: KKFn,
    pub phi: MonotoneFn,
    pub delta: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub alpha_tilde: KKFn,
    pub alphas: [MonotoneFn; 4],
    pub geometry: SafetyGeometry,
    /// `α₃ ∘ α₁⁻¹`, the generator of the comparison flow.
    flow_rhs: MonotoneFn,
}

/// `α₁⁻¹(y)` for a flow value; a saturated flow or a value beyond the
/// inversion horizon maps to `+∞`, which the `min` with `δ` absorbs.
fn unbounded_inverse(a1: &MonotoneFn, y: f64) -> std::result::Result<f64, ComparisonError> {
    if y >= FLOW_CAP {
        return Ok(f64::INFINITY);
    }
    match a1.inverse(y, INVERSE_TOL) {
        Err(ComparisonError::Range { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// Builds the gain bundle for barrier envelopes `a1..a4` (all K∞).
pub fn build_gains(
    a1: &MonotoneFn,
    a2: &MonotoneFn,
    a3: &MonotoneFn,
    a4: &MonotoneFn,
    theta: f64,
    epsilon: f64,
    geom: &SafetyGeometry,
) -> Result<IssfGainBundle> {
    unit_interval("theta", theta)?;
    unit_interval("epsilon", epsilon)?;
    for a in [a1, a2, a3, a4] {
        a.validate(FnClass::Kinf, KINF_HORIZON)?;
    }
    let flow_rhs = compose(&[a3.clone(), a1.inverted()]);
    let alpha_tilde = comparison_flow_kk(flow_rhs.clone(), theta, FLOW_STEP)?;
    let mu = {
        let (a1, a2, flow) = (a1.clone(), a2.clone(), alpha_tilde.clone());
        KKFn::new(format!("{epsilon} * mu_tilde"), move |s, t| {
            let y = flow.eval(a2.eval(s)?, t)?;
            Ok(epsilon * unbounded_inverse(&a1, y)?)
        })
    };
    let phi = compose(&[
        a2.inverted(),
        a1.clone(),
        a3.inverted(),
        MonotoneFn::linear(1.0 / theta)?,
        a4.clone(),
    ])
    .with_label("phi");
    Ok(IssfGainBundle {
        sigma: MonotoneFn::identity(),
        mu,
        phi,
        delta: epsilon * geom.kappa,
        theta,
        epsilon,
        alpha_tilde,
        alphas: [a1.clone(), a2.clone(), a3.clone(), a4.clone()],
        geometry: geom.clone(),
        flow_rhs,
    })
}

impl IssfGainBundle {
    /// `μ̃(s, 0) = α₁⁻¹(α₂(s))`, the initial-condition gain before the `ε` factor.
    pub fn mu_tilde_at_zero(&self, s: f64) -> Result<f64> {
        let [a1, a2, ..] = &self.alphas;
        Ok(a1.inverse(a2.eval(s)?, INVERSE_TOL)?)
    }

    /// `μ(s, t)` at increasing `times`, integrating the flow once.
    pub fn mu_series(&self, s: f64, times: &[f64]) -> Result<Vec<f64>> {
        let [a1, a2, ..] = &self.alphas;
        let mut flow = FlowIntegrator::new(self.flow_rhs.clone(), 1.0 - self.theta, a2.eval(s)?, FLOW_STEP)?;
        times
            .iter()
            .map(|&t| {
                let y = flow.advance_to(t)?.value;
                Ok(self.epsilon * unbounded_inverse(a1, y)?)
            })
            .collect()
    }

    /// `min{μ(s, t), δ} − φ(‖u(t)‖)` at the given times and input norms.
    pub fn rhs_series(&self, s: f64, times: &[f64], input_norms: &[f64]) -> Result<Vec<f64>> {
        let mu = self.mu_series(s, times)?;
        mu.iter()
            .zip(input_norms)
            .map(|(m, &un)| Ok(m.min(self.delta) - self.phi.eval(un)?))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum IssfVerdict {
    Pass,
    Fail { first_time: f64 },
    /// The right-hand side is not strictly positive everywhere, so the
    /// inequality carries no information for this tuple.
    Vacuous { first_time: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct IssfEvaluation {
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub residual: Vec<f64>,
    pub admissible: Vec<bool>,
    pub verdict: IssfVerdict,
    pub worst_residual: f64,
    /// Violating samples excused as isolated crossings next to events.
    pub excused: usize,
}

impl IssfEvaluation {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,lhs,rhs,residual,admissible_flag")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.times[i],
                self.lhs[i],
                self.rhs[i],
                self.residual[i],
                u8::from(self.admissible[i])
            )?;
        }
        Ok(())
    }
}

/// Residual `σ(|x(t)|_D) − min{μ(|x₀|_D, t), δ} + φ(‖u(t)‖)` along a trajectory.
///
/// Uses the distances stored in the trajectory. The verdict is vacuous when
/// the right-hand side is not strictly positive at every sample. Otherwise a
/// violation fails unless it is a run shorter than [`PERSISTENT_RUN`] samples
/// adjacent to a recorded event.
pub fn evaluate_issf_inequality(bundle: &IssfGainBundle, traj: &Trajectory, tol: f64) -> Result<IssfEvaluation> {
    if traj.is_empty() {
        return Err(IssfError::EmptyTrajectory);
    }
    let d0 = traj.dist_to_d[0];
    let norms: Vec<f64> = traj.inputs.iter().map(|u| norm(u)).collect();
    let rhs = bundle.rhs_series(d0, &traj.times, &norms)?;
    let lhs: Vec<f64> = traj
        .dist_to_d
        .iter()
        .map(|&d| bundle.sigma.eval(d))
        .collect::<std::result::Result<_, _>>()?;
    let residual: Vec<f64> = lhs.iter().zip(&rhs).map(|(l, r)| l - r).collect();
    let admissible: Vec<bool> = rhs.iter().map(|&r| r > 0.0).collect();
    let worst_residual = residual.iter().copied().fold(f64::INFINITY, f64::min);

    let mut near_event = vec![false; traj.len()];
    for e in &traj.events {
        if matches!(e.kind, EventKind::EnterD | EventKind::ExitD | EventKind::EnterX | EventKind::ExitX) {
            let hi = (e.sample + 2).min(traj.len() - 1);
            near_event[e.sample.saturating_sub(1)..=hi].fill(true);
        }
    }
    let mut first_fail = None;
    let mut excused = 0;
    let mut i = 0;
    while i < residual.len() {
        if residual[i] >= -tol {
            i += 1;
            continue;
        }
        let start = i;
        while i < residual.len() && residual[i] < -tol {
            i += 1;
        }
        let run = start..i;
        if run.len() < PERSISTENT_RUN && run.clone().all(|k| near_event[k]) {
            excused += run.len();
        } else if first_fail.is_none() {
            first_fail = Some(traj.times[start]);
        }
    }
    let verdict = if let Some(k) = admissible.iter().position(|a| !a) {
        IssfVerdict::Vacuous {
            first_time: traj.times[k],
        }
    } else if let Some(t) = first_fail {
        IssfVerdict::Fail { first_time: t }
    } else {
        IssfVerdict::Pass
    };
    Ok(IssfEvaluation {
        times: traj.times.clone(),
        lhs,
        rhs,
        residual,
        admissible,
        verdict,
        worst_residual,
        excused,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Admissibility {
    Admissible,
    Inadmissible { first_violation_time: f64 },
}

/// Samples the right-hand side every `dt` over `[0, horizon]` and requires strict positivity.
pub fn admissibility_check(
    bundle: &IssfGainBundle,
    x0: &[f64],
    u: &DisturbanceSignal,
    horizon: f64,
    dt: f64,
) -> Result<Admissibility> {
    let d0 = bundle.geometry.dist_to_unsafe(x0);
    let n = (horizon / dt).ceil().max(0.0) as usize;
    let times: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).min(horizon)).collect();
    let norms: Vec<f64> = times.iter().map(|&t| norm(&u.sample(t))).collect();
    let rhs = bundle.rhs_series(d0, &times, &norms)?;
    Ok(match rhs.iter().position(|&r| !(r > 0.0)) {
        Some(k) => Admissibility::Inadmissible {
            first_violation_time: times[k],
        },
        None => Admissibility::Admissible,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub k: f64,
    pub s_star: f64,
}

/// Smallest admissible initial distance per input bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyEnvelope {
    pub rows: Vec<EnvelopeRow>,
}

impl SafetyEnvelope {
    pub fn min_safe_initial_distance(&self, k: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.s_star)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "k,s_star")?;
        for r in &self.rows {
            writeln!(w, "{},{}", r.k, r.s_star)?;
        }
        Ok(())
    }
}

/// For each `k`, the infimum of `s` with `μ(s, 0) > φ(k)`, by bisection.
///
/// The floor `δ` is not applied, so the distance measures how far the
/// initial-condition term alone must reach.
pub fn safety_envelope(bundle: &IssfGainBundle, ks: &[f64]) -> Result<SafetyEnvelope> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let target = bundle.phi.eval(k)?;
        let mu0 = |s: f64| bundle.mu.eval(s, 0.0);
        let s_star = if target == 0.0 {
            0.0
        } else {
            let mut hi = 1.0;
            while mu0(hi)? <= target {
                hi *= 2.0;
                if hi > INVERSE_HORIZON {
                    return Err(ComparisonError::Range {
                        y: target,
                        horizon: INVERSE_HORIZON,
                        label: "mu(., 0)".into(),
                    }
                    .into());
                }
            }
            let mut lo = 0.0;
            while hi - lo > INVERSE_TOL * hi.max(1.0) {
                let mid = 0.5 * (lo + hi);
                if mu0(mid)? > target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };
        rows.push(EnvelopeRow { k, s_star });
    }
    Ok(SafetyEnvelope { rows })
}

/// Stability gains from an ISS Lyapunov sandwich.
#[derive(Clone, Debug)]
pub struct IssGains {
    pub beta: KLFn,
    pub gamma_iss: MonotoneFn,
}

/// `β(s, t) = α₁⁻¹(y(t))` with `y' = −(1−θ) α₃∘α₂⁻¹(y)`, `y(0) = α₂(s)`, and
/// `γ = α₁⁻¹∘α₂∘α₃⁻¹∘(γ_supply/θ)`.
pub fn build_iss_gains(
    a1: &MonotoneFn,
    a2: &MonotoneFn,
    a3: &MonotoneFn,
    gamma: &MonotoneFn,
    theta: f64,
) -> Result<IssGains> {
    unit_interval("theta", theta)?;
    let decay = compose(&[a3.clone(), a2.inverted()]);
    let beta = {
        let (a1, a2) = (a1.clone(), a2.clone());
        KLFn::new("beta", move |s, t| {
            let mut flow = FlowIntegrator::new(decay.clone(), -(1.0 - theta), a2.eval(s)?, FLOW_STEP)?;
            let y = flow.advance_to(t)?.value;
            a1.inverse(y, INVERSE_TOL)
        })
    };
    let gamma_iss = compose(&[
        a1.inverted(),
        a2.clone(),
        a3.inverted(),
        MonotoneFn::linear(1.0 / theta)?,
        gamma.clone(),
    ])
    .with_label("gamma_iss");
    Ok(IssGains { beta, gamma_iss })
}

/// Quantities used in the argument that the safety inequality holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityWitness {
    /// `D₁ = β(‖x₀‖, 0) + γ(‖u‖∞)`
    pub d1: f64,
    /// Largest norm over the unsafe set.
    pub d2: f64,
    /// `min{0.5, (1−ε) μ̃(|x₀|_D, 0) / (D₁ + D₂)}`
    pub eta: f64,
    /// `ρ(x₀)`
    pub rho_x0: f64,
}

impl IssfGainBundle {
    /// `ρ(x) = α₄⁻¹(θ α₃(α₁⁻¹(−B(x))))` from the barrier value at `x`.
    pub fn rho(&self, barrier_value: f64) -> Result<f64> {
        let [a1, _, a3, a4] = &self.alphas;
        let s = a1.inverse((-barrier_value).max(0.0), INVERSE_TOL)?;
        Ok(a4.inverse(self.theta * a3.eval(s)?, INVERSE_TOL)?)
    }

    pub fn admissibility_witness(
        &self,
        iss: &IssGains,
        x0: &[f64],
        barrier_value_x0: f64,
        u_bound: f64,
    ) -> Result<AdmissibilityWitness> {
        let d1 = iss.beta.eval(norm(x0), 0.0)? + iss.gamma_iss.eval(u_bound)?;
        let d2 = self.geometry.d2;
        let mu_tilde = self.mu_tilde_at_zero(self.geometry.dist_to_unsafe(x0))?;
        Ok(AdmissibilityWitness {
            d1,
            d2,
            eta: eta(self.epsilon, mu_tilde, d1, d2),
            rho_x0: self.rho(barrier_value_x0)?,
        })
    }
}

pub fn eta(epsilon: f64, mu_tilde0: f64, d1: f64, d2: f64) -> f64 {
    (0.5f64).min((1.0 - epsilon) * mu_tilde0 / (d1 + d2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DisturbanceKind;
    use crate::geometry::Region;

    fn geom() -> SafetyGeometry {
        SafetyGeometry::new(Region::disk([4.0, 6.0], 2.0), Region::disk([4.0, 6.0], 3.0)).unwrap()
    }

    fn identity_bundle() -> IssfGainBundle {
        let id = MonotoneFn::identity();
        build_gains(&id, &id, &id, &id, 0.5, 0.5, &geom()).unwrap()
    }

    #[test]
    fn identity_bundle_closed_forms() {
        let b = identity_bundle();
        assert!((b.phi.eval(1.3).unwrap() - 2.6).abs() < 1e-9);
        assert!((b.delta - 0.5).abs() < 1e-12);
        for &(s, t) in &[(1.0, 0.0), (0.3, 2.0), (2.0, 4.5)] {
            let exact = 0.5 * s * (0.5f64 * t).exp();
            let got = b.mu.eval(s, t).unwrap();
            assert!((got - exact).abs() <= 1e-6 * exact, "{s} {t}: {got} vs {exact}");
        }
        assert_eq!(b.mu.eval(0.0, 3.0).unwrap(), 0.0);
        assert!((b.mu.eval(0.7, 0.0).unwrap() - 0.35).abs() < 1e-9);
    }

    #[test]
    fn parameters_checked() {
        let id = MonotoneFn::identity();
        assert!(build_gains(&id, &id, &id, &id, 1.0, 0.5, &geom()).is_err());
        assert!(build_gains(&id, &id, &id, &id, 0.5, 0.0, &geom()).is_err());
        let bounded = MonotoneFn::custom("atan", FnClass::Kinf, f64::atan);
        assert!(build_gains(&bounded, &id, &id, &id, 0.5, 0.5, &geom()).is_err());
    }

    #[test]
    fn envelope_matches_closed_form() {
        let env = safety_envelope(&identity_bundle(), &[0.0, 0.5, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(env.min_safe_initial_distance(0.0), Some(0.0));
        assert!((env.min_safe_initial_distance(1.0).unwrap() - 4.0).abs() < 1e-6);
        assert!(env.rows.windows(2).all(|w| w[0].s_star <= w[1].s_star));
    }

    #[test]
    fn admissibility_boundary_is_strict() {
        let b = identity_bundle();
        // x0 at distance 1 from D: mu(1, 0) = 0.5, delta = 0.5.
        let x0 = [7.0, 6.0];
        let zero = DisturbanceSignal::zero(2);
        assert_eq!(admissibility_check(&b, &x0, &zero, 1.0, 0.01).unwrap(), Admissibility::Admissible);
        // phi(|u|) = 2|u| = 0.5 exactly.
        let edge = DisturbanceSignal::new(2, DisturbanceKind::Constant { value: vec![0.25, 0.0] }).unwrap();
        assert!(matches!(
            admissibility_check(&b, &x0, &edge, 1.0, 0.01).unwrap(),
            Admissibility::Inadmissible { first_violation_time } if first_violation_time == 0.0
        ));
    }

    #[test]
    fn iss_gains_quadratic_sandwich() {
        let a1 = MonotoneFn::power(0.5, 2.0).unwrap();
        let a2 = MonotoneFn::power(1.5, 2.0).unwrap();
        let g = build_iss_gains(&a1, &a2, &a1, &a1, 0.5).unwrap();
        let b0 = g.beta.eval(2.0, 0.0).unwrap();
        assert!((b0 - 3f64.sqrt() * 2.0).abs() < 1e-8);
        assert!(g.beta.eval(2.0, 1.0).unwrap() < b0);
        let same = build_iss_gains(&a1, &a1, &a1, &a1, 0.5).unwrap();
        assert!((same.beta.eval(1.7, 0.0).unwrap() - 1.7).abs() < 1e-8);
    }

    #[test]
    fn eta_clamps() {
        assert_eq!(eta(0.5, 1.0, 0.0, 0.1), 0.5);
        let e = eta(0.5, 1.0, 1e6, 10.0);
        assert!((e - 0.5 / (1e6 + 10.0)).abs() < 1e-18);
    }
}
