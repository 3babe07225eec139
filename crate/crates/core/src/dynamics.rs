//! Control-affine systems `ẋ = f(x) + g(x)(k(x) + u(t))`, disturbance
//! generators, and fixed-step RK4 integration with region-crossing events.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::geometry::SafetyGeometry;
use crate::linalg::{add, axpy, mat_vec, norm};

/// States beyond this norm abort integration as a finite-escape diagnostic.
pub const DIVERGENCE_NORM: f64 = 1e9;
pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("time step must be positive, got {0}")]
    Step(f64),
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error("state dimension {got} does not match system dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("trajectory escaped: |x| = {norm:e} at t = {time}")]
    Divergence { time: f64, norm: f64 },
    #[error("invalid disturbance: {0}")]
    Disturbance(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

type VecMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum JacobianMode {
    Analytic(VecMap),
    FiniteDifference(f64),
}

impl fmt::Debug for JacobianMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JacobianMode::Analytic(_) => f.write_str("Analytic"),
            JacobianMode::FiniteDifference(h) => write!(f, "FiniteDifference({h})"),
        }
    }
}

/// `ẋ = f(x) + g(x) v` with `g(x)` stored row-major as `dim_x × dim_u`.
#[derive(Clone)]
pub struct ControlAffineSystem {
    pub dim_x: usize,
    pub dim_u: usize,
    drift: VecMap,
    gain: VecMap,
    pub jacobian_mode: JacobianMode,
    pub label: String,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("dim_x", &self.dim_x)
            .field("dim_u", &self.dim_u)
            .field("jacobian_mode", &self.jacobian_mode)
            .field("label", &self.label)
            .finish()
    }
}

impl ControlAffineSystem {
    pub fn new<F, G>(dim_x: usize, dim_u: usize, label: impl Into<String>, drift: F, gain: G) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            dim_x,
            dim_u,
            drift: Arc::new(drift),
            gain: Arc::new(gain),
            jacobian_mode: JacobianMode::FiniteDifference(1e-6),
            label: label.into(),
        }
    }

    /// `ẋ = v` in `n` dimensions.
    pub fn single_integrator(n: usize) -> Self {
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        Self::new(n, n, format!("single integrator (n = {n})"), move |_| vec![0.0; n], move |_| eye.clone())
    }

    /// `ẋ = A x + B v` with row-major `a` (`n × n`) and `b` (`n × m`).
    pub fn linear(n: usize, m: usize, a: Vec<f64>, b: Vec<f64>) -> Self {
        let a2 = a.clone();
        let mut sys = Self::new(n, m, "linear", move |x| mat_vec(&a2, n, n, x), move |_| b.clone());
        sys.jacobian_mode = JacobianMode::Analytic(Arc::new(move |_| a.clone()));
        sys
    }

    /// Builds `f` and `g` from expression strings in `x1..xn`.
    pub fn from_exprs(f: &[String], g: &[Vec<String>]) -> Result<Self> {
        let n = f.len();
        if g.len() != n {
            return Err(DynamicsError::Dimension {
                expected: n,
                got: g.len(),
            });
        }
        let m = g.first().map_or(0, Vec::len);
        let parse = |s: &String| -> Result<Expr> {
            let e = Expr::parse(s)?;
            e.check_dim(n)?;
            Ok(e)
        };
        let fe: Vec<Expr> = f.iter().map(parse).collect::<Result<_>>()?;
        let mut ge = Vec::with_capacity(n * m);
        for row in g {
            if row.len() != m {
                return Err(DynamicsError::Dimension {
                    expected: m,
                    got: row.len(),
                });
            }
            for s in row {
                ge.push(parse(s)?);
            }
        }
        let label = format!("f = [{}]", f.join(", "));
        Ok(Self::new(
            n,
            m,
            label,
            move |x| fe.iter().map(|e| e.eval(x)).collect(),
            move |x| ge.iter().map(|e| e.eval(x)).collect(),
        ))
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    pub fn gain(&self, x: &[f64]) -> Vec<f64> {
        (self.gain)(x)
    }

    /// `f(x) + g(x) v`
    pub fn velocity(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let f = self.drift(x);
        if v.is_empty() || self.dim_u == 0 {
            return f;
        }
        add(&f, &mat_vec(&self.gain(x), self.dim_x, self.dim_u, v))
    }

    /// Closed loop with `v = k(x) + v'`: drift becomes `f + g k`, `g` is kept.
    pub fn with_feedback(&self, law: &FeedbackLaw) -> Self {
        let open = self.clone();
        let k = law.clone();
        let (n, m) = (self.dim_x, self.dim_u);
        let gain = self.gain.clone();
        Self {
            dim_x: n,
            dim_u: m,
            drift: Arc::new(move |x| {
                let g = (open.gain)(x);
                add(&(open.drift)(x), &mat_vec(&g, n, m, &k.eval(x)))
            }),
            gain,
            jacobian_mode: JacobianMode::FiniteDifference(1e-6),
            label: format!("{} with {}", self.label, law.description),
        }
    }

    /// Row-major Jacobian of the drift.
    pub fn drift_jacobian(&self, x: &[f64]) -> Vec<f64> {
        match &self.jacobian_mode {
            JacobianMode::Analytic(j) => j(x),
            JacobianMode::FiniteDifference(h) => {
                let n = self.dim_x;
                let mut jac = vec![0.0; n * n];
                let mut probe = x.to_vec();
                for j in 0..n {
                    probe[j] = x[j] + h;
                    let fp = self.drift(&probe);
                    probe[j] = x[j] - h;
                    let fm = self.drift(&probe);
                    probe[j] = x[j];
                    for i in 0..n {
                        jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
                    }
                }
                jac
            }
        }
    }
}

type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// State feedback `v = k(x)`.
#[derive(Clone)]
pub struct FeedbackLaw {
    k: VecMap,
    pub description: String,
    /// Mismatch between the branches of a piecewise law at a point, if any.
    branch_jump: Option<ScalarMap>,
}

impl fmt::Debug for FeedbackLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeedbackLaw({})", self.description)
    }
}

impl FeedbackLaw {
    pub fn new<K>(description: impl Into<String>, k: K) -> Self
    where
        K: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            k: Arc::new(k),
            description: description.into(),
            branch_jump: None,
        }
    }

    pub fn with_branch_jump<J>(mut self, jump: J) -> Self
    where
        J: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.branch_jump = Some(Arc::new(jump));
        self
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.k)(x)
    }

    pub fn branch_jump(&self, x: &[f64]) -> Option<f64> {
        self.branch_jump.as_ref().map(|j| j(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// `amplitude_j * sin(2π frequency_j t + phase_j)` per channel.
    Sinusoid {
        amplitude: Vec<f64>,
        frequency: Vec<f64>,
        phase: Vec<f64>,
    },
    /// Piecewise-constant samples drawn uniformly from the ball of radius
    /// `bound`, redrawn every `hold_dt`.
    SeededBoundedNoise {
        bound: f64,
        seed: u64,
        hold_dt: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceSignal {
    pub dim: usize,
    pub kind: DisturbanceKind,
}

impl DisturbanceSignal {
    pub fn new(dim: usize, kind: DisturbanceKind) -> Result<Self> {
        let bad = |m: &str| Err(DynamicsError::Disturbance(m.to_string()));
        match &kind {
            DisturbanceKind::Zero => {}
            DisturbanceKind::Constant { value } => {
                if value.len() != dim {
                    return bad("constant value has wrong dimension");
                }
            }
            DisturbanceKind::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => {
                if amplitude.len() != dim || frequency.len() != dim || phase.len() != dim {
                    return bad("sinusoid parameters need one entry per channel");
                }
            }
            DisturbanceKind::SeededBoundedNoise { bound, hold_dt, .. } => {
                if !(*bound >= 0.0 && bound.is_finite()) {
                    return bad("noise bound must be finite and >= 0");
                }
                if !(*hold_dt > 0.0) {
                    return bad("hold_dt must be positive");
                }
            }
        }
        Ok(Self { dim, kind })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            kind: DisturbanceKind::Zero,
        }
    }

    pub fn linf_bound(&self) -> f64 {
        match &self.kind {
            DisturbanceKind::Zero => 0.0,
            DisturbanceKind::Constant { value } => norm(value),
            DisturbanceKind::Sinusoid { amplitude, .. } => norm(amplitude),
            DisturbanceKind::SeededBoundedNoise { bound, .. } => *bound,
        }
    }

    /// Value at time `t`; a pure function of the declaration and `t`.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        match &self.kind {
            DisturbanceKind::Zero => vec![0.0; self.dim],
            DisturbanceKind::Constant { value } => value.clone(),
            DisturbanceKind::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => (0..self.dim)
                .map(|j| amplitude[j] * (std::f64::consts::TAU * frequency[j] * t + phase[j]).sin())
                .collect(),
            DisturbanceKind::SeededBoundedNoise { bound, seed, hold_dt } => {
                // The small offset keeps samples that land on a hold boundary
                // (t = k * hold_dt up to round-off) in the interval they start.
                let k = (t / hold_dt + 1e-9).floor().max(0.0) as u64;
                noise_sample(*seed, k, self.dim, *bound)
            }
        }
    }
}

fn noise_sample(seed: u64, interval: u64, dim: usize, bound: f64) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(interval);
    loop {
        let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let r = norm(&z);
        if r <= 1.0 {
            let mut v: Vec<f64> = z.iter().map(|c| c * bound).collect();
            let n = norm(&v);
            if n > bound {
                v.iter_mut().for_each(|c| *c *= bound / n);
            }
            return v;
        }
    }
}

pub fn sample_disturbance(u: &DisturbanceSignal, t: f64) -> Vec<f64> {
    u.sample(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    EnterX,
    ExitX,
    EnterD,
    ExitD,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::EnterX => "enter_X",
            EventKind::ExitX => "exit_X",
            EventKind::EnterD => "enter_D",
            EventKind::ExitD => "exit_D",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// Index of the last sample before the crossing.
    pub sample: usize,
    /// Branch mismatch of a piecewise feedback law at the crossing point.
    pub law_jump: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub dist_to_d: Vec<f64>,
    pub norm_x: Vec<f64>,
    pub in_x: Vec<bool>,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn min_dist_to_d(&self) -> f64 {
        self.dist_to_d.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend(["dist_D", "norm_x", "in_X"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            write!(w, "{}", self.times[i])?;
            for v in self.states[i].iter().chain(&self.inputs[i]) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{},{}", self.dist_to_d[i], self.norm_x[i], u8::from(self.in_x[i]))?;
        }
        Ok(())
    }

    pub fn write_events_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,event")?;
        for e in &self.events {
            writeln!(w, "{},{}", e.time, e.kind.as_str())?;
        }
        Ok(())
    }
}

struct Rhs<'a> {
    sys: &'a ControlAffineSystem,
    law: Option<&'a FeedbackLaw>,
    u: &'a DisturbanceSignal,
}

impl Rhs<'_> {
    fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut v = self.u.sample(t);
        if let Some(law) = self.law {
            v = add(&law.eval(x), &v);
        }
        self.sys.velocity(x, &v)
    }

    fn rk4(&self, t: f64, x: &[f64], h: f64) -> Vec<f64> {
        let k1 = self.eval(t, x);
        let k2 = self.eval(t + 0.5 * h, &axpy(x, 0.5 * h, &k1));
        let k3 = self.eval(t + 0.5 * h, &axpy(x, 0.5 * h, &k2));
        let k4 = self.eval(t + h, &axpy(x, h, &k3));
        x.iter()
            .enumerate()
            .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }
}

/// Integrates the (optionally closed-loop) system from `x0` over `[0, t_end]`.
///
/// Sample times are `0, dt, 2dt, …` with the last sample clamped to `t_end`.
/// Region crossings are located by bisecting the step length down to `dt/100`.
pub fn integrate(
    sys: &ControlAffineSystem,
    x0: &[f64],
    u: &DisturbanceSignal,
    law: Option<&FeedbackLaw>,
    t_end: f64,
    dt: f64,
    geom: &SafetyGeometry,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(DynamicsError::Step(dt));
    }
    if !(t_end > 0.0) {
        return Err(DynamicsError::Horizon(t_end));
    }
    if x0.len() != sys.dim_x {
        return Err(DynamicsError::Dimension {
            expected: sys.dim_x,
            got: x0.len(),
        });
    }
    if u.dim != sys.dim_u {
        return Err(DynamicsError::Dimension {
            expected: sys.dim_u,
            got: u.dim,
        });
    }
    let rhs = Rhs { sys, law, u };
    let steps = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        dist_to_d: Vec::with_capacity(steps + 1),
        norm_x: Vec::with_capacity(steps + 1),
        in_x: Vec::with_capacity(steps + 1),
        events: Vec::new(),
    };
    let record = |traj: &mut Trajectory, t: f64, x: Vec<f64>| {
        traj.times.push(t);
        traj.inputs.push(u.sample(t));
        traj.dist_to_d.push(geom.dist_to_unsafe(&x));
        traj.norm_x.push(norm(&x));
        traj.in_x.push(geom.in_locality(&x));
        traj.states.push(x);
    };
    record(&mut traj, 0.0, x0.to_vec());
    let mut x = x0.to_vec();
    let mut t = 0.0;
    for i in 1..=steps {
        let t_next = if i == steps { t_end } else { i as f64 * dt };
        let h = t_next - t;
        let next = rhs.rk4(t, &x, h);
        let n = norm(&next);
        if !(n <= DIVERGENCE_NORM) {
            return Err(DynamicsError::Divergence { time: t_next, norm: n });
        }
        let before = (geom.in_locality(&x), geom.in_unsafe(&x));
        let after = (geom.in_locality(&next), geom.in_unsafe(&next));
        let crossings = [
            (before.0 != after.0, if after.0 { EventKind::EnterX } else { EventKind::ExitX }, 0),
            (before.1 != after.1, if after.1 { EventKind::EnterD } else { EventKind::ExitD }, 1),
        ];
        for (crossed, kind, which) in crossings {
            if !crossed {
                continue;
            }
            let member = |p: &[f64]| {
                if which == 0 {
                    geom.in_locality(p)
                } else {
                    geom.in_unsafe(p)
                }
            };
            let start = member(&x);
            let (mut lo, mut hi) = (0.0, h);
            while hi - lo > dt / 100.0 {
                let mid = 0.5 * (lo + hi);
                if member(&rhs.rk4(t, &x, mid)) == start {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let at = rhs.rk4(t, &x, hi);
            let law_jump = if which == 0 { law.and_then(|l| l.branch_jump(&at)) } else { None };
            traj.events.push(Event {
                time: t + hi,
                kind,
                sample: i - 1,
                law_jump,
            });
        }
        record(&mut traj, t_next, next.clone());
        x = next;
        t = t_next;
    }
    traj.events
        .sort_by(|a, b| a.time.total_cmp(&b.time).then(a.sample.cmp(&b.sample)));
    Ok(traj)
}

/// Integrates independent initial conditions in parallel; output order matches input.
pub fn integrate_many(
    sys: &ControlAffineSystem,
    x0s: &[Vec<f64>],
    u: &DisturbanceSignal,
    law: Option<&FeedbackLaw>,
    t_end: f64,
    dt: f64,
    geom: &SafetyGeometry,
) -> Vec<Result<Trajectory>> {
    x0s.par_iter()
        .map(|x0| integrate(sys, x0, u, law, t_end, dt, geom))
        .collect()
}
