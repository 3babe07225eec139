//! Declarative experiments: JSON spec, staged pipeline, output files and a
//! reproducibility manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certification::{
    ball_input_samples, check_issf_barrier, check_iss_lyapunov, check_merged_w, check_robust_barrier,
    fit_issf_envelopes, fit_merged_envelopes, summary_table, CertificateReport, GridSpec, IssfShapes,
};
use crate::comparison::{FnDecl, MonotoneFn};
use crate::dynamics::{integrate_many, ControlAffineSystem, DisturbanceKind, DisturbanceSignal, FeedbackLaw, Trajectory};
use crate::field::ScalarField;
use crate::geometry::{Region, SafetyGeometry};
use crate::issf_bounds::{
    build_gains, build_iss_gains, evaluate_issf_inequality, safety_envelope, IssGains, IssfGainBundle, RESIDUAL_TOL,
};
use crate::linalg::scale;
use crate::merging::{
    compact_support_transform, gradient_control, merged_w, write_grid_csv, CompactBarrier, MergedFunction,
    OUTSIDE_VALUE_NOTE,
};
use crate::plot;

pub const PAPER_SEC4: &str = include_str!("../specs/paper_sec4.json");
pub const PAPER_SEC4_NOMINAL: &str = include_str!("../specs/paper_sec4_nominal.json");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("spec parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("spec field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("unknown bundled spec `{0}` (known: paper_sec4, paper_sec4_nominal)")]
    UnknownBundle(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn field(path: impl Into<String>, message: impl ToString) -> ExperimentError {
    ExperimentError::Field {
        path: path.into(),
        message: message.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemDecl {
    Catalog { name: String, dim: usize },
    /// `f` per state component, `g` row-major, in the expression grammar.
    Expressions { f: Vec<String>, g: Vec<Vec<String>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDecl {
    #[serde(rename = "unsafe")]
    pub unsafe_set: Region,
    pub locality: Region,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionDecls {
    #[serde(default)]
    pub lyapunov: Option<String>,
    #[serde(default)]
    pub barrier: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    #[default]
    None,
    LyapunovGradient,
    BarrierGradient,
    MergedGradient,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDecl {
    #[serde(default)]
    pub law: LawKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergingDecl {
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_k2")]
    pub k2: f64,
    #[serde(default = "default_quad")]
    pub quadrature_step: f64,
}

fn default_k1() -> f64 {
    100.0
}
fn default_k2() -> f64 {
    -10.0
}
fn default_quad() -> f64 {
    crate::merging::QUADRATURE_STEP
}
fn default_half() -> f64 {
    0.5
}

impl Default for MergingDecl {
    fn default() -> Self {
        Self {
            k1: default_k1(),
            k2: default_k2(),
            quadrature_step: default_quad(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssDecl {
    pub a1: FnDecl,
    pub a2: FnDecl,
    pub a3: FnDecl,
    pub gamma: FnDecl,
    #[serde(default = "default_half")]
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssfDecl {
    #[serde(default = "default_half")]
    pub theta: f64,
    #[serde(default = "default_half")]
    pub epsilon: f64,
    /// Locality set for the barrier analysis when it differs from the merging support.
    #[serde(default)]
    pub locality: Option<Region>,
    /// Explicit `a1..a4`; fitted on the grid when absent.
    #[serde(default)]
    pub alphas: Option<[FnDecl; 4]>,
    #[serde(default)]
    pub shapes: IssfShapes,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceDecl {
    #[default]
    Zero,
    Constant {
        value: Vec<f64>,
    },
    Sinusoid {
        amplitude: Vec<f64>,
        frequency: Vec<f64>,
        phase: Vec<f64>,
    },
    /// Uses the run seed unless `seed` is given.
    SeededBoundedNoise {
        bound: f64,
        hold_dt: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl DisturbanceDecl {
    pub fn build(&self, dim: usize, run_seed: u64) -> std::result::Result<DisturbanceSignal, crate::dynamics::DynamicsError> {
        let kind = match self.clone() {
            DisturbanceDecl::Zero => DisturbanceKind::Zero,
            DisturbanceDecl::Constant { value } => DisturbanceKind::Constant { value },
            DisturbanceDecl::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => DisturbanceKind::Sinusoid {
                amplitude,
                frequency,
                phase,
            },
            DisturbanceDecl::SeededBoundedNoise { bound, hold_dt, seed } => DisturbanceKind::SeededBoundedNoise {
                bound,
                hold_dt,
                seed: seed.unwrap_or(run_seed),
            },
        };
        DisturbanceSignal::new(dim, kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDecl {
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
    /// Radius of the input ball sampled at every point.
    #[serde(default)]
    pub input_bound: f64,
    #[serde(default = "default_directions")]
    pub input_directions: usize,
    #[serde(default = "default_levels")]
    pub input_levels: usize,
}

fn default_directions() -> usize {
    16
}
fn default_levels() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Certify,
    Gains,
    Simulate,
    Issf,
    Envelope,
    Plot,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Stage::Certify => "certify",
            Stage::Gains => "gains",
            Stage::Simulate => "simulate",
            Stage::Issf => "issf",
            Stage::Envelope => "envelope",
            Stage::Plot => "plot",
        })
    }
}

/// One experiment. Field names are the JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub system: SystemDecl,
    pub geometry: GeometryDecl,
    #[serde(default)]
    pub functions: FunctionDecls,
    #[serde(default)]
    pub control: ControlDecl,
    #[serde(default)]
    pub merging: MergingDecl,
    #[serde(default)]
    pub iss: Option<IssDecl>,
    #[serde(default)]
    pub issf: Option<IssfDecl>,
    #[serde(default)]
    pub disturbance: DisturbanceDecl,
    #[serde(default)]
    pub initial_conditions: Vec<Vec<f64>>,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub grid: Option<GridDecl>,
    #[serde(default)]
    pub envelope_k: Vec<f64>,
    pub stages: Vec<Stage>,
}

impl ExperimentSpec {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text).map_err(|e| ExperimentError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "paper_sec4" => Self::from_json(PAPER_SEC4),
            "paper_sec4_nominal" => Self::from_json(PAPER_SEC4_NOMINAL),
            other => Err(ExperimentError::UnknownBundle(other.to_string())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stages(mut self, stages: Vec<Stage>) -> Self {
        self.stages = stages;
        self
    }

    /// Structural checks with field paths; builds every declared object once.
    pub fn validate(&self) -> Result<()> {
        let built = Built::new(self)?;
        let n = built.sys.dim_x;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(field("horizon", format!("must be positive, got {}", self.horizon)));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(field("dt", format!("must lie in (0, horizon], got {}", self.dt)));
        }
        for (i, x0) in self.initial_conditions.iter().enumerate() {
            if x0.len() != n {
                return Err(field(format!("initial_conditions[{i}]"), format!("expected {n} components")));
            }
            if built.geom.in_unsafe(x0) {
                return Err(field(format!("initial_conditions[{i}]"), "starts inside the unsafe set"));
            }
        }
        if let Some(g) = &self.grid {
            if g.bounds.len() != n {
                return Err(field("grid.bounds", format!("expected {n} intervals")));
            }
            self.grid_spec(built.sys.dim_u)
                .expect("grid present")
                .validate()
                .map_err(|e| field("grid", e))?;
        }
        if let Some(iss) = &self.iss {
            for (name, d) in [("a1", &iss.a1), ("a2", &iss.a2), ("a3", &iss.a3), ("gamma", &iss.gamma)] {
                d.build().map_err(|e| field(format!("iss.{name}"), e))?;
            }
            if !(iss.theta > 0.0 && iss.theta < 1.0) {
                return Err(field("iss.theta", "must lie in (0, 1)"));
            }
        }
        if let Some(issf) = &self.issf {
            for (name, v) in [("theta", issf.theta), ("epsilon", issf.epsilon)] {
                if !(v > 0.0 && v < 1.0) {
                    return Err(field(format!("issf.{name}"), "must lie in (0, 1)"));
                }
            }
            if let Some(alphas) = &issf.alphas {
                for (i, d) in alphas.iter().enumerate() {
                    d.build().map_err(|e| field(format!("issf.alphas[{i}]"), e))?;
                }
            }
        }
        for (i, k) in self.envelope_k.iter().enumerate() {
            if !(*k >= 0.0 && k.is_finite()) {
                return Err(field(format!("envelope_k[{i}]"), "must be finite and >= 0"));
            }
        }
        let needs = |stage: Stage, what: &str, ok: bool| -> Result<()> {
            if self.stages.contains(&stage) && !ok {
                return Err(field("stages", format!("stage {stage} requires {what}")));
            }
            Ok(())
        };
        needs(Stage::Certify, "a grid", self.grid.is_some())?;
        needs(Stage::Gains, "an issf section", self.issf.is_some())?;
        needs(
            Stage::Gains,
            "a grid or explicit issf.alphas",
            self.grid.is_some() || self.issf.as_ref().is_some_and(|s| s.alphas.is_some()),
        )?;
        needs(Stage::Gains, "functions.barrier", self.functions.barrier.is_some())?;
        needs(Stage::Issf, "the gains and simulate stages", {
            self.stages.contains(&Stage::Gains) && self.stages.contains(&Stage::Simulate)
        })?;
        needs(Stage::Envelope, "the gains stage", self.stages.contains(&Stage::Gains))?;
        Ok(())
    }

    fn grid_spec(&self, dim_u: usize) -> Option<GridSpec> {
        self.grid.as_ref().map(|g| {
            let mut spec = GridSpec::new(g.bounds.clone(), g.resolution);
            if g.input_bound > 0.0 {
                spec = spec.with_inputs(ball_input_samples(dim_u, g.input_bound, g.input_directions, g.input_levels));
            }
            spec
        })
    }

    /// Stable hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serialises")))
    }
}

/// Everything derivable from a spec without running a stage.
#[derive(Clone, Debug)]
pub struct Built {
    pub sys: ControlAffineSystem,
    pub geom: SafetyGeometry,
    pub issf_geom: SafetyGeometry,
    pub lyapunov: Option<ScalarField>,
    pub barrier: Option<ScalarField>,
    pub compact: Option<CompactBarrier>,
    pub merged: Option<MergedFunction>,
    pub law: Option<FeedbackLaw>,
}

impl Built {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        let sys = match &spec.system {
            SystemDecl::Catalog { name, dim } => match name.as_str() {
                "single_integrator" if *dim > 0 => ControlAffineSystem::single_integrator(*dim),
                "single_integrator" => return Err(field("system.dim", "must be >= 1")),
                other => return Err(field("system.name", format!("unknown catalog system `{other}`"))),
            },
            SystemDecl::Expressions { f, g } => {
                ControlAffineSystem::from_exprs(f, g).map_err(|e| field("system", e))?
            }
        };
        let n = sys.dim_x;
        for (path, r) in [("geometry.unsafe", &spec.geometry.unsafe_set), ("geometry.locality", &spec.geometry.locality)] {
            r.validate().map_err(|e| field(path, e))?;
            if r.dim() != n {
                return Err(field(path, format!("dimension {} does not match the state dimension {n}", r.dim())));
            }
        }
        let geom = SafetyGeometry::new(spec.geometry.unsafe_set.clone(), spec.geometry.locality.clone())
            .map_err(|e| field("geometry", e))?;
        let issf_geom = match spec.issf.as_ref().and_then(|s| s.locality.clone()) {
            Some(loc) => {
                SafetyGeometry::new(spec.geometry.unsafe_set.clone(), loc).map_err(|e| field("issf.locality", e))?
            }
            None => geom.clone(),
        };
        let parse = |path: &str, src: &Option<String>| -> Result<Option<ScalarField>> {
            src.as_ref()
                .map(|s| ScalarField::from_expr(n, s).map_err(|e| field(path, e)))
                .transpose()
        };
        let lyapunov = parse("functions.lyapunov", &spec.functions.lyapunov)?;
        let barrier = parse("functions.barrier", &spec.functions.barrier)?;
        let mut compact = None;
        let mut merged = None;
        if let (Some(v), Some(b)) = (&lyapunov, &barrier) {
            if n == 2 && spec.control.law == LawKind::MergedGradient {
                let bt = compact_support_transform(
                    b,
                    &spec.geometry.unsafe_set,
                    &spec.geometry.locality,
                    spec.merging.quadrature_step,
                )
                .map_err(|e| field("functions.barrier", e))?;
                merged = Some(merged_w(v, &bt, spec.merging.k1, spec.merging.k2).map_err(|e| field("merging", e))?);
                compact = Some(bt);
            }
        }
        let gradient_law = |f: &ScalarField, label: &str| {
            let f = f.clone();
            FeedbackLaw::new(label.to_string(), move |x| scale(&f.gradient(x), -1.0))
        };
        let law = match spec.control.law {
            LawKind::None => None,
            LawKind::LyapunovGradient => Some(gradient_law(
                lyapunov.as_ref().ok_or_else(|| field("control.law", "needs functions.lyapunov"))?,
                "v = -grad V",
            )),
            LawKind::BarrierGradient => Some(gradient_law(
                barrier.as_ref().ok_or_else(|| field("control.law", "needs functions.barrier"))?,
                "v = -grad B",
            )),
            LawKind::MergedGradient => Some(gradient_control(merged.as_ref().ok_or_else(|| {
                field("control.law", "needs a planar system with functions.lyapunov and functions.barrier")
            })?)),
        };
        if let Some(law) = &law {
            let probe = law.eval(&vec![0.0; n]);
            if probe.len() != sys.dim_u {
                return Err(field("control.law", "law output does not match the input dimension"));
            }
        }
        if let DisturbanceDecl::Constant { value } = &spec.disturbance {
            if value.len() != sys.dim_u {
                return Err(field("disturbance.value", format!("expected {} components", sys.dim_u)));
            }
        }
        spec.disturbance.build(sys.dim_u, spec.seed).map_err(|e| field("disturbance", e))?;
        Ok(Self {
            sys,
            geom,
            issf_geom,
            lyapunov,
            barrier,
            compact,
            merged,
            law,
        })
    }

    pub fn closed_loop(&self) -> ControlAffineSystem {
        match &self.law {
            Some(l) => self.sys.with_feedback(l),
            None => self.sys.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: String,
    #[serde(default)]
    pub message: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec_name: String,
    pub spec_hash: String,
    pub seed: u64,
    pub toolkit_version: String,
    pub files: Vec<FileEntry>,
    pub stages: Vec<StageRecord>,
    /// Hash of everything above except wall-clock timings.
    pub digest: String,
}

impl RunManifest {
    pub fn ok(&self) -> bool {
        self.stages.iter().all(|s| s.status == "ok")
    }

    fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec_hash.as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update(self.toolkit_version.as_bytes());
        for f in &self.files {
            h.update(f.path.as_bytes());
            h.update(f.sha256.as_bytes());
        }
        for s in &self.stages {
            h.update(s.stage.to_string().as_bytes());
            h.update(s.status.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Outputs of a run, kept in memory for callers that inspect results directly.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub reports: Vec<CertificateReport>,
    pub issf_alphas: Option<[MonotoneFn; 4]>,
    pub bundle: Option<IssfGainBundle>,
    pub iss_gains: Option<IssGains>,
    pub trajectories: Vec<Trajectory>,
    pub issf_verdicts: Vec<crate::issf_bounds::IssfVerdict>,
}

struct Writer {
    out: PathBuf,
    files: Vec<FileEntry>,
}

impl Writer {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|source| ExperimentError::Io { path, source })?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn put_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|source| ExperimentError::Io {
            path: self.out.join(name),
            source,
        })?;
        self.put(name, &buf)
    }
}

fn stage_err(stage: Stage) -> impl Fn(String) -> ExperimentError {
    move |message| ExperimentError::Stage { stage, message }
}

fn decls_json(decls: &[FnDecl]) -> serde_json::Value {
    serde_json::to_value(decls).expect("decls serialise")
}

/// Runs the requested stages in the fixed order certify, gains, simulate,
/// issf, envelope, plot. A failing stage is recorded in the manifest and
/// stages that depend on it are skipped.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<(RunManifest, RunOutputs)> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|source| ExperimentError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let built = Built::new(spec)?;
    let mut w = Writer {
        out: out.to_path_buf(),
        files: Vec::new(),
    };
    w.put("spec.json", spec.to_json().as_bytes())?;
    let mut outputs = RunOutputs::default();
    let mut records = Vec::new();
    let order = [Stage::Certify, Stage::Gains, Stage::Simulate, Stage::Issf, Stage::Envelope, Stage::Plot];
    for stage in order {
        if !spec.stages.contains(&stage) {
            continue;
        }
        let blocked = match stage {
            Stage::Issf => outputs.bundle.is_none() || !records_ok(&records, Stage::Simulate),
            Stage::Envelope => outputs.bundle.is_none(),
            _ => false,
        };
        if blocked {
            records.push(StageRecord {
                stage,
                status: "skipped".into(),
                message: Some("an upstream stage failed".into()),
                seconds: 0.0,
            });
            continue;
        }
        let start = Instant::now();
        let res = match stage {
            Stage::Certify => stage_certify(spec, &built, &mut w, &mut outputs),
            Stage::Gains => stage_gains(spec, &built, &mut w, &mut outputs),
            Stage::Simulate => stage_simulate(spec, &built, &mut w, &mut outputs),
            Stage::Issf => stage_issf(&mut w, &mut outputs),
            Stage::Envelope => stage_envelope(spec, &mut w, &outputs),
            Stage::Plot => stage_plot(spec, &built, &mut w, &outputs),
        };
        let seconds = start.elapsed().as_secs_f64();
        records.push(match res {
            Ok(()) => StageRecord {
                stage,
                status: "ok".into(),
                message: None,
                seconds,
            },
            Err(e) => StageRecord {
                stage,
                status: "error".into(),
                message: Some(e.to_string()),
                seconds,
            },
        });
    }
    let mut manifest = RunManifest {
        spec_name: spec.name.clone(),
        spec_hash: spec.hash(),
        seed: spec.seed,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        files: w.files.clone(),
        stages: records,
        digest: String::new(),
    };
    manifest.digest = manifest.compute_digest();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let path = out.join("manifest.json");
    fs::write(&path, text).map_err(|source| ExperimentError::Io { path, source })?;
    Ok((manifest, outputs))
}

fn records_ok(records: &[StageRecord], stage: Stage) -> bool {
    records.iter().any(|r| r.stage == stage && r.status == "ok")
}

fn stage_certify(spec: &ExperimentSpec, built: &Built, w: &mut Writer, outputs: &mut RunOutputs) -> Result<()> {
    let err = stage_err(Stage::Certify);
    let grid = spec.grid_spec(built.sys.dim_u).expect("validated");
    let mut reports = Vec::new();
    let mut envelopes = serde_json::Map::new();

    if let (Some(v), Some(iss)) = (&built.lyapunov, &spec.iss) {
        let law = {
            let v = v.clone();
            FeedbackLaw::new("v = -grad V", move |x| scale(&v.gradient(x), -1.0))
        };
        let outer = built.sys.with_feedback(&law);
        let a = [&iss.a1, &iss.a2, &iss.a3, &iss.gamma].map(|d| d.build().expect("validated"));
        let r = check_iss_lyapunov(v, &outer, &a[0], &a[1], &a[2], &a[3], &grid).map_err(|e| err(e.to_string()))?;
        reports.push(r);
    }
    if let Some(merged) = &built.merged {
        let wf = merged.as_field();
        let closed = built.closed_loop();
        let grid = grid.clone().excluding(built.geom.unsafe_set.clone());
        let fit = fit_merged_envelopes(&wf, &closed, &built.geom, &grid).map_err(|e| err(e.to_string()))?;
        let mut r = check_merged_w(&wf, &closed, &built.geom, fit.c, fit.funcs(), &grid)
            .map_err(|e| err(e.to_string()))?;
        r.notes.extend(fit.notes());
        r.notes.push(OUTSIDE_VALUE_NOTE.to_string());
        envelopes.insert("merged_c".into(), serde_json::json!(fit.c));
        envelopes.insert(
            "merged_alphas".into(),
            decls_json(&fit.alphas.iter().map(|a| a.decl.clone()).collect::<Vec<_>>()),
        );
        reports.push(r);
    }
    if let Some(b) = &built.barrier {
        let r = check_robust_barrier(b, &built.sys, Some(&built.geom.locality), &grid).map_err(|e| err(e.to_string()))?;
        reports.push(r);
        if let Some(issf) = &spec.issf {
            let closed = built.closed_loop();
            let (alphas, notes) = issf_alphas(spec, built, &grid).map_err(&err)?;
            let refs = [&alphas[0], &alphas[1], &alphas[2], &alphas[3]];
            let mut r =
                check_issf_barrier(b, &closed, &built.issf_geom, refs, &grid).map_err(|e| err(e.to_string()))?;
            r.notes.extend(notes);
            reports.push(r);
            if issf.alphas.is_none() {
                let labels: Vec<String> = alphas.iter().map(|a| a.label().to_string()).collect();
                envelopes.insert("issf_alphas".into(), serde_json::json!(labels));
            }
            outputs.issf_alphas = Some(alphas);
        }
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialise");
    w.put("certificates.json", json.as_bytes())?;
    w.put("certificates.txt", summary_table(&reports).as_bytes())?;
    if !envelopes.is_empty() {
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(envelopes)).expect("json");
        w.put("envelopes.json", text.as_bytes())?;
    }
    outputs.reports = reports;
    Ok(())
}

type Alphas4 = [MonotoneFn; 4];

/// Declared or grid-fitted barrier envelopes for the closed loop, with fit notes.
fn issf_alphas(
    spec: &ExperimentSpec,
    built: &Built,
    grid: &GridSpec,
) -> std::result::Result<(Alphas4, Vec<String>), String> {
    let issf = spec.issf.as_ref().ok_or("no issf section")?;
    if let Some(decls) = &issf.alphas {
        let mut out = Vec::with_capacity(4);
        for d in decls {
            out.push(d.build().map_err(|e| e.to_string())?);
        }
        return Ok((out.try_into().expect("four alphas"), Vec::new()));
    }
    let b = built.barrier.as_ref().ok_or("no barrier function")?;
    let fit = fit_issf_envelopes(b, &built.closed_loop(), &built.issf_geom, grid, issf.shapes)
        .map_err(|e| e.to_string())?;
    let notes = fit
        .alphas
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.note.as_ref().map(|n| format!("a{}: {n}", i + 1)))
        .collect();
    Ok((fit.alphas.map(|a| a.func), notes))
}

#[derive(Serialize)]
struct GainsReport {
    theta: f64,
    epsilon: f64,
    kappa: f64,
    delta: f64,
    d2: f64,
    alphas: Vec<String>,
    phi_at_input_bound: f64,
    input_bound: f64,
    initial_conditions: Vec<InitialGains>,
}

#[derive(Serialize)]
struct InitialGains {
    x0: Vec<f64>,
    dist_to_unsafe: f64,
    mu_at_zero: f64,
    admissible_at_zero: bool,
    witness: Option<crate::issf_bounds::AdmissibilityWitness>,
}

fn stage_gains(spec: &ExperimentSpec, built: &Built, w: &mut Writer, outputs: &mut RunOutputs) -> Result<()> {
    let err = stage_err(Stage::Gains);
    let issf = spec.issf.as_ref().expect("validated");
    let alphas = match outputs.issf_alphas.clone() {
        Some(a) => a,
        None => {
            let grid = spec.grid_spec(built.sys.dim_u);
            let grid = grid.unwrap_or_else(|| GridSpec::new(vec![(0.0, 1.0); built.sys.dim_x], 2));
            let (a, _) = issf_alphas(spec, built, &grid).map_err(&err)?;
            outputs.issf_alphas = Some(a.clone());
            a
        }
    };
    let bundle = build_gains(&alphas[0], &alphas[1], &alphas[2], &alphas[3], issf.theta, issf.epsilon, &built.issf_geom)
        .map_err(|e| err(e.to_string()))?;
    let iss = match &spec.iss {
        Some(d) => {
            let a = [&d.a1, &d.a2, &d.a3, &d.gamma].map(|x| x.build().expect("validated"));
            Some(build_iss_gains(&a[0], &a[1], &a[2], &a[3], d.theta).map_err(|e| err(e.to_string()))?)
        }
        None => None,
    };
    let u = spec.disturbance.build(built.sys.dim_u, spec.seed).map_err(|e| err(e.to_string()))?;
    let ub = u.linf_bound();
    let phi_ub = bundle.phi.eval(ub).map_err(|e| err(e.to_string()))?;
    let barrier = built.barrier.as_ref().expect("validated");
    let mut ics = Vec::new();
    for x0 in &spec.initial_conditions {
        let d0 = built.issf_geom.dist_to_unsafe(x0);
        let mu0 = bundle.mu.eval(d0, 0.0).map_err(|e| err(e.to_string()))?;
        let witness = match &iss {
            Some(g) => Some(
                bundle
                    .admissibility_witness(g, x0, barrier.value(x0), ub)
                    .map_err(|e| err(e.to_string()))?,
            ),
            None => None,
        };
        ics.push(InitialGains {
            x0: x0.clone(),
            dist_to_unsafe: d0,
            mu_at_zero: mu0,
            admissible_at_zero: mu0.min(bundle.delta) - phi_ub > 0.0,
            witness,
        });
    }
    let report = GainsReport {
        theta: bundle.theta,
        epsilon: bundle.epsilon,
        kappa: built.issf_geom.kappa,
        delta: bundle.delta,
        d2: built.issf_geom.d2,
        alphas: alphas.iter().map(|a| a.label().to_string()).collect(),
        phi_at_input_bound: phi_ub,
        input_bound: ub,
        initial_conditions: ics,
    };
    w.put("gains.json", serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
    outputs.bundle = Some(bundle);
    outputs.iss_gains = iss;
    Ok(())
}

fn stage_simulate(spec: &ExperimentSpec, built: &Built, w: &mut Writer, outputs: &mut RunOutputs) -> Result<()> {
    let err = stage_err(Stage::Simulate);
    let u = spec.disturbance.build(built.sys.dim_u, spec.seed).map_err(|e| err(e.to_string()))?;
    let results = integrate_many(
        &built.sys,
        &spec.initial_conditions,
        &u,
        built.law.as_ref(),
        spec.horizon,
        spec.dt,
        &built.geom,
    );
    let mut trajs = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let tr = r.map_err(|e| err(format!("initial condition {i}: {e}")))?;
        w.put_with(&format!("traj_{i}.csv"), |b| tr.write_csv(b))?;
        w.put_with(&format!("events_{i}.csv"), |b| tr.write_events_csv(b))?;
        trajs.push(tr);
    }
    outputs.trajectories = trajs;
    Ok(())
}

#[derive(Serialize)]
struct IssfSummary {
    index: usize,
    verdict: crate::issf_bounds::IssfVerdict,
    worst_residual: f64,
    excused_samples: usize,
}

fn stage_issf(w: &mut Writer, outputs: &mut RunOutputs) -> Result<()> {
    let err = stage_err(Stage::Issf);
    let bundle = outputs.bundle.as_ref().expect("checked");
    let mut summary = Vec::new();
    let mut verdicts = Vec::new();
    for (i, tr) in outputs.trajectories.iter().enumerate() {
        let ev = evaluate_issf_inequality(bundle, tr, RESIDUAL_TOL).map_err(|e| err(e.to_string()))?;
        w.put_with(&format!("issf_residual_{i}.csv"), |b| ev.write_csv(b))?;
        summary.push(IssfSummary {
            index: i,
            verdict: ev.verdict,
            worst_residual: ev.worst_residual,
            excused_samples: ev.excused,
        });
        verdicts.push(ev.verdict);
    }
    w.put("issf_summary.json", serde_json::to_string_pretty(&summary).expect("json").as_bytes())?;
    outputs.issf_verdicts = verdicts;
    Ok(())
}

fn stage_envelope(spec: &ExperimentSpec, w: &mut Writer, outputs: &RunOutputs) -> Result<()> {
    let bundle = outputs.bundle.as_ref().expect("checked");
    let env = safety_envelope(bundle, &spec.envelope_k).map_err(|e| stage_err(Stage::Envelope)(e.to_string()))?;
    w.put_with("envelope.csv", |b| env.write_csv(b))
}

/// Writes plot layers and SVG renderings for a set of trajectories.
pub fn emit_plot_data(
    out: &Path,
    geom: &SafetyGeometry,
    trajs: &[Trajectory],
    window: Option<[(f64, f64); 2]>,
) -> Result<Vec<String>> {
    let mut w = Writer {
        out: out.to_path_buf(),
        files: Vec::new(),
    };
    emit_plot_layers(&mut w, geom, trajs, window)?;
    Ok(w.files.into_iter().map(|f| f.path).collect())
}

fn emit_plot_layers(
    w: &mut Writer,
    geom: &SafetyGeometry,
    trajs: &[Trajectory],
    window: Option<[(f64, f64); 2]>,
) -> Result<()> {
    let planar = geom.dim() == 2;
    if planar {
        w.put_with("layer_unsafe.csv", |b| plot::write_boundary_layer(b, &geom.unsafe_set, 256))?;
        w.put_with("layer_locality.csv", |b| plot::write_boundary_layer(b, &geom.locality, 256))?;
    }
    w.put_with("layer_trajectories.csv", |b| plot::write_trajectory_layer(b, trajs))?;
    if planar {
        let window = window.unwrap_or_else(|| default_window(geom, trajs));
        w.put("portrait.svg", plot::portrait_svg(geom, trajs, window).as_bytes())?;
    }
    if let Some(first) = trajs.first() {
        w.put("timeseries.svg", plot::timeseries_svg(first).as_bytes())?;
    }
    Ok(())
}

fn default_window(geom: &SafetyGeometry, trajs: &[Trajectory]) -> [(f64, f64); 2] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut include = |p: &[f64]| {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    };
    for b in geom.locality.balls().iter().chain(geom.unsafe_set.balls().iter()) {
        include(&[b.center[0] - b.radius, b.center[1] - b.radius]);
        include(&[b.center[0] + b.radius, b.center[1] + b.radius]);
    }
    for tr in trajs {
        for s in &tr.states {
            include(s);
        }
    }
    if !lo[0].is_finite() {
        return [(-1.0, 1.0), (-1.0, 1.0)];
    }
    let pad = |a: f64, b: f64| {
        let p = 0.05 * (b - a).max(1e-9);
        (a - p, b + p)
    };
    [pad(lo[0], hi[0]), pad(lo[1], hi[1])]
}

fn stage_plot(spec: &ExperimentSpec, built: &Built, w: &mut Writer, outputs: &RunOutputs) -> Result<()> {
    let window = spec
        .grid
        .as_ref()
        .filter(|g| g.bounds.len() == 2)
        .map(|g| [g.bounds[0], g.bounds[1]]);
    emit_plot_layers(w, &built.geom, &outputs.trajectories, window)?;
    if let (Some(m), Some(win)) = (&built.merged, window) {
        w.put_with("w_grid.csv", |b| write_grid_csv(b, &|x| m.value(x), win, 111))?;
        let bt = &m.b_part;
        w.put_with("barrier_grid.csv", |b| write_grid_csv(b, &|x| bt.value(x), win, 111))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_specs_parse_and_round_trip() {
        for name in ["paper_sec4", "paper_sec4_nominal"] {
            let spec = ExperimentSpec::bundled(name).unwrap();
            let again = ExperimentSpec::from_json(&spec.to_json()).unwrap();
            assert_eq!(spec, again);
            assert_eq!(spec.hash(), again.hash());
        }
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = ExperimentSpec::from_json("{\n  \"name\": 3\n}").unwrap_err();
        assert!(matches!(err, ExperimentError::Parse { line: 2, .. }), "{err}");
        let unknown = PAPER_SEC4.replacen("\"horizon\"", "\"horizon_typo\": 1, \"horizon\"", 1);
        assert!(matches!(ExperimentSpec::from_json(&unknown), Err(ExperimentError::Parse { .. })));
    }

    #[test]
    fn unsafe_set_outside_locality_rejected() {
        let mut spec = ExperimentSpec::bundled("paper_sec4").unwrap();
        spec.geometry.locality = Region::disk([40.0, 6.0], 3.0);
        let err = spec.validate().unwrap_err();
        assert!(matches!(&err, ExperimentError::Field { path, .. } if path == "geometry"), "{err}");
    }
}
