// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod comparison;
pub mod dynamics;
pub mod expr;
pub mod field;
pub mod geometry;
pub mod linalg;
pub mod certification;
pub mod merging;
pub mod issf_bounds;
pub mod plot;
pub mod experiment;

pub use certification::{CertificateReport, GridSpec, Verdict};
pub use comparison::{FnDecl, KKFn, KLFn, MonotoneFn};
pub use dynamics::{integrate, ControlAffineSystem, DisturbanceSignal, FeedbackLaw, Trajectory};
pub use experiment::{run_experiment, ExperimentSpec, RunManifest};
pub use field::ScalarField;
pub use geometry::{Region, SafetyGeometry};
pub use issf_bounds::{build_gains, IssfGainBundle};
