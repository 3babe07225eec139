use std::fs;

use issf::experiment::{emit_plot_data, run_experiment, ExperimentError, ExperimentSpec, Stage};
use issf::geometry::{Region, SafetyGeometry};

fn small(stages: Vec<Stage>) -> ExperimentSpec {
    let mut spec = ExperimentSpec::bundled("paper_sec4").unwrap().with_stages(stages);
    spec.grid.as_mut().unwrap().resolution = 61;
    spec.horizon = 2.0;
    spec
}

fn field_path(err: ExperimentError) -> String {
    match err {
        ExperimentError::Field { path, .. } => path,
        other => panic!("expected a field error, got {other}"),
    }
}

#[test]
fn certification_only_writes_no_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, out) = run_experiment(&small(vec![Stage::Certify]), dir.path()).unwrap();
    assert!(manifest.ok());
    assert_eq!(out.reports.len(), 4);
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.iter().any(|n| n == "certificates.json"));
    assert!(!names.iter().any(|n| n.starts_with("traj_") || n.starts_with("events_")));
}

#[test]
fn full_run_writes_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(vec![Stage::Certify, Stage::Gains, Stage::Simulate, Stage::Issf, Stage::Envelope, Stage::Plot]);
    let (manifest, out) = run_experiment(&spec, dir.path()).unwrap();
    assert!(manifest.ok(), "{:?}", manifest.stages);
    for f in [
        "spec.json",
        "gains.json",
        "traj_0.csv",
        "events_3.csv",
        "issf_residual_0.csv",
        "issf_summary.json",
        "envelope.csv",
        "layer_unsafe.csv",
        "layer_locality.csv",
        "layer_trajectories.csv",
        "portrait.svg",
        "timeseries.svg",
        "w_grid.csv",
        "barrier_grid.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let head = fs::read_to_string(dir.path().join("traj_0.csv")).unwrap();
    assert!(head.starts_with("t,x1,x2,u1,u2,dist_D,norm_x,in_X\n"));
    assert_eq!(out.trajectories.len(), 4);
    let written: ExperimentSpec = ExperimentSpec::from_file(&dir.path().join("spec.json")).unwrap();
    assert_eq!(written, spec);
}

#[test]
fn rejects_unsafe_set_outside_locality() {
    let mut spec = small(vec![Stage::Simulate]);
    spec.geometry.unsafe_set = Region::disk([4.0, 8.0], 2.0);
    assert_eq!(field_path(spec.validate().unwrap_err()), "geometry");
}

#[test]
fn validation_names_the_field() {
    let mut spec = small(vec![Stage::Simulate]);
    spec.initial_conditions.push(vec![4.0, 6.0]);
    assert_eq!(field_path(spec.validate().unwrap_err()), "initial_conditions[4]");

    let mut spec = small(vec![Stage::Simulate]);
    spec.issf.as_mut().unwrap().theta = 1.5;
    assert_eq!(field_path(spec.validate().unwrap_err()), "issf.theta");

    let text = ExperimentSpec::bundled("paper_sec4")
        .unwrap()
        .to_json()
        .replace("single_integrator", "double_integrator");
    assert_eq!(field_path(ExperimentSpec::from_json(&text).unwrap_err()), "system.name");

    let text = ExperimentSpec::bundled("paper_sec4").unwrap().to_json().replace("x1*x2", "x1*x3");
    assert_eq!(field_path(ExperimentSpec::from_json(&text).unwrap_err()), "functions.lyapunov");

    let spec = small(vec![Stage::Envelope]);
    assert_eq!(field_path(spec.validate().unwrap_err()), "stages");
}

#[test]
fn stage_failure_is_recorded_and_dependents_skipped() {
    let mut spec = small(vec![Stage::Gains, Stage::Simulate, Stage::Issf]);
    spec.control.law = issf::experiment::LawKind::None;
    spec.system = issf::experiment::SystemDecl::Expressions {
        f: vec!["40*x1".into(), "40*x2".into()],
        g: vec![vec!["1".into(), "0".into()], vec!["0".into(), "1".into()]],
    };
    spec.issf.as_mut().unwrap().alphas = Some(std::array::from_fn(|_| issf::FnDecl::Identity));
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = run_experiment(&spec, dir.path()).unwrap();
    let status: Vec<(Stage, &str)> = manifest.stages.iter().map(|s| (s.stage, s.status.as_str())).collect();
    assert_eq!(status, vec![(Stage::Gains, "ok"), (Stage::Simulate, "error"), (Stage::Issf, "skipped")]);
    assert!(!manifest.ok());
}

#[test]
fn one_dimensional_run_skips_the_portrait() {
    let text = r#"{
        "name": "line",
        "seed": 1,
        "system": { "kind": "catalog", "name": "single_integrator", "dim": 1 },
        "geometry": {
            "unsafe": { "shape": "ball", "center": [3.0], "radius": 1.0 },
            "locality": { "shape": "ball", "center": [3.0], "radius": 2.0 }
        },
        "functions": { "lyapunov": "x1^2" },
        "control": { "law": "lyapunov_gradient" },
        "initial_conditions": [[-2.0], [6.0]],
        "horizon": 3.0,
        "dt": 0.01,
        "stages": ["simulate", "plot"]
    }"#;
    let spec = ExperimentSpec::from_json(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (manifest, out) = run_experiment(&spec, dir.path()).unwrap();
    assert!(manifest.ok(), "{:?}", manifest.stages);
    assert!(dir.path().join("timeseries.svg").exists());
    assert!(!dir.path().join("portrait.svg").exists());
    // x' = -2x from 6 passes through the unsafe interval (2, 4).
    assert!(out.trajectories[1].events.iter().any(|e| e.kind == issf::dynamics::EventKind::EnterD));
}

#[test]
fn empty_trajectory_set_plots_geometry_only() {
    let dir = tempfile::tempdir().unwrap();
    let geom = SafetyGeometry::new(Region::disk([4.0, 6.0], 2.0), Region::disk([4.0, 6.0], 3.0)).unwrap();
    let files = emit_plot_data(dir.path(), &geom, &[], None).unwrap();
    assert!(files.contains(&"portrait.svg".to_string()));
    assert!(!files.contains(&"timeseries.svg".to_string()));
    let svg = fs::read_to_string(dir.path().join("portrait.svg")).unwrap();
    assert!(svg.contains("<ellipse") && !svg.contains("<polyline"));
}

#[test]
fn manifests_repeat_for_the_same_seed() {
    let spec = small(vec![Stage::Gains, Stage::Simulate, Stage::Issf]);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, _) = run_experiment(&spec, a.path()).unwrap();
    let (mb, _) = run_experiment(&spec, b.path()).unwrap();
    assert_eq!(ma.digest, mb.digest);
    assert_eq!(ma.files, mb.files);
    let (mc, _) = run_experiment(&spec.clone().with_seed(7), c.path()).unwrap();
    assert_ne!(ma.digest, mc.digest);
}
