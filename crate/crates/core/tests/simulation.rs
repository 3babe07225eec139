use issf::dynamics::{integrate, ControlAffineSystem, DisturbanceKind, DisturbanceSignal, EventKind, FeedbackLaw};
use issf::experiment::{Built, ExperimentSpec};
use issf::geometry::{Region, SafetyGeometry};
use issf::linalg::{norm, scale};
use issf::ScalarField;

fn geom() -> SafetyGeometry {
    SafetyGeometry::new(Region::disk([4.0, 6.0], 2.0), Region::disk([4.0, 6.0], 3.0)).unwrap()
}

fn sinusoid() -> DisturbanceSignal {
    DisturbanceSignal::new(
        2,
        DisturbanceKind::Sinusoid {
            amplitude: vec![2.0, 1.5],
            frequency: vec![1.3, 0.7],
            phase: vec![0.0, 0.4],
        },
    )
    .unwrap()
}

#[test]
fn step_halving_shows_fourth_order() {
    let spec = ExperimentSpec::bundled("paper_sec4").unwrap();
    let built = Built::new(&spec).unwrap();
    let law = built.law.as_ref().unwrap();
    let u = sinusoid();
    // Starts far from the obstacle so the trajectory stays where the law is smooth.
    let x0 = [-6.0, -3.0];
    let end = |dt: f64| integrate(&built.sys, &x0, &u, Some(law), 2.0, dt, &built.geom).unwrap().final_state().to_vec();
    let (a, b, c) = (end(0.04), end(0.02), end(0.01));
    let e1 = norm(&[a[0] - b[0], a[1] - b[1]]);
    let e2 = norm(&[b[0] - c[0], b[1] - c[1]]);
    let order = (e1 / e2).log2();
    assert!(order >= 3.5, "observed order {order} ({e1:e}, {e2:e})");
}

#[test]
fn outer_loop_gain_bound() {
    // v = -grad V gives x' = -M x + u with M = [[2, 1], [1, 2]], so the
    // steady state is M^-1 u and |M^-1| = 1.
    let v = ScalarField::from_expr(2, "x1^2 + x1*x2 + x2^2").unwrap();
    let law = FeedbackLaw::new("-grad V", move |x| scale(&v.gradient(x), -1.0));
    let sys = ControlAffineSystem::single_integrator(2);
    let bound = |u: &[f64]| norm(u);
    for (k, dir) in [[1.0, -1.0], [1.0, 1.0], [1.0, 0.3], [0.0, 1.0]].iter().enumerate() {
        let n = norm(dir);
        let u = [3.0 * dir[0] / n, 3.0 * dir[1] / n];
        let sig = DisturbanceSignal::new(2, DisturbanceKind::Constant { value: u.to_vec() }).unwrap();
        let tr = integrate(&sys, &[5.0, 8.0], &sig, Some(&law), 30.0, 1e-2, &geom()).unwrap();
        let tail = tr.norm_x[tr.len() - 200..].iter().copied().fold(0.0, f64::max);
        assert!(tail <= 1.05 * bound(&u), "direction {k}: {tail}");
        if k == 0 {
            // Slowest eigendirection attains the bound.
            assert!((tail - bound(&u)).abs() <= 0.05 * bound(&u), "{tail}");
        }
    }
}

#[test]
fn enter_events_are_sound() {
    let sys = ControlAffineSystem::single_integrator(2);
    let u = DisturbanceSignal::new(2, DisturbanceKind::Constant { value: vec![3.0, 0.0] }).unwrap();
    let dt = 1e-3;
    let tr = integrate(&sys, &[-1.0, 6.0], &u, None, 2.0, dt, &geom()).unwrap();
    let enter: Vec<_> = tr.events.iter().filter(|e| e.kind == EventKind::EnterD).collect();
    assert_eq!(enter.len(), 1);
    let e = enter[0];
    // x1 = -1 + 3t reaches the disk edge x1 = 2 at t = 1.
    assert!((e.time - 1.0).abs() <= dt / 100.0 + 1e-12, "{}", e.time);
    let (i, j) = (e.sample, e.sample + 1);
    let g = geom();
    assert!(!g.in_unsafe(&tr.states[i]) && g.in_unsafe(&tr.states[j]));
    assert!(tr.dist_to_d[i] <= 3.0 * dt + 1e-12);
    for e in &tr.events {
        if e.kind == EventKind::EnterD {
            assert!(tr.dist_to_d[e.sample] <= 3.0 * dt + 1e-12);
        }
    }
}

#[test]
fn nominal_run_settles_at_origin() {
    let spec = ExperimentSpec::bundled("paper_sec4_nominal").unwrap();
    let built = Built::new(&spec).unwrap();
    let u = DisturbanceSignal::zero(2);
    for x0 in &spec.initial_conditions {
        let tr = integrate(&built.sys, x0, &u, built.law.as_ref(), spec.horizon, spec.dt, &built.geom).unwrap();
        assert!(tr.min_dist_to_d() > 0.0);
        assert!(norm(tr.final_state()) <= 1e-2, "{x0:?} ends at {:?}", tr.final_state());
    }
}
