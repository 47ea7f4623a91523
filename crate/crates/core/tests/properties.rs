use nalgebra::Vector3;
use proptest::prelude::*;

use capsule_nav::curve::ArcLengthCurve;
use capsule_nav::environment::{preset, PRESETS};
use capsule_nav::following::{rmmpc_solve, MpcConfig, ReferenceWindow};
use capsule_nav::localization::CapsuleState;
use capsule_nav::magnetics::{dipole_field, dipole_force_torque, field_gradient, Dipole};
use capsule_nav::rng::{stream, Stream};
use capsule_nav::trajectory::{gmm_em, Trajectory};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn direction() -> impl Strategy<Value = Vector3<f64>> {
    vec3(1.0)
        .prop_filter("non-degenerate", |v| v.norm() > 0.1)
        .prop_map(|v| v.normalize())
}

fn separated() -> impl Strategy<Value = (Dipole, Dipole)> {
    (direction(), 0.05..0.3f64, direction(), 1.0..80.0f64, direction()).prop_map(|(u, d, ma, a, mc)| {
        let actuator = Dipole::new(Vector3::new(0.2, 0.2, 0.25), ma * a).unwrap();
        let capsule = Dipole::new(actuator.position + u * d, mc * 0.963).unwrap();
        (actuator, capsule)
    })
}

fn state(p: Vector3<f64>, v: Vector3<f64>) -> CapsuleState {
    CapsuleState {
        position: p,
        moment: Vector3::x(),
        heading: None,
        velocity: v,
        timestamp: 0.0,
    }
}

proptest! {
    #[test]
    fn forces_between_dipoles_are_equal_and_opposite((a, c) in separated()) {
        let on_capsule = dipole_force_torque(&a, &c).unwrap().force;
        let on_actuator = dipole_force_torque(&c, &a).unwrap().force;
        prop_assert!((on_capsule + on_actuator).norm() <= 1e-12 * on_capsule.norm().max(1e-300));
    }

    #[test]
    fn field_gradient_is_symmetric_and_traceless((a, c) in separated()) {
        let g = field_gradient(&a, &c.position).unwrap();
        let scale = g.norm();
        prop_assert!((g - g.transpose()).norm() <= 1e-12 * scale);
        prop_assert!(g.trace().abs() <= 1e-12 * scale);
    }

    #[test]
    fn field_falls_off_as_inverse_cube((a, c) in separated(), k in 1.5..4.0f64) {
        let r = c.position - a.position;
        let near = dipole_field(&a, &c.position).unwrap();
        let far = dipole_field(&a, &(a.position + r * k)).unwrap();
        prop_assert!((far * k.powi(3) - near).norm() <= 1e-12 * near.norm());
    }

    #[test]
    fn centerline_points_project_onto_themselves(i in 0..PRESETS.len(), f in 0.0..1.0f64) {
        let env = preset(PRESETS[i]).unwrap();
        let s = f * env.total_length();
        let (back, d) = env.project(&env.point(s));
        prop_assert!(d < 1e-9);
        prop_assert!((back - s).abs() < 1e-6);
        let t = env.tangent(s).unwrap();
        prop_assert!((t.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arc_length_map_round_trips(steps in prop::collection::vec((direction(), 0.01..0.05f64), 2..10), f in 0.0..1.0f64) {
        let mut p = Vector3::zeros();
        let mut knots = vec![p];
        for (u, l) in steps {
            p += u * l;
            knots.push(p);
        }
        let curve = ArcLengthCurve::new(&knots, ArcLengthCurve::DEFAULT_TABLE).unwrap();
        let l = f * curve.total_length();
        prop_assert!((curve.length_at_param(curve.param_at_length(l)) - l).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nearest_parameter_matches_dense_search(
        amplitude in 0.0..0.06f64,
        waves in 0.5..3.0f64,
        query in vec3(0.05),
    ) {
        let knots: Vec<_> = (0..15)
            .map(|i| {
                let x = i as f64 * 0.02;
                Vector3::new(x, amplitude * (waves * std::f64::consts::PI * x / 0.28).sin(), 0.1)
            })
            .collect();
        let traj = Trajectory::from_knots(&knots).unwrap();
        let p = traj.point(0.5) + query;
        let s = traj.nearest_parameter(&p);
        let n = 20_000;
        let dense = (0..=n).map(|i| (traj.point(i as f64 / n as f64) - p).norm()).fold(f64::INFINITY, f64::min);
        prop_assert!((traj.point(s) - p).norm() <= dense + 1e-9);
    }

    #[test]
    fn mpc_forces_stay_within_bound(
        p in vec3(0.02),
        v in vec3(0.02),
        target in vec3(0.05),
        velocity in vec3(0.03),
        f_max in 0.01..0.3f64,
    ) {
        let c = MpcConfig { f_max, ..MpcConfig::default() };
        let n = c.horizon;
        let reference = ReferenceWindow {
            positions: (0..=n).map(|i| target + velocity * (i as f64 * c.dt)).collect(),
            velocities: vec![velocity; n + 1],
            dt: c.dt,
        };
        let sol = rmmpc_solve(&state(p, v), &reference, &c, None).unwrap();
        prop_assert_eq!(sol.forces.len(), n);
        prop_assert!(sol.forces.iter().all(|f| f.norm() <= f_max * (1.0 + 1e-12)));
        prop_assert!(sol.cost_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn em_log_likelihood_never_decreases(points in prop::collection::vec(vec3(0.1), 20..120), k in 1usize..5, seed in 0u64..1000) {
        let mut rng = stream(seed, Stream::Clustering);
        if let Ok(fit) = gmm_em(&points, k, &mut rng) {
            prop_assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)));
            prop_assert_eq!(fit.assignments.len(), points.len());
            let total: f64 = fit.components.iter().map(|g| g.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
