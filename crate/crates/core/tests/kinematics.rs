use anticipation::kinematics::{
    inverse_actions, measurement_step, replay, ActionCmd, Measurements,
};
use proptest::prelude::*;

fn actions_strategy() -> impl Strategy<Value = Vec<ActionCmd>> {
    prop::collection::vec((-3.0f64..3.0, -0.5f64..0.5), 1..40)
        .prop_map(|v| v.into_iter().map(|(a, t)| ActionCmd::new(a, t)).collect())
}

proptest! {
    #[test]
    fn known_actions_are_recovered(
        actions in actions_strategy(),
        speed in 13.0f64..20.0,
        heading in -3.0f64..3.0,
    ) {
        let start = Measurements { p: [3.0, -2.0], v: [speed * heading.cos(), speed * heading.sin()] };
        let traj = replay(&start, heading, &actions, 0.1).unwrap();
        let rec = inverse_actions(&traj, 0.1).unwrap();
        for (got, want) in rec.actions.iter().zip(&actions) {
            prop_assert!((got.alpha - want.alpha).abs() < 1e-9);
            prop_assert!((got.tau - want.tau).abs() < 1e-9);
        }
        let again = replay(&start, heading, &rec.actions, 0.1).unwrap();
        for (a, b) in again.iter().zip(&traj) {
            prop_assert!((a.p[0] - b.p[0]).abs() < 1e-9 && (a.p[1] - b.p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_action_keeps_speed_and_line(speed in 0.0f64..30.0, steps in 1usize..50) {
        let mut m = Measurements { p: [0.0, 0.0], v: [speed, 0.0] };
        for _ in 0..steps {
            m = measurement_step(&m, &ActionCmd::default(), 0.1).unwrap().0;
            prop_assert_eq!(m.v, [speed, 0.0]);
            prop_assert_eq!(m.p[1], 0.0);
        }
        prop_assert!((m.p[0] - speed * 0.1 * steps as f64).abs() < 1e-9 * (1.0 + m.p[0]));
    }

    #[test]
    fn speed_never_negative_and_dtheta_is_tau_dt(
        vx in -20.0f64..20.0, vy in -20.0f64..20.0,
        alpha in -25.0f64..5.0, tau in -0.5f64..0.5, dt in 0.01f64..0.5,
    ) {
        let m = Measurements { p: [0.0, 0.0], v: [vx, vy] };
        let (next, d) = measurement_step(&m, &ActionCmd::new(alpha, tau), dt).unwrap();
        prop_assert!(next.speed() >= 0.0);
        prop_assert_eq!(d.dtheta, tau * dt);
        let bound = (m.speed() + 25.0 * dt) * dt;
        prop_assert!(d.dp[0].hypot(d.dp[1]) <= bound + 1e-12);
    }
}
