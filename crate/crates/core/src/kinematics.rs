//! Deterministic ego update: unicycle model with `tau` acting as heading rate.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Ego position and velocity in the world frame (meters, meters/second).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Measurements {
    pub p: [f64; 2],
    pub v: [f64; 2],
}

impl Measurements {
    pub fn speed(&self) -> f64 {
        self.v[0].hypot(self.v[1])
    }

    /// Direction of travel; `None` at rest.
    pub fn heading(&self) -> Option<f64> {
        (self.speed() > 0.0).then(|| self.v[1].atan2(self.v[0]))
    }

    fn is_finite(&self) -> bool {
        self.p.iter().chain(&self.v).all(|x| x.is_finite())
    }
}

/// Longitudinal acceleration (m/s²) and heading rate (rad/s).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActionCmd {
    pub alpha: f64,
    pub tau: f64,
}

impl ActionCmd {
    pub fn new(alpha: f64, tau: f64) -> Self {
        Self { alpha, tau }
    }

    pub fn clamped(self, bounds: &ActionBounds) -> Self {
        Self {
            alpha: self.alpha.clamp(bounds.alpha[0], bounds.alpha[1]),
            tau: self.tau.clamp(bounds.tau[0], bounds.tau[1]),
        }
    }
}

/// Closed action box `alpha[0]..=alpha[1]` × `tau[0]..=tau[1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionBounds {
    pub alpha: [f64; 2],
    pub tau: [f64; 2],
}

impl Default for ActionBounds {
    /// Wide enough to hold the hard-brake command of the rare-action suite.
    fn default() -> Self {
        Self {
            alpha: [-25.0, 5.0],
            tau: [-0.5, 0.5],
        }
    }
}

/// Ego displacement over one step, expressed in the ego body frame at the
/// start of the step (`dp[0]` forward, `dp[1]` to the left), and the heading
/// change (counter-clockwise positive).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseDelta {
    pub dp: [f64; 2],
    pub dtheta: f64,
}

impl PoseDelta {
    pub const ZERO: PoseDelta = PoseDelta {
        dp: [0.0, 0.0],
        dtheta: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.dp == [0.0, 0.0] && self.dtheta == 0.0
    }
}

/// Advances the ego by one step of `dt` seconds. Heading at rest is taken as 0.
pub fn measurement_step(
    m: &Measurements,
    a: &ActionCmd,
    dt: f64,
) -> Result<(Measurements, PoseDelta)> {
    measurement_step_from(m, m.heading().unwrap_or(0.0), a, dt)
}

/// As [`measurement_step`], with `heading` used only when the ego is at rest.
pub fn measurement_step_from(
    m: &Measurements,
    heading: f64,
    a: &ActionCmd,
    dt: f64,
) -> Result<(Measurements, PoseDelta)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    if !m.is_finite() || !a.alpha.is_finite() || !a.tau.is_finite() || !heading.is_finite() {
        return Err(Error::invalid("non-finite measurement or action"));
    }
    let theta = m.heading().unwrap_or(heading);
    let speed = (m.speed() + a.alpha * dt).max(0.0);
    let dtheta = a.tau * dt;
    let theta_next = theta + dtheta;
    let (sin, cos) = theta_next.sin_cos();
    let world_step = [speed * dt * cos, speed * dt * sin];
    let next = Measurements {
        p: [m.p[0] + world_step[0], m.p[1] + world_step[1]],
        v: [speed * cos, speed * sin],
    };
    let (dsin, dcos) = dtheta.sin_cos();
    let delta = PoseDelta {
        dp: [speed * dt * dcos, speed * dt * dsin],
        dtheta,
    };
    Ok((next, delta))
}

/// Actions recovered from a measured trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredActions {
    pub actions: Vec<ActionCmd>,
    /// The first sample was at rest, so its heading had to be assumed 0.
    pub heading_assumed: bool,
}

fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Inverts [`measurement_step`] along a trajectory. At rest the previous
/// heading is carried forward.
pub fn inverse_actions(trajectory: &[Measurements], dt: f64) -> Result<RecoveredActions> {
    if trajectory.len() < 2 {
        return Err(Error::invalid("trajectory needs at least two samples"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let heading_assumed = trajectory[0].heading().is_none();
    let mut heading = trajectory[0].heading().unwrap_or(0.0);
    let mut actions = Vec::with_capacity(trajectory.len() - 1);
    for pair in trajectory.windows(2) {
        let (m, next) = (&pair[0], &pair[1]);
        if !m.is_finite() || !next.is_finite() {
            return Err(Error::invalid("non-finite measurement in trajectory"));
        }
        let next_heading = next.heading().unwrap_or(heading);
        actions.push(ActionCmd {
            alpha: (next.speed() - m.speed()) / dt,
            tau: wrap_angle(next_heading - heading) / dt,
        });
        heading = next_heading;
    }
    Ok(RecoveredActions {
        actions,
        heading_assumed,
    })
}

/// Ego measurements plus the heading to use while at rest.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EgoState {
    pub m: Measurements,
    pub heading: f64,
}

impl EgoState {
    /// `heading` is used only if `m` is at rest.
    pub fn new(m: Measurements, heading: f64) -> Self {
        Self {
            heading: m.heading().unwrap_or(heading),
            m,
        }
    }

    pub fn step(&self, a: &ActionCmd, dt: f64) -> Result<(EgoState, PoseDelta)> {
        let (m, d) = measurement_step_from(&self.m, self.heading, a, dt)?;
        let heading = m.heading().unwrap_or(self.heading + d.dtheta);
        Ok((EgoState { m, heading }, d))
    }
}

/// Motion from `from` to `to` in the body frame of `from`.
pub fn pose_delta(from: &EgoState, to: &EgoState) -> PoseDelta {
    let (s, c) = from.heading.sin_cos();
    let d = [to.m.p[0] - from.m.p[0], to.m.p[1] - from.m.p[1]];
    PoseDelta {
        dp: [c * d[0] + s * d[1], -s * d[0] + c * d[1]],
        dtheta: wrap_angle(to.heading - from.heading),
    }
}

/// Applies `actions` in sequence from `start`, returning every measurement
/// including `start`.
pub fn replay(
    start: &Measurements,
    heading: f64,
    actions: &[ActionCmd],
    dt: f64,
) -> Result<Vec<Measurements>> {
    let mut state = EgoState::new(*start, heading);
    let mut out = vec![*start];
    for a in actions {
        state = state.step(a, dt)?.0;
        out.push(state.m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(p: [f64; 2], v: [f64; 2]) -> Measurements {
        Measurements { p, v }
    }

    #[test]
    fn rest_stays_at_rest() {
        let (m, d) =
            measurement_step(&at([0.0, 0.0], [0.0, 0.0]), &ActionCmd::default(), 0.1).unwrap();
        assert_eq!(m, at([0.0, 0.0], [0.0, 0.0]));
        assert_eq!(d.dtheta, 0.0);
    }

    #[test]
    fn constant_velocity() {
        let (m, d) =
            measurement_step(&at([0.0, 0.0], [10.0, 0.0]), &ActionCmd::default(), 0.1).unwrap();
        assert_eq!(d.dp, [1.0, 0.0]);
        assert_eq!(m.p, [1.0, 0.0]);
        assert_eq!(m.v, [10.0, 0.0]);
    }

    #[test]
    fn acceleration_scales_displacement() {
        let (m, d) =
            measurement_step(&at([0.0, 0.0], [10.0, 0.0]), &ActionCmd::new(2.0, 0.0), 0.1).unwrap();
        assert!((m.speed() - 10.2).abs() < 1e-12);
        assert!((d.dp[0] - 1.02).abs() < 1e-12);
        assert_eq!(d.dp[1], 0.0);
    }

    #[test]
    fn heading_accumulates_tau() {
        let mut m = at([0.0, 0.0], [10.0, 0.0]);
        let mut total = 0.0;
        for _ in 0..10 {
            let (next, d) = measurement_step(&m, &ActionCmd::new(0.0, 0.5), 0.1).unwrap();
            total += d.dtheta;
            m = next;
        }
        assert!((m.heading().unwrap() - 0.5).abs() < 1e-12);
        assert!((total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn speed_clamps_at_zero() {
        let (m, d) = measurement_step(
            &at([0.0, 0.0], [1.0, 0.0]),
            &ActionCmd::new(-25.0, 0.0),
            0.1,
        )
        .unwrap();
        assert_eq!(m.speed(), 0.0);
        assert_eq!(d.dp, [0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = at([0.0, 0.0], [1.0, 0.0]);
        assert!(measurement_step(&m, &ActionCmd::default(), 0.0).is_err());
        assert!(measurement_step(&m, &ActionCmd::new(f64::NAN, 0.0), 0.1).is_err());
        assert!(measurement_step(
            &at([f64::INFINITY, 0.0], [0.0, 0.0]),
            &ActionCmd::default(),
            0.1
        )
        .is_err());
    }

    #[test]
    fn straight_line_inverts_to_zero_actions() {
        let traj: Vec<_> = (0..5).map(|i| at([i as f64, 0.0], [10.0, 0.0])).collect();
        let rec = inverse_actions(&traj, 0.1).unwrap();
        assert!(rec.actions.iter().all(|a| *a == ActionCmd::default()));
        assert!(!rec.heading_assumed);
    }

    #[test]
    fn single_step_deceleration() {
        let traj = [at([0.0, 0.0], [10.0, 0.0]), at([0.8, 0.0], [8.0, 0.0])];
        let rec = inverse_actions(&traj, 0.1).unwrap();
        assert!((rec.actions[0].alpha + 20.0).abs() < 1e-12);
    }

    #[test]
    fn rest_start_is_flagged() {
        let traj = [at([0.0, 0.0], [0.0, 0.0]), at([0.1, 0.0], [1.0, 0.0])];
        assert!(inverse_actions(&traj, 0.1).unwrap().heading_assumed);
    }
}
