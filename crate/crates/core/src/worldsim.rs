//! Seeded straight-road traffic in which the other vehicles follow their
//! leader (possibly the ego), rendered as ego-centered occupancy grids.
//!
//! World frame: the road runs along `+x`, lanes are stacked along `+y`
//! starting at `y = 0`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gridops::{ChannelRole, GridSpec, Ogm, ValueMode};
use crate::kinematics::{ActionBounds, ActionCmd, EgoState, Measurements};
use crate::record::SequenceRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Fast ego, real-valued frames with map, occupancy and ego channels.
    Highway,
    /// Slow ego, binary frames with occupancy and ego channels; parked cars
    /// and buildings line the road.
    Urban,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(Mode::Highway),
            "urban" => Ok(Mode::Urban),
            other => Err(Error::config(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Highway => "highway",
            Mode::Urban => "urban",
        })
    }
}

impl Mode {
    /// The mode whose rendering produces `grid`'s channels.
    pub fn of_grid(grid: &GridSpec) -> Result<Self> {
        [Mode::Highway, Mode::Urban]
            .into_iter()
            .find(|m| m.roles() == grid.roles && m.value_mode() == grid.mode)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no scenario mode renders channels {:?}",
                    grid.roles
                ))
            })
    }

    pub fn value_mode(self) -> ValueMode {
        match self {
            Mode::Highway => ValueMode::Real,
            Mode::Urban => ValueMode::Binary,
        }
    }

    pub fn roles(self) -> Vec<ChannelRole> {
        match self {
            Mode::Highway => vec![ChannelRole::Map, ChannelRole::Occupancy, ChannelRole::Ego],
            Mode::Urban => vec![ChannelRole::Occupancy, ChannelRole::Ego],
        }
    }

    fn lanes(self) -> usize {
        match self {
            Mode::Highway => 3,
            Mode::Urban => 2,
        }
    }

    fn lane_width(self) -> f64 {
        match self {
            Mode::Highway => 3.5,
            Mode::Urban => 3.0,
        }
    }

    /// Desired-speed range of the ego and of the other vehicles.
    fn speeds(self) -> ([f64; 2], [f64; 2]) {
        match self {
            Mode::Highway => ([9.0, 11.0], [11.5, 15.0]),
            Mode::Urban => ([3.0, 4.5], [4.0, 6.0]),
        }
    }

    fn car_size(self) -> [f64; 2] {
        match self {
            Mode::Highway => [4.5, 1.8],
            Mode::Urban => [4.0, 1.8],
        }
    }
}

/// Longitudinal car-following law of the other vehicles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FollowParams {
    pub k_v: f64,
    pub k_g: f64,
    /// Desired bumper gap per unit speed, seconds.
    pub headway: f64,
    pub a_max: f64,
}

impl Default for FollowParams {
    fn default() -> Self {
        Self {
            k_v: 0.5,
            k_g: 0.3,
            headway: 2.0,
            a_max: 5.0,
        }
    }
}

impl FollowParams {
    /// `k_v(v_des − v) + k_g·min(0, gap − headway·v)`, clamped to `±a_max`.
    /// `gap` is `None` without a leader.
    pub fn accel(&self, speed: f64, v_des: f64, gap: Option<f64>) -> f64 {
        let mut a = self.k_v * (v_des - speed);
        if let Some(gap) = gap {
            a += self.k_g * (gap - self.headway * speed).min(0.0);
        }
        a.clamp(-self.a_max, self.a_max)
    }
}

/// Another road user; moves along `+x` in a fixed lane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vehicle {
    pub x: f64,
    pub lane: usize,
    pub speed: f64,
    pub v_des: f64,
    pub length: f64,
    pub width: f64,
}

/// Axis-aligned static rectangle in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub size: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub lanes: usize,
    pub lane_width: f64,
    pub obstacles: Vec<Obstacle>,
    pub ego: EgoState,
    pub ego_size: [f64; 2],
    pub agents: Vec<Vehicle>,
    pub time: f64,
    pub dt: f64,
    /// Steps so far in which two vehicles overlapped.
    pub collisions: usize,
}

impl WorldState {
    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Lane whose band contains the ego reference point, if on the road.
    pub fn ego_lane(&self) -> Option<usize> {
        let y = self.ego.m.p[1];
        let lane = (y / self.lane_width).floor();
        (lane >= 0.0 && (lane as usize) < self.lanes).then_some(lane as usize)
    }

    /// Bumper gap from agent `i` to the nearest vehicle ahead in its lane
    /// (the ego included), with that vehicle's index (`None` = ego).
    pub fn leader_gap(&self, i: usize) -> Option<(Option<usize>, f64)> {
        let me = &self.agents[i];
        let front = me.x + me.length / 2.0;
        let mut best: Option<(Option<usize>, f64)> = None;
        let mut consider = |idx: Option<usize>, x: f64, length: f64| {
            if x > me.x {
                let gap = x - length / 2.0 - front;
                if best.is_none_or(|(_, g)| gap < g) {
                    best = Some((idx, gap));
                }
            }
        };
        for (j, other) in self.agents.iter().enumerate() {
            if j != i && other.lane == me.lane {
                consider(Some(j), other.x, other.length);
            }
        }
        if self.ego_lane() == Some(me.lane) {
            consider(None, self.ego.m.p[0], self.ego_size[0]);
        }
        best
    }

    /// Nearest vehicle ahead of the ego in its lane: bumper gap and speed.
    pub fn ego_leader(&self) -> Option<(f64, f64)> {
        let lane = self.ego_lane()?;
        let front = self.ego.m.p[0] + self.ego_size[0] / 2.0;
        self.agents
            .iter()
            .filter(|a| a.lane == lane && a.x > self.ego.m.p[0])
            .map(|a| (a.x - a.length / 2.0 - front, a.speed))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn any_overlap(&self) -> bool {
        let ego = (self.ego.m.p, self.ego_size);
        let boxes: Vec<([f64; 2], [f64; 2])> = self
            .agents
            .iter()
            .map(|a| ([a.x, self.lane_center(a.lane)], [a.length, a.width]))
            .chain(std::iter::once(ego))
            .collect();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                let (a, b) = (boxes[i], boxes[j]);
                if (a.0[0] - b.0[0]).abs() < (a.1[0] + b.1[0]) / 2.0
                    && (a.0[1] - b.0[1]).abs() < (a.1[1] + b.1[1]) / 2.0
                {
                    return true;
                }
            }
        }
        false
    }
}

/// Advances every vehicle by one step. The ego applies `ego_action`; each
/// other vehicle applies the car-following law using the state at the
/// start of the step.
pub fn world_step(
    state: &WorldState,
    ego_action: &ActionCmd,
    follow: &FollowParams,
) -> Result<WorldState> {
    let dt = state.dt;
    let accels: Vec<f64> = (0..state.agents.len())
        .map(|i| {
            let a = &state.agents[i];
            follow.accel(a.speed, a.v_des, state.leader_gap(i).map(|(_, g)| g))
        })
        .collect();
    let mut next = state.clone();
    next.ego = state.ego.step(ego_action, dt)?.0;
    for (agent, accel) in next.agents.iter_mut().zip(accels) {
        agent.speed = (agent.speed + accel * dt).max(0.0);
        agent.x += agent.speed * dt;
    }
    next.time = state.time + dt;
    if next.any_overlap() {
        next.collisions += 1;
    }
    Ok(next)
}

/// Raster geometry of the rendered frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSpec {
    pub h: usize,
    pub w: usize,
    pub meters_per_pixel: f64,
    /// Ego footprint in pixels, `[rows, cols]`.
    pub ego_footprint: [usize; 2],
}

impl ViewSpec {
    pub fn grid(&self, mode: Mode) -> GridSpec {
        GridSpec {
            h: self.h,
            w: self.w,
            roles: mode.roles(),
            anchor: [self.h / 2, self.w / 2],
            meters_per_pixel: self.meters_per_pixel,
            mode: mode.value_mode(),
        }
    }

    pub fn default_for(mode: Mode, size: usize) -> Self {
        // Both modes show 24 m ahead of and behind a 64-pixel ego-centered view.
        let half_range = match mode {
            Mode::Highway => 24.0,
            Mode::Urban => 16.0,
        };
        let mpp = half_range / (size / 2) as f64;
        let footprint = if size >= 64 { [9, 4] } else { [5, 2] };
        Self {
            h: size,
            w: size,
            meters_per_pixel: mpp,
            ego_footprint: footprint,
        }
    }
}

/// A rectangle rotated by `heading`, in any 2-D frame.
#[derive(Clone, Copy, Debug)]
struct Rect {
    center: [f64; 2],
    half: [f64; 2],
    heading: f64,
}

const SUPERSAMPLE: usize = 8;

/// Fraction of each pixel covered by `rect`, which is given in pixel
/// coordinates `(row, col)`. Coverage is merged into `plane` by maximum.
fn stamp(plane: &mut [f32], h: usize, w: usize, rect: Rect, binary: bool) {
    let (s, c) = rect.heading.sin_cos();
    let ext = rect.half[0].abs() * c.abs() + rect.half[1].abs() * s.abs();
    let ext_c = rect.half[0].abs() * s.abs() + rect.half[1].abs() * c.abs();
    let r_lo = (rect.center[0] - ext - 1.0).floor().max(0.0) as usize;
    let r_hi = ((rect.center[0] + ext + 1.0).ceil().max(0.0) as usize).min(h);
    let c_lo = (rect.center[1] - ext_c - 1.0).floor().max(0.0) as usize;
    let c_hi = ((rect.center[1] + ext_c + 1.0).ceil().max(0.0) as usize).min(w);
    let step = 1.0 / SUPERSAMPLE as f64;
    for r in r_lo..r_hi {
        for col in c_lo..c_hi {
            let mut hits = 0usize;
            for sr in 0..SUPERSAMPLE {
                let pr = r as f64 - 0.5 + (sr as f64 + 0.5) * step - rect.center[0];
                for sc in 0..SUPERSAMPLE {
                    let pc = col as f64 - 0.5 + (sc as f64 + 0.5) * step - rect.center[1];
                    let along = c * pr + s * pc;
                    let across = -s * pr + c * pc;
                    if along.abs() < rect.half[0] && across.abs() < rect.half[1] {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            let v = if binary {
                if cover >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                cover
            };
            let cell = &mut plane[r * w + col];
            *cell = cell.max(v);
        }
    }
}

/// Maps a world rectangle (length along `x` rotated by `heading`) into the
/// ego-centered pixel frame. Rows grow backwards and columns to the right of
/// the ego.
fn to_pixels(
    state: &WorldState,
    view: &ViewSpec,
    center: [f64; 2],
    size: [f64; 2],
    heading: f64,
) -> Rect {
    let ego = &state.ego;
    let (s, c) = ego.heading.sin_cos();
    let d = [center[0] - ego.m.p[0], center[1] - ego.m.p[1]];
    let fwd = c * d[0] + s * d[1];
    let left = -s * d[0] + c * d[1];
    let mpp = view.meters_per_pixel;
    let anchor = [(view.h / 2) as f64, (view.w / 2) as f64];
    Rect {
        center: [anchor[0] - fwd / mpp, anchor[1] - left / mpp],
        // The body axis points along −row, so the rotation sign flips.
        half: [size[0] / 2.0 / mpp, size[1] / 2.0 / mpp],
        heading: -(heading - ego.heading),
    }
}

/// Renders the ego-centered frame of `state`.
pub fn rasterize(state: &WorldState, view: &ViewSpec, mode: Mode) -> Result<Ogm> {
    let grid = view.grid(mode);
    grid.validate()?;
    let binary = grid.mode == ValueMode::Binary;
    let (h, w) = (view.h, view.w);
    let mut frame = Ogm::zeros(grid.clone());
    for (ch, role) in grid.roles.iter().enumerate() {
        let plane = frame.channel_mut(ch);
        match role {
            ChannelRole::Map => {
                let width = state.lanes as f64 * state.lane_width;
                let rect = to_pixels(
                    state,
                    view,
                    [state.ego.m.p[0], width / 2.0],
                    [1e4, width],
                    0.0,
                );
                stamp(plane, h, w, rect, binary);
            }
            ChannelRole::Occupancy => {
                for a in &state.agents {
                    let rect = to_pixels(
                        state,
                        view,
                        [a.x, state.lane_center(a.lane)],
                        [a.length, a.width],
                        0.0,
                    );
                    stamp(plane, h, w, rect, binary);
                }
                for o in &state.obstacles {
                    stamp(
                        plane,
                        h,
                        w,
                        to_pixels(state, view, o.center, o.size, 0.0),
                        binary,
                    );
                }
            }
            ChannelRole::Ego => {
                let [fr, fc] = view.ego_footprint;
                let anchor = grid.anchor;
                // Even footprints extend half a pixel further to the right.
                let center = [
                    anchor[0] as f64,
                    anchor[1] as f64 + if fc % 2 == 0 { 0.5 } else { 0.0 },
                ];
                let center = [center[0] + if fr % 2 == 0 { 0.5 } else { 0.0 }, center[1]];
                let rect = Rect {
                    center,
                    half: [fr as f64 / 2.0, fc as f64 / 2.0],
                    heading: 0.0,
                };
                stamp(plane, h, w, rect, binary);
            }
        }
    }
    Ok(frame)
}

/// Rounds every value to the nearest multiple of 1/255, so frames survive
/// 8-bit storage exactly.
pub fn quantize(frame: Ogm) -> Result<Ogm> {
    let grid = frame.grid.clone();
    let data = frame
        .into_data()
        .into_iter()
        .map(|v| (v * 255.0).round() / 255.0)
        .collect();
    Ogm::new(grid, data)
}

/// Empirical mean and standard deviation of each action component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl ActionStats {
    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a ActionCmd>) -> Result<Self> {
        let (mut n, mut s, mut s2) = (0usize, [0.0; 2], [0.0; 2]);
        for a in actions {
            for (i, v) in [a.alpha, a.tau].into_iter().enumerate() {
                s[i] += v;
                s2[i] += v * v;
            }
            n += 1;
        }
        if n < 2 {
            return Err(Error::invalid(
                "action statistics need at least two actions",
            ));
        }
        let n = n as f64;
        let mean = [s[0] / n, s[1] / n];
        let std = [0, 1].map(|i| ((s2[i] / n - mean[i] * mean[i]).max(0.0) * n / (n - 1.0)).sqrt());
        Ok(Self { mean, std })
    }
}

/// Out-of-distribution ego control for the rare-action suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RarePolicy {
    /// `(−25, 0)` for 20 steps.
    HardBrake,
    /// Maximum heading rate for 20 steps.
    HardSteer,
    /// Every component drawn beyond the 2σ band of the training actions,
    /// inside the action bounds.
    TailSample(ActionStats),
}

pub const RARE_STEPS: usize = 20;

impl RarePolicy {
    pub fn parse(s: &str, stats: Option<ActionStats>) -> Result<Self> {
        match s {
            "hard-brake" => Ok(RarePolicy::HardBrake),
            "hard-steer" => Ok(RarePolicy::HardSteer),
            "tail-sample" => stats
                .map(RarePolicy::TailSample)
                .ok_or_else(|| Error::config("tail-sample needs training action statistics")),
            other => Err(Error::config(format!("unknown rare policy `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RarePolicy::HardBrake => "hard-brake",
            RarePolicy::HardSteer => "hard-steer",
            RarePolicy::TailSample(_) => "tail-sample",
        }
    }
}

/// Draws a value of one action component outside `mean ± 2·std` but within
/// `[lo, hi]`; falls back to the nearer bound when a tail is empty.
fn tail_value<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let (band_lo, band_hi) = (mean - 2.0 * std, mean + 2.0 * std);
    let below = (band_lo - lo).max(0.0);
    let above = (hi - band_hi).max(0.0);
    if below + above == 0.0 {
        return if (hi - mean).abs() >= (mean - lo).abs() {
            hi
        } else {
            lo
        };
    }
    let u = rng.random_range(0.0..below + above);
    if u < below {
        // Strictly below the band.
        (lo + u).min(band_lo - f64::EPSILON * band_lo.abs().max(1.0))
    } else {
        let v = band_hi + (u - below);
        v.max(band_hi + f64::EPSILON * band_hi.abs().max(1.0))
            .min(hi)
    }
}

pub fn sample_rare_actions<R: Rng + ?Sized>(
    rng: &mut R,
    policy: &RarePolicy,
    bounds: &ActionBounds,
) -> Vec<ActionCmd> {
    match policy {
        RarePolicy::HardBrake => vec![ActionCmd::new(-25.0, 0.0); RARE_STEPS],
        RarePolicy::HardSteer => vec![ActionCmd::new(0.0, bounds.tau[1]); RARE_STEPS],
        RarePolicy::TailSample(stats) => (0..RARE_STEPS)
            .map(|_| {
                ActionCmd::new(
                    tail_value(
                        rng,
                        stats.mean[0],
                        stats.std[0],
                        bounds.alpha[0],
                        bounds.alpha[1],
                    ),
                    tail_value(
                        rng,
                        stats.mean[1],
                        stats.std[1],
                        bounds.tau[0],
                        bounds.tau[1],
                    ),
                )
            })
            .collect(),
    }
}

/// How the ego is driven.
#[derive(Clone, Debug, PartialEq)]
pub enum EgoPolicy {
    /// Car following with noise, braking episodes and lane keeping.
    Recorded,
    /// Recorded policy for `warmup` steps, then the given actions, then the
    /// recorded policy again.
    Scripted {
        warmup: usize,
        actions: Vec<ActionCmd>,
    },
    /// Recorded policy for `warmup` steps, then a rare-action sequence.
    Rare { warmup: usize, policy: RarePolicy },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub mode: Mode,
    pub n_agents: usize,
    /// Frames per sequence.
    pub length: usize,
    pub policy: EgoPolicy,
    pub seed: u64,
    pub view: ViewSpec,
    pub dt: f64,
    pub bounds: ActionBounds,
    pub follow: FollowParams,
}

impl ScenarioSpec {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            n_agents: match mode {
                Mode::Highway => 8,
                Mode::Urban => 6,
            },
            length: 40,
            policy: EgoPolicy::Recorded,
            seed,
            view: ViewSpec::default_for(mode, 64),
            dt: 0.1,
            bounds: ActionBounds::default(),
            follow: FollowParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::config("sequence length must be at least 2"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        self.view
            .grid(self.mode)
            .validate()
            .map_err(|e| Error::config(e.to_string()))
    }
}

/// Recorded ego driver: follows its own leader, adds acceleration noise and
/// occasional braking episodes, and steers back to its lane center.
struct RecordedDriver {
    v_des: f64,
    lane: usize,
    brake_left: usize,
    brake_accel: f64,
    noise: Normal<f64>,
    steer_noise: Normal<f64>,
}

impl RecordedDriver {
    fn act<R: Rng>(
        &mut self,
        state: &WorldState,
        follow: &FollowParams,
        bounds: &ActionBounds,
        rng: &mut R,
    ) -> ActionCmd {
        let speed = state.ego.m.speed();
        let mut alpha = follow.accel(speed, self.v_des, state.ego_leader().map(|(g, _)| g))
            + self.noise.sample(rng);
        if self.brake_left == 0 && rng.random::<f64>() < 0.04 {
            self.brake_left = rng.random_range(4..10);
            self.brake_accel = rng.random_range(-4.0..-1.5);
        }
        if self.brake_left > 0 {
            alpha = self.brake_accel;
            self.brake_left -= 1;
        }
        let lateral = state.lane_center(self.lane) - state.ego.m.p[1];
        let tau = 0.3 * lateral - 1.5 * state.ego.heading + self.steer_noise.sample(rng);
        ActionCmd::new(alpha, tau).clamped(bounds)
    }
}

fn initial_state<R: Rng>(spec: &ScenarioSpec, rng: &mut R) -> (WorldState, RecordedDriver) {
    let mode = spec.mode;
    let (lanes, lane_width) = (mode.lanes(), mode.lane_width());
    let (ego_speeds, agent_speeds) = mode.speeds();
    let car = mode.car_size();
    let ego_lane = match mode {
        Mode::Highway => 1,
        Mode::Urban => 0,
    };
    let ego_v = rng.random_range(ego_speeds[0]..ego_speeds[1]);
    let ego = EgoState::new(
        Measurements {
            p: [0.0, (ego_lane as f64 + 0.5) * lane_width],
            v: [ego_v, 0.0],
        },
        0.0,
    );
    let half_range = spec.view.meters_per_pixel * (spec.view.h / 2) as f64;
    let mut agents: Vec<Vehicle> = Vec::new();
    let fits = |agents: &[Vehicle], lane: usize, x: f64| {
        let clear = car[0] + 3.0;
        (lane != ego_lane || (x - 0.0).abs() > clear)
            && agents
                .iter()
                .all(|a| a.lane != lane || (a.x - x).abs() > clear)
    };
    let new_vehicle = |rng: &mut R, lane: usize, x: f64| {
        let v_des = rng.random_range(agent_speeds[0]..agent_speeds[1]);
        Vehicle {
            x,
            lane,
            speed: rng.random_range(ego_speeds[0]..v_des.max(ego_speeds[0] + 1e-3)),
            v_des,
            length: car[0],
            width: car[1],
        }
    };
    // A follower and a leader in the ego lane make the interaction visible.
    if spec.n_agents > 0 {
        let gap = rng.random_range(0.3..0.6) * half_range;
        agents.push(new_vehicle(rng, ego_lane, -(car[0] + gap)));
    }
    if spec.n_agents > 1 {
        let gap = rng.random_range(0.3..0.6) * half_range;
        let mut lead = new_vehicle(rng, ego_lane, car[0] + gap);
        lead.speed = lead.speed.max(ego_v);
        agents.push(lead);
    }
    let mut attempts = 0;
    while agents.len() < spec.n_agents && attempts < 1000 {
        attempts += 1;
        let lane = rng.random_range(0..lanes);
        let x = rng.random_range(-1.4 * half_range..1.4 * half_range);
        if fits(&agents, lane, x) {
            let v = new_vehicle(rng, lane, x);
            agents.push(v);
        }
    }
    let mut obstacles = Vec::new();
    if mode == Mode::Urban {
        let road = lanes as f64 * lane_width;
        let span = [-3.0 * half_range, 6.0 * half_range];
        // Parked cars along the right curb.
        let mut x = span[0] + rng.random_range(0.0..6.0);
        while x < span[1] {
            obstacles.push(Obstacle {
                center: [x, -1.2],
                size: [car[0], car[1]],
            });
            x += car[0] + rng.random_range(1.0..9.0);
        }
        // Buildings behind the sidewalks on both sides.
        for (side, y) in [(0, -6.5), (1, road + 5.5)] {
            let mut x = span[0] + rng.random_range(0.0..4.0) + side as f64;
            while x < span[1] {
                let len = rng.random_range(6.0..14.0);
                obstacles.push(Obstacle {
                    center: [x + len / 2.0, y],
                    size: [len, 5.0],
                });
                x += len + rng.random_range(2.0..6.0);
            }
        }
    }
    let driver = RecordedDriver {
        v_des: ego_v,
        lane: ego_lane,
        brake_left: 0,
        brake_accel: 0.0,
        noise: Normal::new(0.0, 0.4).expect("valid"),
        steer_noise: Normal::new(0.0, 0.02).expect("valid"),
    };
    let state = WorldState {
        lanes,
        lane_width,
        obstacles,
        ego,
        ego_size: car,
        agents,
        time: 0.0,
        dt: spec.dt,
        collisions: 0,
    };
    (state, driver)
}

/// World states and ego actions of a scenario, before rendering.
pub fn simulate(spec: &ScenarioSpec) -> Result<(Vec<WorldState>, Vec<ActionCmd>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut state, mut driver) = initial_state(spec, &mut rng);
    let (warmup, script): (usize, Vec<ActionCmd>) = match &spec.policy {
        EgoPolicy::Recorded => (usize::MAX, Vec::new()),
        EgoPolicy::Scripted { warmup, actions } => (*warmup, actions.clone()),
        EgoPolicy::Rare { warmup, policy } => {
            let mut rare_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_ba5e);
            (
                *warmup,
                sample_rare_actions(&mut rare_rng, policy, &spec.bounds),
            )
        }
    };
    let mut states = vec![state.clone()];
    let mut actions = Vec::with_capacity(spec.length - 1);
    for step in 0..spec.length - 1 {
        // The driver always runs so its random stream does not depend on the script.
        let recorded = driver.act(&state, &spec.follow, &spec.bounds, &mut rng);
        let a = match step.checked_sub(warmup).and_then(|i| script.get(i)) {
            Some(a) => a.clamped(&spec.bounds),
            None => recorded,
        };
        state = world_step(&state, &a, &spec.follow)?;
        actions.push(a);
        states.push(state.clone());
    }
    Ok((states, actions))
}

/// Simulates and renders one sequence; deterministic per seed.
pub fn generate(spec: &ScenarioSpec) -> Result<SequenceRecord> {
    let (states, actions) = simulate(spec)?;
    let frames = states
        .iter()
        .map(|s| rasterize(s, &spec.view, spec.mode).and_then(quantize))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceRecord {
        grid: spec.view.grid(spec.mode),
        dt: spec.dt,
        frames,
        measurements: states.iter().map(|s| s.ego.m).collect(),
        actions,
        collisions: states.last().map_or(0, |s| s.collisions),
    })
}

/// One sequence per seed, driven by `policy` right after frame `warmup`.
pub fn rare_suite(
    base: &ScenarioSpec,
    policy: &RarePolicy,
    warmup: usize,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<SequenceRecord>> {
    seeds
        .into_iter()
        .map(|seed| {
            let mut spec = base.clone();
            spec.seed = seed;
            spec.policy = EgoPolicy::Rare {
                warmup,
                policy: *policy,
            };
            generate(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_world(speed: f64) -> WorldState {
        WorldState {
            lanes: 2,
            lane_width: 3.5,
            obstacles: vec![],
            ego: EgoState::new(
                Measurements {
                    p: [0.0, 1.75],
                    v: [speed, 0.0],
                },
                0.0,
            ),
            ego_size: [4.5, 1.8],
            agents: vec![],
            time: 0.0,
            dt: 0.1,
            collisions: 0,
        }
    }

    fn car(x: f64, lane: usize, speed: f64, v_des: f64) -> Vehicle {
        Vehicle {
            x,
            lane,
            speed,
            v_des,
            length: 4.5,
            width: 1.8,
        }
    }

    #[test]
    fn lone_agent_approaches_desired_speed_monotonically() {
        let mut s = empty_world(0.0);
        s.agents.push(car(0.0, 1, 5.0, 12.0));
        let follow = FollowParams::default();
        let mut last = 5.0;
        for _ in 0..300 {
            s = world_step(&s, &ActionCmd::default(), &follow).unwrap();
            let v = s.agents[0].speed;
            assert!(v >= last && v <= 12.0);
            last = v;
        }
        assert!((last - 12.0).abs() < 1e-3);
    }

    #[test]
    fn follower_brakes_when_ego_brakes() {
        let mut s = empty_world(10.0);
        s.agents.push(car(-12.0, 0, 10.0, 10.0));
        let s = world_step(&s, &ActionCmd::new(-25.0, 0.0), &FollowParams::default()).unwrap();
        let next = world_step(&s, &ActionCmd::new(-25.0, 0.0), &FollowParams::default()).unwrap();
        assert!(next.agents[0].speed < s.agents[0].speed);
    }

    #[test]
    fn empty_road_at_rest_only_advances_time() {
        let s = empty_world(0.0);
        let next = world_step(&s, &ActionCmd::default(), &FollowParams::default()).unwrap();
        assert_eq!(next.time, 0.1);
        assert_eq!(WorldState { time: 0.0, ..next }, s);
    }

    #[test]
    fn empty_world_renders_only_the_map() {
        let s = empty_world(10.0);
        let view = ViewSpec::default_for(Mode::Highway, 64);
        let f = rasterize(&s, &view, Mode::Highway).unwrap();
        assert!(f.mass(0) > 0.0);
        assert_eq!(f.mass(1), 0.0);
    }

    #[test]
    fn binary_agent_area() {
        let mut s = empty_world(0.0);
        s.ego.m.p = [0.0, 0.0];
        // Edges on pixel boundaries: 4 m × 2 m at 0.25 m/px is 16 × 8 pixels.
        s.agents.push(Vehicle {
            x: 4.125,
            lane: 0,
            speed: 0.0,
            v_des: 0.0,
            length: 4.0,
            width: 2.0,
        });
        s.lane_width = 2.25;
        let view = ViewSpec {
            h: 64,
            w: 64,
            meters_per_pixel: 0.25,
            ego_footprint: [9, 4],
        };
        let f = rasterize(&s, &view, Mode::Urban).unwrap();
        assert_eq!(f.mass(0), 128.0);
        assert_eq!(f.mass(1), 36.0);
    }

    #[test]
    fn rendering_is_translation_consistent() {
        let mut s = empty_world(10.0);
        s.agents.push(car(8.0, 0, 10.0, 12.0));
        s.obstacles.push(Obstacle {
            center: [-5.0, -3.0],
            size: [6.0, 4.0],
        });
        let view = ViewSpec::default_for(Mode::Urban, 64);
        let a = rasterize(&s, &view, Mode::Urban).unwrap();
        s.ego.m.p[0] += 16.0;
        s.agents[0].x += 16.0;
        s.obstacles[0].center[0] += 16.0;
        assert_eq!(rasterize(&s, &view, Mode::Urban).unwrap(), a);
    }

    #[test]
    fn hard_brake_is_the_fixed_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_rare_actions(&mut rng, &RarePolicy::HardBrake, &ActionBounds::default());
        assert_eq!(a, vec![ActionCmd::new(-25.0, 0.0); 20]);
    }

    #[test]
    fn tail_samples_leave_the_two_sigma_band() {
        let stats = ActionStats {
            mean: [0.0, 0.0],
            std: [1.0, 0.05],
        };
        let bounds = ActionBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = sample_rare_actions(&mut rng, &RarePolicy::TailSample(stats), &bounds);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            a,
            sample_rare_actions(&mut rng, &RarePolicy::TailSample(stats), &bounds)
        );
        for x in a {
            assert!(x.alpha.abs() > 2.0 && x.tau.abs() > 0.1);
            assert!((bounds.alpha[0]..=bounds.alpha[1]).contains(&x.alpha));
            assert!((bounds.tau[0]..=bounds.tau[1]).contains(&x.tau));
        }
    }
}
