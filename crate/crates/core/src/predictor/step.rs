//! One prediction step: ego anticipation by rule, environment prediction,
//! and re-centering on the ego.

use std::collections::VecDeque;

use diffcalc::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{PredictorConfig, Variant};
use super::net::{LatentChoice, NetInputs, Network, Noise};
use super::SampleMode;
use crate::error::{Error, Result};
use crate::gridops::{iot1, iot2, oot, ChannelRole, DiffFrame, Ogm};
use crate::kinematics::{pose_delta, ActionCmd, EgoState, PoseDelta};

/// The last `t` frames and ego states, with their consecutive environment
/// differences cached.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub frames: VecDeque<Ogm>,
    pub states: VecDeque<EgoState>,
    diffs: VecDeque<Vec<f32>>,
    pub dt: f64,
    channels: Vec<usize>,
    aligned: bool,
    cfg: PredictorConfig,
}

impl Window {
    pub fn new(
        cfg: &PredictorConfig,
        frames: &[Ogm],
        states: &[EgoState],
        dt: f64,
    ) -> Result<Self> {
        let t = cfg.input_frames;
        if frames.len() != t || states.len() != t {
            return Err(Error::invalid(format!(
                "window needs {t} frames and states, got {} and {}",
                frames.len(),
                states.len()
            )));
        }
        if let Some(f) = frames.iter().find(|f| f.grid != cfg.grid) {
            return Err(Error::Shape {
                op: "window",
                left: format!("{:?}", cfg.grid.shape()),
                right: format!("{:?}", f.grid.shape()),
            });
        }
        let mut w = Self {
            frames: VecDeque::with_capacity(t + 1),
            states: VecDeque::with_capacity(t + 1),
            diffs: VecDeque::with_capacity(t),
            dt,
            channels: cfg.predicted_channels(),
            aligned: !cfg.ablation.no_rbm,
            cfg: cfg.clone(),
        };
        for (f, s) in frames.iter().zip(states) {
            w.append(f.clone(), *s)?;
        }
        Ok(w)
    }

    fn append(&mut self, frame: Ogm, state: EgoState) -> Result<()> {
        if let (Some(prev), Some(prev_state)) = (self.frames.back(), self.states.back()) {
            let next = if self.aligned {
                iot2(&frame, &pose_delta(prev_state, &state), self.cfg.interp)?
            } else {
                frame.clone()
            };
            let mut d = Vec::with_capacity(self.channels.len() * frame.grid.h * frame.grid.w);
            for &c in &self.channels {
                d.extend(
                    next.channel(c)
                        .iter()
                        .zip(prev.channel(c))
                        .map(|(a, b)| a - b),
                );
            }
            self.diffs.push_back(d);
        }
        self.frames.push_back(frame);
        self.states.push_back(state);
        Ok(())
    }

    /// Slides the window: appends a frame and drops the oldest.
    pub fn push(&mut self, frame: Ogm, state: EgoState) -> Result<()> {
        self.append(frame, state)?;
        self.frames.pop_front();
        self.states.pop_front();
        self.diffs.pop_front();
        Ok(())
    }

    pub fn last_frame(&self) -> &Ogm {
        self.frames.back().expect("window is never empty")
    }

    pub fn last_state(&self) -> &EgoState {
        self.states.back().expect("window is never empty")
    }
}

/// Everything one step knows before the environment is predicted.
#[derive(Clone, Debug)]
pub struct StepContext<'a> {
    pub window: &'a Window,
    pub action: ActionCmd,
    pub next: EgoState,
    pub delta: PoseDelta,
    /// `i_t` with the ego moved to its anticipated pose (unchanged without
    /// rule-based anticipation).
    pub anticipated: Ogm,
    /// Ground truth `i_{t+1}`, when known.
    pub truth: Option<&'a Ogm>,
}

fn gather(frame: &Ogm, channels: &[usize]) -> Vec<f64> {
    channels
        .iter()
        .flat_map(|&c| frame.channel(c).iter().map(|&v| f64::from(v)))
        .collect()
}

impl<'a> StepContext<'a> {
    pub fn new(window: &'a Window, action: ActionCmd, truth: Option<&'a Ogm>) -> Result<Self> {
        let (next, delta) = window.last_state().step(&action, window.dt)?;
        let anticipated = if window.cfg.ablation.no_rbm {
            window.last_frame().clone()
        } else {
            iot1(window.last_frame(), &delta, window.cfg.interp)?
        };
        Ok(Self {
            window,
            action,
            next,
            delta,
            anticipated,
            truth,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.window.cfg
    }

    /// The truth in the coordinates of the anticipated frame.
    pub fn aligned_truth(&self) -> Result<Option<Ogm>> {
        match self.truth {
            None => Ok(None),
            Some(t) if self.config().ablation.no_rbm => Ok(Some(t.clone())),
            Some(t) => Ok(Some(iot2(t, &self.delta, self.config().interp)?)),
        }
    }

    /// Ego motion features relative to the current pose, scaled by 1/10.
    pub fn measurement_features(&self) -> Vec<f64> {
        let cfg = self.config();
        let cur = self.window.last_state();
        let (s, c) = cur.heading.sin_cos();
        let rot = |v: [f64; 2]| [(c * v[0] + s * v[1]) / 10.0, (-s * v[0] + c * v[1]) / 10.0];
        let mut out = Vec::with_capacity(cfg.measurement_features());
        let mut states: Vec<&EgoState> = self.window.states.iter().collect();
        if !cfg.ablation.no_rbm {
            states.push(&self.next);
        }
        for st in states {
            out.extend(rot([st.m.p[0] - cur.m.p[0], st.m.p[1] - cur.m.p[1]]));
            out.extend(rot(st.m.v));
        }
        if cfg.ablation.no_rbm {
            out.extend([self.action.alpha / 10.0, self.action.tau]);
        }
        out
    }

    pub fn net_inputs(&self, with_target: bool) -> Result<NetInputs> {
        let cfg = self.config();
        let channels = cfg.predicted_channels();
        let mut history =
            Vec::with_capacity((cfg.input_frames + 1) * cfg.grid.len() / cfg.grid.c().max(1));
        for f in self
            .window
            .frames
            .iter()
            .chain(std::iter::once(&self.anticipated))
        {
            history.extend(f.data().iter().map(|&v| f64::from(v)));
        }
        let diffs = self
            .window
            .diffs
            .iter()
            .flatten()
            .map(|&v| f64::from(v))
            .collect();
        let target = if with_target {
            let t = self
                .aligned_truth()?
                .ok_or_else(|| Error::invalid("training step without a target frame"))?;
            Some(gather(&t, &channels))
        } else {
            None
        };
        Ok(NetInputs {
            history,
            measurements: self.measurement_features(),
            diffs,
            anticipated: gather(&self.anticipated, &channels),
            target,
        })
    }

    /// Assembles the ego-centered frame from an environment prediction on
    /// the predicted channels: fills them into the anticipated frame,
    /// re-centers on the ego, and restores the ego channel of `i_t`.
    pub fn finish(&self, env: &[f32]) -> Result<Ogm> {
        let cfg = self.config();
        let channels = cfg.predicted_channels();
        let hw = cfg.grid.h * cfg.grid.w;
        if env.len() != channels.len() * hw {
            return Err(Error::Shape {
                op: "environment prediction",
                left: format!("{} values", channels.len() * hw),
                right: format!("{} values", env.len()),
            });
        }
        let mut full = self.anticipated.clone();
        for (i, &c) in channels.iter().enumerate() {
            full.channel_mut(c)
                .iter_mut()
                .zip(&env[i * hw..(i + 1) * hw])
                .for_each(|(d, &v)| *d = v.clamp(0.0, 1.0));
        }
        if cfg.ablation.no_rbm {
            return Ok(full);
        }
        let mut out = oot(&full, &self.delta, cfg.interp)?;
        for c in cfg.grid.channels_with(ChannelRole::Ego) {
            out.copy_channel_from(self.window.last_frame(), c)?;
        }
        Ok(out)
    }
}

/// `raw = j_ego + diff` and its clipped version.
pub fn dl_compose(j_ego: &Ogm, diff: &DiffFrame) -> Result<(Vec<f64>, Ogm)> {
    if diff.shape != j_ego.grid.shape() {
        return Err(Error::Shape {
            op: "dl_compose",
            left: format!("{:?}", j_ego.grid.shape()),
            right: format!("{:?}", diff.shape),
        });
    }
    let raw: Vec<f64> = j_ego
        .data()
        .iter()
        .zip(&diff.data)
        .map(|(&a, b)| f64::from(a) + b)
        .collect();
    let clipped = Ogm::new(
        j_ego.grid.clone(),
        raw.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )?;
    Ok((raw, clipped))
}

/// Predicts the environment channels of the anticipated frame.
pub trait EnvModel {
    fn config(&self) -> &PredictorConfig;

    /// Values in `[0, 1]` for [`PredictorConfig::predicted_channels`].
    fn predict_env(&mut self, ctx: &StepContext) -> Result<Vec<f32>>;

    /// A complete ego-centered frame, bypassing [`StepContext::finish`].
    fn predict_frame(&mut self, _ctx: &StepContext) -> Result<Option<Ogm>> {
        Ok(None)
    }
}

/// Nothing but the ego moves.
#[derive(Clone, Debug)]
pub struct PersistenceStub(pub PredictorConfig);

impl EnvModel for PersistenceStub {
    fn config(&self) -> &PredictorConfig {
        &self.0
    }

    fn predict_env(&mut self, ctx: &StepContext) -> Result<Vec<f32>> {
        Ok(gather(&ctx.anticipated, &self.0.predicted_channels())
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }
}

/// Returns the ground truth, either aligned for the environment channels
/// or as the complete next frame.
#[derive(Clone, Debug)]
pub struct OracleStub(pub PredictorConfig);

impl EnvModel for OracleStub {
    fn config(&self) -> &PredictorConfig {
        &self.0
    }

    fn predict_frame(&mut self, ctx: &StepContext) -> Result<Option<Ogm>> {
        let t = ctx
            .truth
            .ok_or_else(|| Error::invalid("the oracle needs the true next frame"))?;
        Ok(Some(t.clone()))
    }

    fn predict_env(&mut self, ctx: &StepContext) -> Result<Vec<f32>> {
        let t = ctx
            .aligned_truth()?
            .ok_or_else(|| Error::invalid("the oracle needs the true next frame"))?;
        Ok(gather(&t, &self.0.predicted_channels())
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }
}

/// A trained network used for inference.
#[derive(Clone, Debug)]
pub struct Learned<'n> {
    pub net: &'n Network,
    pub mode: SampleMode,
    rng: ChaCha8Rng,
}

impl<'n> Learned<'n> {
    pub fn new(net: &'n Network, mode: SampleMode, seed: u64) -> Self {
        Self {
            net,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl EnvModel for Learned<'_> {
    fn config(&self) -> &PredictorConfig {
        &self.net.cfg
    }

    fn predict_env(&mut self, ctx: &StepContext) -> Result<Vec<f32>> {
        let inputs = ctx.net_inputs(false)?;
        let l = self.net.cfg.latent_dim;
        let (noise, choice) = match self.mode {
            SampleMode::Mean => (Noise::zeros(l), LatentChoice::PriorMean),
            SampleMode::Infer | SampleMode::Train => {
                (Noise::draw(l, &mut self.rng), LatentChoice::Prior)
            }
        };
        let mut g: Graph<f32> = Graph::new();
        let params = self.net.params.leaves(&mut g);
        let out = self.net.forward(&mut g, &params, &inputs, &noise, choice)?;
        let pred = match self.net.cfg.variant {
            Variant::Base => g.value(out.out).data().to_vec(),
            Variant::Dl => g
                .value(out.raw)
                .data()
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect(),
        };
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(pred)
    }
}

/// Result of [`predict_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Ego-centered prediction of `i_{t+1}`.
    pub frame: Ogm,
    pub state: EgoState,
    pub delta: PoseDelta,
}

/// Predicts `i_{t+1}` from the window and the action `a_t`. `truth` is only
/// read by models that need it (the oracle stub).
pub fn predict_step(
    model: &mut dyn EnvModel,
    window: &Window,
    action: &ActionCmd,
    truth: Option<&Ogm>,
) -> Result<StepOutput> {
    if model.config() != &window.cfg {
        return Err(Error::invalid(
            "window and model were built for different configurations",
        ));
    }
    let ctx = StepContext::new(window, *action, truth)?;
    let frame = match model.predict_frame(&ctx)? {
        Some(f) => f,
        None => ctx.finish(&model.predict_env(&ctx)?)?,
    };
    Ok(StepOutput {
        frame,
        state: ctx.next,
        delta: ctx.delta,
    })
}
