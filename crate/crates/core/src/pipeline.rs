//! Training with the multi-step objective, closed-loop rollouts,
//! checkpoints, and the ablation matrix.

use diffcalc::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::gridops::Ogm;
use crate::kinematics::{ActionCmd, EgoState};
use crate::metrics::{evaluate, EvalReport, KdeModel};
use crate::predictor::{
    switch_source, Ablation, CodeSource, Container, EnvModel, LatentChoice, Learned, Network,
    Noise, PredictorConfig, SampleMode, StepContext, StepOutput, Variant, Window,
};
use crate::record::SequenceRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Prediction steps summed in each training example.
    pub horizon: usize,
    pub seed: u64,
    /// Stops after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            horizon: 5,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.batch_size == 0 {
            return Err(Error::config("horizon and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Independent random stream for `(seed, purpose, index)`.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const STREAM_EPOCH: u64 = 1;
const STREAM_STEP: u64 = 2;

/// Adaptive moment estimation with the usual defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor<f32>]) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Ego states along a record, stepped exactly as the simulator did.
pub fn record_states(rec: &SequenceRecord) -> Result<Vec<EgoState>> {
    let mut s = EgoState::new(rec.measurements[0], 0.0);
    let mut out = vec![s];
    for a in &rec.actions {
        s = s.step(a, rec.dt)?.0;
        out.push(s);
    }
    Ok(out)
}

/// The window of `t` frames ending at `end` (inclusive).
pub fn window_at(
    cfg: &PredictorConfig,
    rec: &SequenceRecord,
    states: &[EgoState],
    end: usize,
) -> Result<Window> {
    let t = cfg.input_frames;
    if end + 1 < t || end >= rec.len() {
        return Err(Error::invalid(format!(
            "no {t}-frame window ends at {end} in a {}-frame record",
            rec.len()
        )));
    }
    let start = end + 1 - t;
    Window::new(cfg, &rec.frames[start..=end], &states[start..=end], rec.dt)
}

/// Closed-loop prediction: each step's output joins the window for the next
/// step. `truths` is passed to models that read ground truth.
pub fn rollout(
    model: &mut dyn EnvModel,
    mut window: Window,
    actions: &[ActionCmd],
    truths: Option<&[Ogm]>,
) -> Result<Vec<StepOutput>> {
    if actions.is_empty() {
        return Err(Error::invalid("rollout needs at least one action"));
    }
    let mut out = Vec::with_capacity(actions.len());
    for (j, a) in actions.iter().enumerate() {
        let step =
            crate::predictor::predict_step(model, &window, a, truths.and_then(|t| t.get(j)))?;
        window.push(step.frame.clone(), step.state)?;
        out.push(step);
    }
    Ok(out)
}

/// Loss terms of one optimizer step, averaged over the batch and summed
/// over the horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub rec: f64,
    pub ssim: f64,
    pub kl: f64,
    pub total: f64,
    pub prior_sampled: bool,
}

impl LossRow {
    pub const CSV_HEADER: &'static str = "step,epoch,rec,ssim,kl,total,source";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.rec,
            self.ssim,
            self.kl,
            self.total,
            if self.prior_sampled {
                "prior"
            } else {
                "posterior"
            }
        )
    }
}

/// Per-epoch means of the step losses as CSV.
pub fn epoch_csv(curve: &[LossRow]) -> String {
    let mut s = String::from("epoch,rec,ssim,kl,total\n");
    let mut i = 0;
    while i < curve.len() {
        let e = curve[i].epoch;
        let rows: Vec<&LossRow> = curve[i..].iter().take_while(|r| r.epoch == e).collect();
        let n = rows.len() as f64;
        let mean = |f: fn(&LossRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        s += &format!(
            "{e},{},{},{},{}\n",
            mean(|r| r.rec),
            mean(|r| r.ssim),
            mean(|r| r.kl),
            mean(|r| r.total)
        );
        i += rows.len();
    }
    s
}

pub fn steps_csv(curve: &[LossRow]) -> String {
    let mut s = format!("{}\n", LossRow::CSV_HEADER);
    for r in curve {
        s += &r.csv_line();
        s.push('\n');
    }
    s
}

/// Optimizer state plus progress; everything a bit-exact resume needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub net: Network,
    pub adam: Adam,
    pub train: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub curve: Vec<LossRow>,
}

/// One example: a record and the index of its first window frame.
type Example = (usize, usize);

impl Trainer {
    pub fn new(cfg: PredictorConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let net = Network::new(cfg, train.seed)?;
        let adam = Adam::new(train.learning_rate, &net.params.tensors);
        Ok(Self {
            net,
            adam,
            train,
            step: 0,
            curve: Vec::new(),
        })
    }

    fn check_data(&self, data: &[SequenceRecord]) -> Result<()> {
        let need = self.net.cfg.input_frames + self.train.horizon;
        if data.is_empty() {
            return Err(Error::invalid("no training sequences"));
        }
        for rec in data {
            if rec.grid != self.net.cfg.grid {
                return Err(Error::Shape {
                    op: "training data",
                    left: format!("model grid {:?}", self.net.cfg.grid.shape()),
                    right: format!("data grid {:?}", rec.grid.shape()),
                });
            }
            if rec.len() < need {
                return Err(Error::invalid(format!(
                    "sequences need at least {need} frames for {} input frames and horizon {}, got {}",
                    self.net.cfg.input_frames,
                    self.train.horizon,
                    rec.len()
                )));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_sequences: usize) -> usize {
        n_sequences.div_ceil(self.train.batch_size)
    }

    /// Shuffled examples of `epoch`, cut into batches.
    fn epoch_plan(&self, data: &[SequenceRecord], epoch: usize) -> Vec<Vec<Example>> {
        let mut rng = derived_rng(self.train.seed, STREAM_EPOCH, epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let span = self.net.cfg.input_frames + self.train.horizon;
        let examples: Vec<Example> = order
            .into_iter()
            .map(|i| (i, rng.random_range(0..=data[i].len() - span)))
            .collect();
        examples
            .chunks(self.train.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Runs until `epochs` (or `max_steps`) is reached, calling `after_epoch`
    /// at every completed epoch. On a non-finite loss the parameters are
    /// left at their last good values and an error is returned.
    pub fn run(
        &mut self,
        data: &[SequenceRecord],
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        self.check_data(data)?;
        let states = data.iter().map(record_states).collect::<Result<Vec<_>>>()?;
        let spe = self.steps_per_epoch(data.len());
        let total = spe * self.train.epochs;
        let limit = self.train.max_steps.map_or(total, |m| m.min(total));
        while self.step < limit {
            let epoch = self.step / spe;
            let plan = self.epoch_plan(data, epoch);
            let batch = plan[self.step % spe].clone();
            let row = self.train_step(data, &states, &batch, epoch)?;
            self.curve.push(row);
            if self.step.is_multiple_of(spe) {
                after_epoch(self)?;
            }
        }
        Ok(())
    }

    fn train_step(
        &mut self,
        data: &[SequenceRecord],
        states: &[Vec<EgoState>],
        batch: &[Example],
        epoch: usize,
    ) -> Result<LossRow> {
        let cfg = self.net.cfg.clone();
        let mut rng = derived_rng(self.train.seed, STREAM_STEP, self.step as u64);
        // One switch per optimizer step.
        let source = switch_source(cfg.eta_percent, &mut rng);
        let choice = match source {
            CodeSource::Prior => LatentChoice::Prior,
            CodeSource::Posterior => LatentChoice::Posterior,
        };
        let scale = 1.0 / batch.len() as f32;
        let mut grads: Vec<Tensor<f32>> = self
            .net
            .params
            .tensors
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut sums = [0.0f64; 4];
        for &(i, start) in batch {
            let rec = &data[i];
            let t = cfg.input_frames;
            let mut window = Window::new(
                &cfg,
                &rec.frames[start..start + t],
                &states[i][start..start + t],
                rec.dt,
            )?;
            for j in 0..self.train.horizon {
                let now = start + t - 1 + j;
                let ctx = StepContext::new(&window, rec.actions[now], Some(&rec.frames[now + 1]))?;
                let inputs = ctx.net_inputs(true)?;
                let noise = Noise::draw(cfg.latent_dim, &mut rng);
                let mut g: Graph<f32> = Graph::new();
                let params = self.net.params.leaves(&mut g);
                let (total, terms, out) = self
                    .net
                    .step_loss(&mut g, &params, &inputs, &noise, choice)?;
                let values = [
                    g.value(terms[0]).item(),
                    g.value(terms[1]).item(),
                    g.value(terms[2]).item(),
                    g.value(total).item(),
                ];
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {} (record {i}, start {start}, horizon step {j})",
                        self.step
                    )));
                }
                for (s, v) in sums.iter_mut().zip(values) {
                    *s += f64::from(v) * f64::from(scale);
                }
                let loss = g.scale(total, scale)?;
                let step_grads = g.backward(loss)?;
                for (acc, &p) in grads.iter_mut().zip(&params) {
                    acc.add_scaled(step_grads.wrt(p).expect("parameter leaf"), 1.0)?;
                }
                // Feedback is a plain value: no gradient crosses steps.
                let env: Vec<f32> = match cfg.variant {
                    Variant::Base => g.value(out.out).data().to_vec(),
                    Variant::Dl => g
                        .value(out.raw)
                        .data()
                        .iter()
                        .map(|v| v.clamp(0.0, 1.0))
                        .collect(),
                };
                let frame = ctx.finish(&env)?;
                let next = ctx.next;
                drop(ctx);
                window.push(frame, next)?;
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient of `{}` at step {}",
                self.net.params.names[i], self.step
            )));
        }
        self.adam.update(&mut self.net.params.tensors, &grads);
        self.step += 1;
        Ok(LossRow {
            step: self.step,
            epoch,
            rec: sums[0],
            ssim: sums[1],
            kl: sums[2],
            total: sums[3],
            prior_sampled: source == CodeSource::Prior,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.net.to_container();
        let t = &self.train;
        let mut state = format!(
            "epochs = {}\nbatch_size = {}\nlearning_rate = {}\nhorizon = {}\nseed = {}\nstep = {}\nadam_t = {}\n",
            t.epochs, t.batch_size, t.learning_rate, t.horizon, t.seed, self.step, self.adam.t
        );
        if let Some(m) = t.max_steps {
            state += &format!("max_steps = {m}\n");
        }
        c.sections.push((TRAIN_SECTION.to_string(), state));
        c.sections
            .push((CURVE_SECTION.to_string(), steps_csv(&self.curve)));
        for (name, (m, v)) in self
            .net
            .params
            .names
            .iter()
            .zip(self.adam.m.iter().zip(&self.adam.v))
        {
            c.tensors.push((format!("adam.m.{name}"), m.clone()));
            c.tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        c
    }

    pub fn from_container(c: &Container, path: &std::path::Path) -> Result<Self> {
        let net = Network::from_container(c, path)?;
        let text = c
            .section(TRAIN_SECTION)
            .ok_or_else(|| Error::data(path, "not a training checkpoint (no training state)"))?;
        let mut kv = KvMap::parse(text)?;
        let need = |kv: &mut KvMap, k: &str| -> Result<String> {
            kv.take::<String>(k)?
                .ok_or_else(|| Error::data(path, format!("missing `{k}`")))
        };
        let num = |s: String, k: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::data(path, format!("bad `{k}`")))
        };
        let train = TrainConfig {
            epochs: num(need(&mut kv, "epochs")?, "epochs")? as usize,
            batch_size: num(need(&mut kv, "batch_size")?, "batch_size")? as usize,
            learning_rate: num(need(&mut kv, "learning_rate")?, "learning_rate")?,
            horizon: num(need(&mut kv, "horizon")?, "horizon")? as usize,
            seed: need(&mut kv, "seed")?
                .parse()
                .map_err(|_| Error::data(path, "bad `seed`"))?,
            max_steps: kv.take("max_steps")?,
        };
        let step = num(need(&mut kv, "step")?, "step")? as usize;
        let adam_t = need(&mut kv, "adam_t")?
            .parse()
            .map_err(|_| Error::data(path, "bad `adam_t`"))?;
        kv.finish()?;
        let mut adam = Adam::new(train.learning_rate, &net.params.tensors);
        adam.t = adam_t;
        for (i, name) in net.params.names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
                let key = format!("{prefix}{name}");
                let (_, t) = c
                    .tensors
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::data(path, format!("missing tensor `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::data(
                        path,
                        format!("tensor `{key}` has the wrong shape"),
                    ));
                }
                *slot = t.clone();
            }
        }
        let curve = parse_curve(c.section(CURVE_SECTION).unwrap_or(""), path)?;
        Ok(Self {
            net,
            adam,
            train,
            step,
            curve,
        })
    }
}

pub const TRAIN_SECTION: &str = "train_state";
pub const CURVE_SECTION: &str = "loss_curve";

fn parse_curve(text: &str, path: &std::path::Path) -> Result<Vec<LossRow>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::data(path, format!("bad loss-curve line `{line}`"));
        if f.len() != 7 {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        rows.push(LossRow {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            rec: n(2)?,
            ssim: n(3)?,
            kl: n(4)?,
            total: n(5)?,
            prior_sampled: f[6] == "prior",
        });
    }
    Ok(rows)
}

/// The four model configurations of the ablation study.
pub fn ablation_cells() -> [Ablation; 4] {
    [
        Ablation::default(),
        Ablation {
            no_rbm: true,
            ..Ablation::default()
        },
        Ablation {
            no_bcde: true,
            ..Ablation::default()
        },
        Ablation {
            no_me: true,
            ..Ablation::default()
        },
    ]
}

/// One evaluated cell of the ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub suite: String,
    pub config: String,
    pub report: EvalReport,
}

/// Evaluates every ablation configuration on every suite. `models` must
/// hold a network for each of [`ablation_cells`].
pub fn ablate(
    models: &[&Network],
    suites: &[(&str, &[SequenceRecord])],
    horizons: &[usize],
    kde: Option<&KdeModel>,
) -> Result<Vec<AblationCell>> {
    let missing: Vec<String> = ablation_cells()
        .iter()
        .filter(|a| !models.iter().any(|m| m.cfg.ablation == **a))
        .map(|a| a.name())
        .collect();
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "missing checkpoints for: {}",
            missing.join(", ")
        )));
    }
    let mut cells = Vec::new();
    for (suite, data) in suites {
        for a in ablation_cells() {
            let net = models
                .iter()
                .find(|m| m.cfg.ablation == a)
                .expect("checked above");
            let mut model = Learned::new(net, SampleMode::Mean, 0);
            cells.push(AblationCell {
                suite: suite.to_string(),
                config: a.name(),
                report: evaluate(&mut model, data, horizons, kde)?,
            });
        }
    }
    Ok(cells)
}
