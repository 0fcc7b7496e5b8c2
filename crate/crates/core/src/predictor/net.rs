//! Parameter storage and the graph construction of the prediction network.

use diffcalc::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{PredictorConfig, Variant};
use crate::error::{Error, Result};
use crate::losses::{graph_divergence, graph_kl, graph_ssim, Divergence};

const LEAK: f64 = 0.2;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Leaves for every tensor, in store order.
    pub fn leaves<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.cast())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize, zero: bool) -> usize {
        let n: usize = shape.iter().product();
        let bound = (3.0 / fan_in as f64).sqrt();
        let data = (0..n)
            .map(|_| {
                if zero {
                    0.0
                } else {
                    self.rng.random_range(-bound..bound) as f32
                }
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches length");
        self.store.push(name.to_string(), t)
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize, zero: bool) -> Layer {
        Layer {
            w: self.tensor(&format!("{name}.w"), &[n_out, n_in], n_in, zero),
            b: self.tensor(&format!("{name}.b"), &[n_out], n_in, true),
        }
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Layer {
        Layer {
            w: self.tensor(
                &format!("{name}.w"),
                &[c_out, c_in, k, k],
                c_in * k * k,
                false,
            ),
            b: self.tensor(&format!("{name}.b"), &[c_out], 1, true),
        }
    }

    fn conv_t(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Layer {
        // Each output pixel of a stride-2 4×4 transposed convolution sees
        // a quarter of the kernel.
        Layer {
            w: self.tensor(
                &format!("{name}.w"),
                &[c_in, c_out, k, k],
                c_in * k * k / 4,
                false,
            ),
            b: self.tensor(&format!("{name}.b"), &[c_out], 1, true),
        }
    }

    fn encoder(&mut self, name: &str, c_in: usize, widths: [usize; 4]) -> Vec<Layer> {
        let mut c = c_in;
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = self.conv(&format!("{name}.conv{i}"), c, w, 4);
                c = w;
                l
            })
            .collect()
    }
}

/// Per-step network inputs, all flattened channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInputs {
    /// History frames followed by the anticipated frame: `(t + 1)·c` planes.
    pub history: Vec<f64>,
    pub measurements: Vec<f64>,
    /// Consecutive environment differences: `(t − 1)·c_pred` planes.
    pub diffs: Vec<f64>,
    /// Predicted channels of the anticipated frame.
    pub anticipated: Vec<f64>,
    /// Teacher target on the predicted channels; training only.
    pub target: Option<Vec<f64>>,
}

/// Standard-normal draws for the stochastic codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub latent: Vec<f64>,
    pub motion: Vec<f64>,
}

impl Noise {
    pub fn zeros(dim: usize) -> Self {
        Self {
            latent: vec![0.0; dim],
            motion: vec![0.0; dim],
        }
    }

    pub fn draw<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        use rand_distr::StandardNormal;
        Self {
            latent: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            motion: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// Where the unshared code comes from in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentChoice {
    Prior,
    Posterior,
    /// Prior mean and motion mean, no sampling.
    PriorMean,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    pub shared: Var,
    pub prior_mean: Var,
    pub prior_log_var: Var,
    pub posterior: Option<(Var, Var)>,
    pub motion_mean: Var,
    pub latent: Var,
    /// Sigmoid head (base) or tanh head (difference).
    pub out: Var,
    /// The frame compared to the target: `out` for base, the unclipped
    /// `anticipated + out` for the difference variant.
    pub raw: Var,
}

/// The prediction network: history encoder shared by the prior and
/// posterior paths, their heads, the target and motion encoders, and the
/// decoder with a full-resolution skip block.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: PredictorConfig,
    pub params: ParamStore,
    hist: Vec<Layer>,
    hist_fc: Layer,
    meas: [Layer; 2],
    shared: Layer,
    prior: Option<Layer>,
    target: Vec<Layer>,
    target_fc: Layer,
    posterior: Layer,
    motion: Option<(Vec<Layer>, Layer)>,
    dec_fc: Layer,
    dec: Vec<Layer>,
    skip: [Layer; 2],
}

/// Starts the direct head near persistence: the first `cp` skip channels
/// carry the anticipated frame at their center tap and the head reads them
/// back as `sigmoid(GAIN·(x − ½))`. Without this the sparse occupancy
/// channel tends to saturate at zero before any copying is learned.
fn pass_through(store: &mut ParamStore, skip: [Layer; 2], f: usize, cp: usize) {
    const GAIN: f32 = 8.0;
    let c_in0 = f + 2 * cp;
    let w0 = store.tensors[skip[0].w].data_mut();
    for c in 0..cp {
        w0[c * c_in0 * 9..(c + 1) * c_in0 * 9].fill(0.0);
        w0[(c * c_in0 + f + c) * 9 + 4] = GAIN;
    }
    let w1 = store.tensors[skip[1].w].data_mut();
    for c in 0..cp {
        w1[c * f * 9..(c + 1) * f * 9].fill(0.0);
        w1[(c * f + c) * 9 + 4] = 1.0;
    }
    store.tensors[skip[1].b].data_mut().fill(-GAIN / 2.0);
}

fn planes(cfg: &PredictorConfig) -> (usize, usize, usize) {
    (
        cfg.grid.h / 16,
        cfg.grid.w / 16,
        cfg.predicted_channels().len(),
    )
}

impl Network {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (bh, bw, cp) = planes(&cfg);
        let (f, d, l, t, c) = (
            cfg.width,
            cfg.hidden,
            cfg.latent_dim,
            cfg.input_frames,
            cfg.grid.c(),
        );
        let deep = 2 * f;
        let flat = deep * bh * bw;
        let hist = b.encoder("hist", (t + 1) * c, [f, deep, deep, deep]);
        let hist_fc = b.linear("hist.fc", flat, d, false);
        let meas = [
            b.linear("meas.fc0", cfg.measurement_features(), d, false),
            b.linear("meas.fc1", d, d, false),
        ];
        let shared = b.linear("shared.fc", 2 * d, d, false);
        let prior = (!cfg.ablation.no_bcde).then(|| b.linear("prior.head", d, 2 * l, true));
        let small = (f / 2).max(4);
        let target = b.encoder("target", cp, [small, f, f, f]);
        let target_fc = b.linear("target.fc", f * bh * bw, d, false);
        let posterior = b.linear("posterior.head", 2 * d, 2 * l, true);
        let motion = (!cfg.ablation.no_me).then(|| {
            let convs = b.encoder("motion", (t - 1) * cp, [f, f, f, f]);
            let fc = b.linear("motion.fc", f * bh * bw, l, false);
            (convs, fc)
        });
        let dec_fc = b.linear("dec.fc", d + 2 * l, flat, false);
        let dec = vec![
            b.conv_t("dec.convt0", deep, deep, 4),
            b.conv_t("dec.convt1", deep, deep, 4),
            b.conv_t("dec.convt2", deep, f, 4),
            b.conv_t("dec.convt3", f, f, 4),
        ];
        let skip = [
            b.conv("skip.conv0", f + 2 * cp, f, 3),
            b.conv("skip.conv1", f, cp, 3),
        ];
        // Both variants start out predicting persistence.
        match cfg.variant {
            Variant::Base if f >= cp => pass_through(&mut b.store, skip, f, cp),
            Variant::Base => {}
            Variant::Dl => b.store.tensors[skip[1].w].data_mut().fill(0.0),
        }
        Ok(Self {
            cfg,
            params: b.store,
            hist,
            hist_fc,
            meas,
            shared,
            prior,
            target,
            target_fc,
            posterior,
            motion,
            dec_fc,
            dec,
            skip,
        })
    }

    fn param_indices(layers: &[Layer]) -> Vec<usize> {
        layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Parameters producing the shared code.
    pub fn shared_encoder_params(&self) -> Vec<usize> {
        let mut v = Self::param_indices(&self.hist);
        v.extend(Self::param_indices(&[
            self.hist_fc,
            self.meas[0],
            self.meas[1],
            self.shared,
        ]));
        v
    }

    /// Parameters of the prior path, shared encoder included.
    pub fn prior_path_params(&self) -> Vec<usize> {
        let mut v = self.shared_encoder_params();
        v.extend(self.prior.map(|p| [p.w, p.b]).into_iter().flatten());
        v
    }

    /// Parameters of the prior head alone.
    pub fn prior_head_params(&self) -> Vec<usize> {
        self.prior.map(|p| vec![p.w, p.b]).unwrap_or_default()
    }

    /// Parameters of the posterior path, shared encoder included.
    pub fn posterior_path_params(&self) -> Vec<usize> {
        let mut v = self.shared_encoder_params();
        v.extend(Self::param_indices(&self.target));
        v.extend(Self::param_indices(&[self.target_fc, self.posterior]));
        v
    }

    pub fn motion_params(&self) -> Vec<usize> {
        match &self.motion {
            Some((convs, fc)) => {
                let mut v = Self::param_indices(convs);
                v.extend([fc.w, fc.b]);
                v
            }
            None => Vec::new(),
        }
    }

    fn check_inputs(&self, inp: &NetInputs) -> Result<()> {
        let g = &self.cfg.grid;
        let hw = g.h * g.w;
        let cp = self.cfg.predicted_channels().len();
        let t = self.cfg.input_frames;
        let checks = [
            ("history", inp.history.len(), (t + 1) * g.c() * hw),
            (
                "measurements",
                inp.measurements.len(),
                self.cfg.measurement_features(),
            ),
            ("diffs", inp.diffs.len(), (t - 1) * cp * hw),
            ("anticipated", inp.anticipated.len(), cp * hw),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::Shape {
                    op: "network input",
                    left: format!("{what} of {want} values"),
                    right: format!("{got} values"),
                });
            }
        }
        if let Some(t) = &inp.target {
            if t.len() != cp * hw {
                return Err(Error::Shape {
                    op: "network target",
                    left: format!("{} values", cp * hw),
                    right: format!("{} values", t.len()),
                });
            }
        }
        Ok(())
    }

    fn encode<T: Real>(
        g: &mut Graph<T>,
        p: &[Var],
        layers: &[Layer],
        x: Var,
    ) -> diffcalc::Result<Var> {
        let mut h = x;
        for l in layers {
            let padded = g.pad2d(h, [1, 1, 1, 1])?;
            let y = g.conv2d(padded, p[l.w], p[l.b], 2)?;
            h = g.leaky_relu(y, T::of(LEAK))?;
        }
        Ok(h)
    }

    fn dense<T: Real>(
        g: &mut Graph<T>,
        p: &[Var],
        l: Layer,
        x: Var,
        act: bool,
    ) -> diffcalc::Result<Var> {
        let y = g.linear(x, p[l.w], p[l.b])?;
        if act {
            g.leaky_relu(y, T::of(LEAK))
        } else {
            Ok(y)
        }
    }

    /// Splits a `2·latent` head output into mean and log-variance.
    fn split<T: Real>(g: &mut Graph<T>, x: Var, l: usize) -> diffcalc::Result<(Var, Var)> {
        Ok((g.slice(x, 0, l)?, g.slice(x, l, l)?))
    }

    /// Builds the forward pass on `params` (leaves of [`Self::params`], in
    /// store order).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        inp: &NetInputs,
        noise: &Noise,
        choice: LatentChoice,
    ) -> Result<NetOutputs> {
        self.check_inputs(inp)?;
        if choice == LatentChoice::Posterior && inp.target.is_none() {
            return Err(Error::invalid("the posterior needs a target frame"));
        }
        Ok(self.forward_graph(g, params, inp, noise, choice)?)
    }

    fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        inp: &NetInputs,
        noise: &Noise,
        choice: LatentChoice,
    ) -> diffcalc::Result<NetOutputs> {
        let cfg = &self.cfg;
        let (h, w, c, t, l) = (
            cfg.grid.h,
            cfg.grid.w,
            cfg.grid.c(),
            cfg.input_frames,
            cfg.latent_dim,
        );
        let cp = cfg.predicted_channels().len();
        let (bh, bw, _) = planes(cfg);

        // Shared code, common to the prior and posterior paths.
        let hist = g.input(Tensor::from_f64(&[(t + 1) * c, h, w], &inp.history)?);
        let feat = Self::encode(g, p, &self.hist, hist)?;
        let hist_code = Self::dense(g, p, self.hist_fc, feat, true)?;
        let meas = g.input(Tensor::from_f64(
            &[inp.measurements.len()],
            &inp.measurements,
        )?);
        let m = Self::dense(g, p, self.meas[0], meas, true)?;
        let m = Self::dense(g, p, self.meas[1], m, true)?;
        let joined = g.concat(&[hist_code, m])?;
        let shared = Self::dense(g, p, self.shared, joined, true)?;

        let (prior_mean, prior_log_var) = match self.prior {
            Some(head) => {
                let y = Self::dense(g, p, head, shared, false)?;
                Self::split(g, y, l)?
            }
            None => (g.input(Tensor::zeros(&[l])), g.input(Tensor::zeros(&[l]))),
        };
        let posterior = match &inp.target {
            Some(target) => {
                let x = g.input(Tensor::from_f64(&[cp, h, w], target)?);
                let feat = Self::encode(g, p, &self.target, x)?;
                let code = Self::dense(g, p, self.target_fc, feat, true)?;
                let joined = g.concat(&[shared, code])?;
                let y = Self::dense(g, p, self.posterior, joined, false)?;
                Some(Self::split(g, y, l)?)
            }
            None => None,
        };

        let motion_mean = match &self.motion {
            Some((convs, fc)) => {
                let x = g.input(Tensor::from_f64(&[(t - 1) * cp, h, w], &inp.diffs)?);
                let feat = Self::encode(g, p, convs, x)?;
                Self::dense(g, p, *fc, feat, false)?
            }
            None => g.input(Tensor::zeros(&[l])),
        };
        let motion = if self.motion.is_none() || choice == LatentChoice::PriorMean {
            motion_mean
        } else {
            let n = g.input(Tensor::from_f64(&[l], &noise.motion)?);
            let n = g.scale(n, T::of(cfg.epsilon.sqrt()))?;
            g.add(motion_mean, n)?
        };

        let latent = match (choice, posterior) {
            (LatentChoice::PriorMean, _) => prior_mean,
            (LatentChoice::Posterior, Some((mean, log_var))) => {
                reparameterize(g, mean, log_var, &noise.latent)?
            }
            _ => reparameterize(g, prior_mean, prior_log_var, &noise.latent)?,
        };

        // Decoder.
        let code = g.concat(&[shared, latent, motion])?;
        let x = Self::dense(g, p, self.dec_fc, code, true)?;
        let mut x = g.reshape(x, &[2 * cfg.width, bh, bw])?;
        for layer in &self.dec {
            let y = g.conv_transpose2d(x, p[layer.w], p[layer.b], 2)?;
            let y = g.crop2d(y, [1, 1, 1, 1])?;
            x = g.leaky_relu(y, T::of(LEAK))?;
        }
        let anticipated = g.input(Tensor::from_f64(&[cp, h, w], &inp.anticipated)?);
        let hw = h * w;
        let last_diff = g.input(Tensor::from_f64(
            &[cp, h, w],
            &inp.diffs[(t - 2) * cp * hw..],
        )?);
        let stacked = g.concat(&[x, anticipated, last_diff])?;
        let padded = g.pad2d(stacked, [1, 1, 1, 1])?;
        let y = g.conv2d(padded, p[self.skip[0].w], p[self.skip[0].b], 1)?;
        let y = g.leaky_relu(y, T::of(LEAK))?;
        let padded = g.pad2d(y, [1, 1, 1, 1])?;
        let y = g.conv2d(padded, p[self.skip[1].w], p[self.skip[1].b], 1)?;
        let (out, raw) = match cfg.variant {
            Variant::Base => {
                let out = g.sigmoid(y)?;
                (out, out)
            }
            Variant::Dl => {
                let out = g.tanh(y)?;
                (out, g.add(anticipated, out)?)
            }
        };
        Ok(NetOutputs {
            shared,
            prior_mean,
            prior_log_var,
            posterior,
            motion_mean,
            latent,
            out,
            raw,
        })
    }

    /// One step's loss on the teacher target in `inp`:
    /// `D + λ(1 − SSIM) + KL(q‖p)`. Returns the total and its three terms.
    pub fn step_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        inp: &NetInputs,
        noise: &Noise,
        choice: LatentChoice,
    ) -> Result<(Var, [Var; 3], NetOutputs)> {
        let target = inp
            .target
            .as_ref()
            .ok_or_else(|| Error::invalid("step loss needs a target frame"))?;
        let out = self.forward(g, params, inp, noise, choice)?;
        let cfg = &self.cfg;
        let (h, w) = (cfg.grid.h, cfg.grid.w);
        let cp = cfg.predicted_channels().len();
        let terms = (|| -> diffcalc::Result<(Var, [Var; 3])> {
            let tgt = g.input(Tensor::from_f64(&[cp, h, w], target)?);
            let clipped = match cfg.variant {
                Variant::Base => out.raw,
                Variant::Dl => g.clamp(out.raw, T::zero(), T::one())?,
            };
            let rec = match (cfg.variant, cfg.divergence()) {
                // Cross-entropy is flat outside [0, 1]; the squared excess keeps
                // out-of-range compositions pulled back.
                (Variant::Dl, Divergence::CrossEntropy) => {
                    let ce = graph_divergence(g, tgt, clipped, Divergence::CrossEntropy)?;
                    let excess = g.sub(out.raw, clipped)?;
                    let sq = g.square(excess)?;
                    let pen = g.mean(sq)?;
                    g.add(ce, pen)?
                }
                (Variant::Dl, d) => graph_divergence(g, tgt, out.raw, d)?,
                (Variant::Base, d) => graph_divergence(g, tgt, out.raw, d)?,
            };
            let s = graph_ssim(g, tgt, clipped)?;
            let kl = match out.posterior {
                Some((qm, qv)) => graph_kl(g, qm, qv, out.prior_mean, out.prior_log_var)?,
                None => g.input(Tensor::scalar(T::zero())),
            };
            let dissim = g.scale(s, -T::of(cfg.lambda_ssim))?;
            let dissim = g.offset(dissim, T::of(cfg.lambda_ssim))?;
            let total = g.add(rec, dissim)?;
            let total = g.add(total, kl)?;
            Ok((total, [rec, s, kl]))
        })()?;
        Ok((terms.0, terms.1, out))
    }
}

fn reparameterize<T: Real>(
    g: &mut Graph<T>,
    mean: Var,
    log_var: Var,
    noise: &[f64],
) -> diffcalc::Result<Var> {
    let n = g.input(Tensor::from_f64(&[noise.len()], noise)?);
    let half = g.scale(log_var, T::of(0.5))?;
    let std = g.exp(half)?;
    let spread = g.mul(std, n)?;
    g.add(mean, spread)
}
