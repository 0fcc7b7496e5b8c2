//! Line-based `key = value` configuration. Every key must be known, and the
//! resolved configuration can be written back in the same format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gridops::Interp;
use crate::pipeline::TrainConfig;
use crate::predictor::{Ablation, PredictorConfig, Variant};
use crate::worldsim::{Mode, ScenarioSpec, ViewSpec};

/// Parsed `key = value` lines; `#` starts a comment.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got `{raw}`", n + 1))
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("`{key}` has invalid value `{v}`"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails if any key was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::config(format!("unknown key `{k}`"))),
        }
    }
}

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid {what} `{p}`")))
        })
        .collect()
}

/// Everything a command needs: data generation, model, training and
/// evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub grid_size: usize,
    pub meters_per_pixel: f64,
    pub n_agents: usize,
    pub length: usize,
    pub dt: f64,
    pub variant: Variant,
    pub latent_dim: usize,
    pub eta_percent: f64,
    pub epsilon: f64,
    pub lambda_ssim: f64,
    pub input_frames: usize,
    pub ablation: Ablation,
    pub width: usize,
    pub hidden: usize,
    pub interp: Interp,
    pub train: TrainConfig,
    pub eval_horizons: Vec<usize>,
    pub kde_references: usize,
    pub kde_sigma: f64,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        let view = ViewSpec::default_for(mode, 64);
        Self {
            mode,
            grid_size: 64,
            meters_per_pixel: view.meters_per_pixel,
            n_agents: ScenarioSpec::new(mode, 0).n_agents,
            length: 40,
            dt: 0.1,
            variant: Variant::Base,
            latent_dim: 32,
            eta_percent: 10.0,
            epsilon: 0.5,
            lambda_ssim: match mode {
                Mode::Highway => 0.05,
                Mode::Urban => 0.1,
            },
            input_frames: 10,
            ablation: Ablation::default(),
            width: 16,
            hidden: 64,
            interp: Interp::Bilinear,
            train: TrainConfig::default(),
            eval_horizons: vec![1, 5, 10, 20],
            kde_references: 2000,
            kde_sigma: 0.1,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mode: Mode = kv.take_or("mode", Mode::Highway)?;
        let d = Self::defaults(mode);
        let grid_size = kv.take_or("grid", d.grid_size)?;
        let default_mpp = ViewSpec::default_for(mode, grid_size).meters_per_pixel;
        let horizons: Option<String> = kv.take("eval_horizons")?;
        let t = &d.train;
        let cfg = Self {
            mode,
            grid_size,
            meters_per_pixel: kv.take_or("meters_per_pixel", default_mpp)?,
            n_agents: kv.take_or("n_agents", d.n_agents)?,
            length: kv.take_or("length", d.length)?,
            dt: kv.take_or("dt", d.dt)?,
            variant: kv.take_or("variant", d.variant)?,
            latent_dim: kv.take_or("latent_dim", d.latent_dim)?,
            eta_percent: kv.take_or("eta_percent", d.eta_percent)?,
            epsilon: kv.take_or("epsilon", d.epsilon)?,
            lambda_ssim: kv.take_or("lambda_ssim", d.lambda_ssim)?,
            input_frames: kv.take_or("input_frames", d.input_frames)?,
            ablation: Ablation {
                no_rbm: kv.take_or("no_rbm", false)?,
                no_bcde: kv.take_or("no_bcde", false)?,
                no_me: kv.take_or("no_me", false)?,
            },
            width: kv.take_or("width", d.width)?,
            hidden: kv.take_or("hidden", d.hidden)?,
            interp: kv.take_or("interp", d.interp)?,
            train: TrainConfig {
                epochs: kv.take_or("epochs", t.epochs)?,
                batch_size: kv.take_or("batch_size", t.batch_size)?,
                learning_rate: kv.take_or("learning_rate", t.learning_rate)?,
                horizon: kv.take_or("horizon", t.horizon)?,
                seed: kv.take_or("seed", t.seed)?,
                max_steps: kv.take("max_steps")?,
            },
            eval_horizons: match horizons {
                Some(h) => parse_list(&h, "horizon")?,
                None => d.eval_horizons,
            },
            kde_references: kv.take_or("kde_references", d.kde_references)?,
            kde_sigma: kv.take_or("kde_sigma", d.kde_sigma)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 16 || !self.grid_size.is_multiple_of(16) {
            return Err(Error::config(format!(
                "grid must be a positive multiple of 16, got {}",
                self.grid_size
            )));
        }
        if !(self.kde_sigma > 0.0) || self.kde_references == 0 {
            return Err(Error::config(
                "kde_sigma and kde_references must be positive",
            ));
        }
        if self.eval_horizons.is_empty() || self.eval_horizons.contains(&0) {
            return Err(Error::config(
                "eval_horizons must be a non-empty list of positive integers",
            ));
        }
        self.train.validate()?;
        self.scenario(0).validate()?;
        self.predictor(self.scenario(0).view.grid(self.mode))
            .validate()
    }

    /// Fully resolved configuration in the input format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let horizons: Vec<String> = self.eval_horizons.iter().map(|h| h.to_string()).collect();
        let lines: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("grid", self.grid_size.to_string()),
            ("meters_per_pixel", self.meters_per_pixel.to_string()),
            ("n_agents", self.n_agents.to_string()),
            ("length", self.length.to_string()),
            ("dt", self.dt.to_string()),
            ("variant", self.variant.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("eta_percent", self.eta_percent.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("lambda_ssim", self.lambda_ssim.to_string()),
            ("input_frames", self.input_frames.to_string()),
            ("no_rbm", self.ablation.no_rbm.to_string()),
            ("no_bcde", self.ablation.no_bcde.to_string()),
            ("no_me", self.ablation.no_me.to_string()),
            ("width", self.width.to_string()),
            ("hidden", self.hidden.to_string()),
            ("interp", self.interp.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("horizon", t.horizon.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_horizons", horizons.join(",")),
            ("kde_references", self.kde_references.to_string()),
            ("kde_sigma", self.kde_sigma.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        if let Some(m) = t.max_steps {
            let _ = writeln!(s, "max_steps = {m}");
        }
        s
    }

    pub fn view(&self) -> ViewSpec {
        let mut view = ViewSpec::default_for(self.mode, self.grid_size);
        view.meters_per_pixel = self.meters_per_pixel;
        view
    }

    pub fn scenario(&self, seed: u64) -> ScenarioSpec {
        let mut spec = ScenarioSpec::new(self.mode, seed);
        spec.n_agents = self.n_agents;
        spec.length = self.length;
        spec.dt = self.dt;
        spec.view = self.view();
        spec
    }

    pub fn predictor(&self, grid: crate::gridops::GridSpec) -> PredictorConfig {
        PredictorConfig {
            variant: self.variant,
            latent_dim: self.latent_dim,
            eta_percent: self.eta_percent,
            epsilon: self.epsilon,
            lambda_ssim: self.lambda_ssim,
            input_frames: self.input_frames,
            ablation: self.ablation,
            width: self.width,
            hidden: self.hidden,
            interp: self.interp,
            grid,
        }
    }
}
