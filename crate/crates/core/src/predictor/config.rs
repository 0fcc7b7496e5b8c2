use std::fmt;
use std::str::FromStr;

use crate::config::{parse_list, KvMap};
use crate::error::{Error, Result};
use crate::gridops::{ChannelRole, GridSpec, Interp, ValueMode};
use crate::losses::Divergence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    /// Predicts the environment frame directly.
    #[default]
    Base,
    /// Predicts the change relative to the anticipated frame.
    Dl,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "dl" => Ok(Variant::Dl),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Dl => "dl",
        })
    }
}

/// Pathways switched off for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// No rule-based ego anticipation: no input or output transforms; the
    /// raw action is fed to the measurement encoder instead.
    pub no_rbm: bool,
    /// Prior fixed to `N(0, I)` instead of conditioned on the input.
    pub no_bcde: bool,
    /// Motion code fixed to zero.
    pub no_me: bool,
}

impl Ablation {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_rbm {
            parts.push("no_rbm");
        }
        if self.no_bcde {
            parts.push("no_bcde");
        }
        if self.no_me {
            parts.push("no_me");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub eta_percent: f64,
    pub epsilon: f64,
    pub lambda_ssim: f64,
    /// History frames per prediction.
    pub input_frames: usize,
    pub ablation: Ablation,
    /// Channels of the first convolution; deeper layers double up to 2×.
    pub width: usize,
    /// Width of the dense layers and of the shared code.
    pub hidden: usize,
    pub interp: Interp,
    pub grid: GridSpec,
}

impl PredictorConfig {
    pub fn new(grid: GridSpec) -> Self {
        let lambda_ssim = match grid.mode {
            ValueMode::Real => 0.05,
            ValueMode::Binary => 0.1,
        };
        Self {
            variant: Variant::Base,
            latent_dim: 32,
            eta_percent: 10.0,
            epsilon: 0.5,
            lambda_ssim,
            input_frames: 10,
            ablation: Ablation::default(),
            width: 16,
            hidden: 64,
            interp: Interp::Bilinear,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        let g = &self.grid;
        if !g.h.is_multiple_of(16) || !g.w.is_multiple_of(16) {
            return Err(Error::config(format!(
                "grid {}×{} must be a multiple of 16",
                g.h, g.w
            )));
        }
        if !(0.0..=100.0).contains(&self.eta_percent) {
            return Err(Error::config(format!(
                "eta_percent must lie in [0, 100], got {}",
                self.eta_percent
            )));
        }
        if self.input_frames < 2 {
            return Err(Error::config("input_frames must be at least 2"));
        }
        if self.latent_dim == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::config(
                "latent_dim, width and hidden must be positive",
            ));
        }
        if !(self.epsilon > 0.0) || !(self.lambda_ssim >= 0.0) {
            return Err(Error::config(
                "epsilon must be positive and lambda_ssim non-negative",
            ));
        }
        if g.channels_with(ChannelRole::Ego).is_empty() {
            return Err(Error::config("grid has no ego channel"));
        }
        Ok(())
    }

    /// Channels the network outputs: everything but the ego, unless the ego
    /// is not anticipated by rule.
    pub fn predicted_channels(&self) -> Vec<usize> {
        (0..self.grid.c())
            .filter(|&c| self.ablation.no_rbm || self.grid.roles[c] != ChannelRole::Ego)
            .collect()
    }

    pub fn divergence(&self) -> Divergence {
        match self.grid.mode {
            ValueMode::Real => Divergence::Mse,
            ValueMode::Binary => Divergence::CrossEntropy,
        }
    }

    /// Length of the measurement feature vector.
    pub fn measurement_features(&self) -> usize {
        if self.ablation.no_rbm {
            4 * self.input_frames + 2
        } else {
            4 * (self.input_frames + 1)
        }
    }

    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let roles: Vec<&str> = g.roles.iter().map(|r| r.as_str()).collect();
        format!(
            "variant = {}\nlatent_dim = {}\neta_percent = {}\nepsilon = {}\nlambda_ssim = {}\ninput_frames = {}\nno_rbm = {}\nno_bcde = {}\nno_me = {}\nwidth = {}\nhidden = {}\ninterp = {}\nh = {}\nw = {}\nchannel_roles = {}\nego_anchor_row = {}\nego_anchor_col = {}\nmeters_per_pixel = {}\nvalue_mode = {}\n",
            self.variant,
            self.latent_dim,
            self.eta_percent,
            self.epsilon,
            self.lambda_ssim,
            self.input_frames,
            self.ablation.no_rbm,
            self.ablation.no_bcde,
            self.ablation.no_me,
            self.width,
            self.hidden,
            self.interp,
            g.h,
            g.w,
            roles.join(","),
            g.anchor[0],
            g.anchor[1],
            g.meters_per_pixel,
            g.mode
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        fn need<T: FromStr>(kv: &mut KvMap, k: &str) -> Result<T> {
            kv.take(k)?
                .ok_or_else(|| Error::config(format!("missing key `{k}`")))
        }
        let roles: String = need(&mut kv, "channel_roles")?;
        let grid = GridSpec {
            h: need(&mut kv, "h")?,
            w: need(&mut kv, "w")?,
            roles: parse_list(&roles, "channel role")?,
            anchor: [
                need(&mut kv, "ego_anchor_row")?,
                need(&mut kv, "ego_anchor_col")?,
            ],
            meters_per_pixel: need(&mut kv, "meters_per_pixel")?,
            mode: need(&mut kv, "value_mode")?,
        };
        let cfg = Self {
            variant: need(&mut kv, "variant")?,
            latent_dim: need(&mut kv, "latent_dim")?,
            eta_percent: need(&mut kv, "eta_percent")?,
            epsilon: need(&mut kv, "epsilon")?,
            lambda_ssim: need(&mut kv, "lambda_ssim")?,
            input_frames: need(&mut kv, "input_frames")?,
            ablation: Ablation {
                no_rbm: need(&mut kv, "no_rbm")?,
                no_bcde: need(&mut kv, "no_bcde")?,
                no_me: need(&mut kv, "no_me")?,
            },
            width: need(&mut kv, "width")?,
            hidden: need(&mut kv, "hidden")?,
            interp: need(&mut kv, "interp")?,
            grid,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}
