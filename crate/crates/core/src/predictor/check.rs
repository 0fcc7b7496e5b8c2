//! Finite-difference check of the full training loss on a tiny network.

use diffcalc::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{PredictorConfig, Variant};
use super::net::{LatentChoice, NetInputs, Network, Noise};
use crate::error::Result;
use crate::worldsim::{Mode, ViewSpec};

/// 16×16 grid, 8-dimensional latent, three input frames.
pub fn tiny_config(mode: Mode, variant: Variant) -> PredictorConfig {
    let mut cfg = PredictorConfig::new(ViewSpec::default_for(mode, 16).grid(mode));
    cfg.variant = variant;
    cfg.latent_dim = 8;
    cfg.input_frames = 3;
    cfg.width = 4;
    cfg.hidden = 16;
    cfg
}

/// Random inputs of the right sizes, with a target.
pub fn random_inputs<R: Rng + ?Sized>(cfg: &PredictorConfig, rng: &mut R) -> NetInputs {
    let hw = cfg.grid.h * cfg.grid.w;
    let cp = cfg.predicted_channels().len();
    let t = cfg.input_frames;
    let mut uniform = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    NetInputs {
        history: uniform((t + 1) * cfg.grid.c() * hw, 0.0, 1.0),
        measurements: uniform(cfg.measurement_features(), -1.0, 1.0),
        diffs: uniform((t - 1) * cp * hw, -0.5, 0.5),
        anticipated: uniform(cp * hw, 0.0, 1.0),
        target: Some(uniform(cp * hw, 0.0, 1.0)),
    }
}

/// Gradient check of the posterior-path step loss (reconstruction, SSIM
/// and KL) in 64-bit precision. Parameters are perturbed off their
/// initialization so that no head sits at exactly zero.
pub fn check_model_gradients(
    cfg: &PredictorConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let net = Network::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e);
    let params: Vec<Tensor<f64>> = net
        .params
        .tensors
        .iter()
        .map(|t| {
            let mut t = t.cast::<f64>();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.1..0.1));
            t
        })
        .collect();
    let inputs = random_inputs(cfg, &mut rng);
    let noise = Noise::draw(cfg.latent_dim, &mut rng);
    let report = grad_check(
        |g, p| {
            net.step_loss(g, p, &inputs, &noise, LatentChoice::Posterior)
                .map(|(total, _, _)| total)
                .map_err(|e| match e {
                    crate::Error::Graph(e) => e,
                    other => diffcalc::GraphError::InvalidArgument {
                        op: "step_loss",
                        reason: other.to_string(),
                    },
                })
        },
        &params,
        opts,
    )?;
    Ok(report)
}
