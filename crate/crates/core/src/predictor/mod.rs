//! Learned environment prediction: split latent code with a conditional
//! prior and a posterior, motion encoding, and a decoder predicting either
//! the environment frame or its change.

mod check;
mod code;
mod config;
mod net;
mod snapshot;
mod step;

pub use check::{check_model_gradients, random_inputs, tiny_config};
pub use code::{sample_latent, switch_source, CodeSource, GaussianCode, SampleMode};
pub use config::{Ablation, PredictorConfig, Variant};
pub use net::{LatentChoice, NetInputs, NetOutputs, Network, Noise, ParamStore};
pub use snapshot::{Container, MAGIC, PREDICTOR_SECTION};
pub use step::{
    dl_compose, predict_step, EnvModel, Learned, OracleStub, PersistenceStub, StepContext,
    StepOutput, Window,
};

use diffcalc::Graph;

use crate::error::Result;

/// Deterministic readout of every code for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Codes {
    pub shared: Vec<f64>,
    pub prior: GaussianCode,
    /// Present when the inputs carry a target.
    pub posterior: Option<GaussianCode>,
    pub motion: GaussianCode,
}

impl Network {
    /// Evaluates the encoders at 64-bit precision.
    pub fn codes(&self, inputs: &NetInputs) -> Result<Codes> {
        let mut g: Graph<f64> = Graph::new();
        let params = self.params.leaves(&mut g);
        let l = self.cfg.latent_dim;
        let out = self.forward(
            &mut g,
            &params,
            inputs,
            &Noise::zeros(l),
            LatentChoice::PriorMean,
        )?;
        let v = |g: &Graph<f64>, x| g.value(x).data().to_vec();
        let code = |g: &Graph<f64>, (m, lv)| GaussianCode::from_log_var(v(g, m), &v(g, lv));
        Ok(Codes {
            shared: v(&g, out.shared),
            prior: code(&g, (out.prior_mean, out.prior_log_var))?,
            posterior: out.posterior.map(|p| code(&g, p)).transpose()?,
            motion: GaussianCode::new(v(&g, out.motion_mean), vec![self.cfg.epsilon; l])?,
        })
    }
}
