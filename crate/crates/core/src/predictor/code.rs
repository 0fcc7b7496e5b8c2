use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Diagonal Gaussian over a latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCode {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianCode {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape {
                op: "gaussian_code",
                left: format!("mean [{}]", mean.len()),
                right: format!("var [{}]", var.len()),
            });
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "variance must be positive and finite, got {v}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("non-finite latent mean"));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// From a mean and a log-variance vector.
    pub fn from_log_var(mean: Vec<f64>, log_var: &[f64]) -> Result<Self> {
        Self::new(mean, log_var.iter().map(|l| l.exp()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_var(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.ln()).collect()
    }

    /// Reparameterized draw `mean + sqrt(var) ⊙ noise`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.reparameterize(&noise)
    }

    pub fn reparameterize(&self, noise: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(noise)
            .map(|((m, v), n)| m + v.sqrt() * n)
            .collect()
    }
}

/// Which encoder a training-mode sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeSource {
    Prior,
    Posterior,
}

/// With probability `eta_percent`% the prior is used, otherwise the posterior.
pub fn switch_source<R: Rng + ?Sized>(eta_percent: f64, rng: &mut R) -> CodeSource {
    if rng.random::<f64>() * 100.0 < eta_percent {
        CodeSource::Prior
    } else {
        CodeSource::Posterior
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Infer,
    /// Inference returning the prior mean.
    Mean,
}

/// Draws the unshared code. Training switches between prior and posterior;
/// inference uses the prior only.
pub fn sample_latent<R: Rng + ?Sized>(
    prior: &GaussianCode,
    posterior: Option<&GaussianCode>,
    mode: SampleMode,
    eta_percent: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, CodeSource)> {
    match mode {
        SampleMode::Mean => Ok((prior.mean.clone(), CodeSource::Prior)),
        SampleMode::Infer => Ok((prior.sample(rng), CodeSource::Prior)),
        SampleMode::Train => {
            let posterior = posterior
                .ok_or_else(|| Error::invalid("training-mode sampling needs a posterior code"))?;
            match switch_source(eta_percent, rng) {
                CodeSource::Prior => Ok((prior.sample(rng), CodeSource::Prior)),
                CodeSource::Posterior => Ok((posterior.sample(rng), CodeSource::Posterior)),
            }
        }
    }
}
