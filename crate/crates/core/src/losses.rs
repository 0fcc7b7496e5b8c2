//! Training objective: reconstruction divergence, windowed SSIM, closed-form
//! Gaussian KL, and their per-step and multi-step sums.
//!
//! Every term exists twice: over plain `f64` slices (evaluation, tests) and
//! as graph ops (training), with the same evaluation order.

use std::fmt;
use std::str::FromStr;

use diffcalc::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::predictor::GaussianCode;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Divergence {
    Mse,
    CrossEntropy,
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Divergence::Mse),
            "ce" => Ok(Divergence::CrossEntropy),
            other => Err(Error::invalid(format!("unknown divergence `{other}`"))),
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Divergence::Mse => "mse",
            Divergence::CrossEntropy => "ce",
        })
    }
}

/// Frame layout `[channels, rows, cols]` shared by the slice functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Planes {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Planes {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            left: format!("[{}]", a.len()),
            right: format!("[{}]", b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("{op}: empty frames")));
    }
    Ok(())
}

/// Mean squared error or mean Bernoulli cross-entropy over all values.
pub fn recon_divergence(target: &[f64], pred: &[f64], mode: Divergence) -> Result<f64> {
    same_len("recon_divergence", target, pred)?;
    let n = target.len() as f64;
    let total: f64 = match mode {
        Divergence::Mse => target
            .iter()
            .zip(pred)
            .map(|(t, p)| (p - t) * (p - t))
            .sum(),
        Divergence::CrossEntropy => target
            .iter()
            .zip(pred)
            .map(|(t, p)| {
                let p = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(total / n)
}

fn box_mean_plane(x: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let area = (k * k) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut s = 0.0;
            for dr in 0..k {
                let mut row = 0.0;
                for dc in 0..k {
                    row += x[(r + dr) * w + c + dc];
                }
                s += row;
            }
            out.push(s / area);
        }
    }
    out
}

/// Per-position SSIM terms in the order shared with the graph version, so
/// that `ssim(x, x)` is exactly 1 and the result is symmetric bit for bit.
fn ssim_ratio(ma: f64, mb: f64, saa: f64, sbb: f64, sab: f64) -> f64 {
    let var_a = saa - ma * ma;
    let var_b = sbb - mb * mb;
    let cov = sab - ma * mb;
    let num = (2.0 * (ma * mb) + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = ((ma * ma + mb * mb) + SSIM_C1) * ((var_a + var_b) + SSIM_C2);
    num / den
}

/// Mean local SSIM with a uniform `7×7` window, averaged over channels.
pub fn ssim(a: &[f64], b: &[f64], planes: Planes) -> Result<f64> {
    same_len("ssim", a, b)?;
    if a.len() != planes.len() {
        return Err(Error::Shape {
            op: "ssim",
            left: format!("[{}]", a.len()),
            right: format!("{:?}", planes),
        });
    }
    let (h, w, k) = (planes.h, planes.w, SSIM_WINDOW);
    if h < k || w < k {
        return Err(Error::invalid(format!(
            "ssim: {h}×{w} frame smaller than the {k}×{k} window"
        )));
    }
    let n = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..planes.c {
        let pa = &a[ch * n..(ch + 1) * n];
        let pb = &b[ch * n..(ch + 1) * n];
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let cross: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let ma = box_mean_plane(pa, h, w, k);
        let mb = box_mean_plane(pb, h, w, k);
        let saa = box_mean_plane(&sq_a, h, w, k);
        let sbb = box_mean_plane(&sq_b, h, w, k);
        let sab = box_mean_plane(&cross, h, w, k);
        for i in 0..ma.len() {
            total += ssim_ratio(ma[i], mb[i], saa[i], sbb[i], sab[i]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn gaussian_kl(q: &GaussianCode, p: &GaussianCode) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Shape {
            op: "gaussian_kl",
            left: format!("[{}]", q.dim()),
            right: format!("[{}]", p.dim()),
        });
    }
    if let Some(v) = q.var.iter().chain(&p.var).find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!(
            "gaussian_kl: nonpositive variance {v}"
        )));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let d = p.mean[i] - q.mean[i];
        total += q.var[i] / p.var[i] + d * d / p.var[i] + (p.var[i] / q.var[i]).ln() - 1.0;
    }
    Ok(0.5 * total)
}

/// The terms of one prediction step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub ssim: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(rec: f64, ssim: f64, kl: f64, lambda: f64) -> Self {
        Self {
            rec,
            ssim,
            kl,
            total: rec + lambda * (1.0 - ssim) + kl,
        }
    }
}

impl std::ops::Add for LossBreakdown {
    type Output = LossBreakdown;

    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            rec: self.rec + o.rec,
            ssim: self.ssim + o.ssim,
            kl: self.kl + o.kl,
            total: self.total + o.total,
        }
    }
}

/// Whether the prediction is the environment frame itself or a raw
/// `j_ego + difference` composition that may leave `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionKind {
    Direct,
    RawComposition,
}

/// `D(target, pred) + λ(1 − SSIM) + KL(q‖p)`. For a raw composition the
/// divergence sees the raw values and SSIM sees them clipped to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn step_loss(
    target: &[f64],
    pred: &[f64],
    planes: Planes,
    q: &GaussianCode,
    p: &GaussianCode,
    lambda: f64,
    kind: PredictionKind,
    mode: Divergence,
) -> Result<LossBreakdown> {
    let rec = recon_divergence(target, pred, mode)?;
    let s = match kind {
        PredictionKind::Direct => ssim(target, pred, planes)?,
        PredictionKind::RawComposition => {
            let clipped: Vec<f64> = pred.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            ssim(target, &clipped, planes)?
        }
    };
    Ok(LossBreakdown::new(rec, s, gaussian_kl(q, p)?, lambda))
}

/// Sum of the per-step breakdowns of a `k`-step rollout.
pub fn horizon_loss(steps: &[LossBreakdown]) -> Result<LossBreakdown> {
    if steps.is_empty() {
        return Err(Error::invalid("horizon_loss needs at least one step"));
    }
    Ok(steps
        .iter()
        .copied()
        .fold(LossBreakdown::default(), |a, b| a + b))
}

/// Graph form of [`recon_divergence`].
pub fn graph_divergence<T: Real>(
    g: &mut Graph<T>,
    target: Var,
    pred: Var,
    mode: Divergence,
) -> diffcalc::Result<Var> {
    Ok(match mode {
        Divergence::Mse => {
            let d = g.sub(pred, target)?;
            let sq = g.square(d)?;
            g.mean(sq)?
        }
        Divergence::CrossEntropy => {
            let p = g.clamp(pred, T::of(CE_CLAMP), T::of(1.0 - CE_CLAMP))?;
            let log_p = g.log(p)?;
            let one_minus = g.scale(p, -T::one())?;
            let one_minus = g.offset(one_minus, T::one())?;
            let log_q = g.log(one_minus)?;
            let t_rest = g.scale(target, -T::one())?;
            let t_rest = g.offset(t_rest, T::one())?;
            let a = g.mul(target, log_p)?;
            let b = g.mul(t_rest, log_q)?;
            let s = g.add(a, b)?;
            let m = g.mean(s)?;
            g.neg(m)?
        }
    })
}

/// Graph form of [`ssim`] for `[c, h, w]` frames.
pub fn graph_ssim<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> diffcalc::Result<Var> {
    let k = SSIM_WINDOW;
    let sq_a = g.mul(a, a)?;
    let sq_b = g.mul(b, b)?;
    let cross = g.mul(a, b)?;
    let ma = g.box_mean(a, k)?;
    let mb = g.box_mean(b, k)?;
    let saa = g.box_mean(sq_a, k)?;
    let sbb = g.box_mean(sq_b, k)?;
    let sab = g.box_mean(cross, k)?;
    let ma2 = g.mul(ma, ma)?;
    let mb2 = g.mul(mb, mb)?;
    let mab = g.mul(ma, mb)?;
    let var_a = g.sub(saa, ma2)?;
    let var_b = g.sub(sbb, mb2)?;
    let cov = g.sub(sab, mab)?;
    let two_mab = g.scale(mab, T::of(2.0))?;
    let l_num = g.offset(two_mab, T::of(SSIM_C1))?;
    let two_cov = g.scale(cov, T::of(2.0))?;
    let c_num = g.offset(two_cov, T::of(SSIM_C2))?;
    let num = g.mul(l_num, c_num)?;
    let m_sum = g.add(ma2, mb2)?;
    let l_den = g.offset(m_sum, T::of(SSIM_C1))?;
    let v_sum = g.add(var_a, var_b)?;
    let c_den = g.offset(v_sum, T::of(SSIM_C2))?;
    let den = g.mul(l_den, c_den)?;
    let ratio = g.div(num, den)?;
    g.mean(ratio)
}

/// Graph form of [`gaussian_kl`] with both codes given as mean and
/// log-variance vectors.
pub fn graph_kl<T: Real>(
    g: &mut Graph<T>,
    q_mean: Var,
    q_log_var: Var,
    p_mean: Var,
    p_log_var: Var,
) -> diffcalc::Result<Var> {
    let ratio_log = g.sub(q_log_var, p_log_var)?;
    let ratio = g.exp(ratio_log)?;
    let d = g.sub(p_mean, q_mean)?;
    let d2 = g.square(d)?;
    let neg_p = g.neg(p_log_var)?;
    let inv_p = g.exp(neg_p)?;
    let maha = g.mul(d2, inv_p)?;
    let log_term = g.neg(ratio_log)?;
    let s = g.add(ratio, maha)?;
    let s = g.add(s, log_term)?;
    let s = g.offset(s, -T::one())?;
    let total = g.sum(s)?;
    g.scale(total, T::of(0.5))
}

/// Constant graph input holding a frame.
pub fn frame_input<T: Real>(
    g: &mut Graph<T>,
    data: &[f64],
    planes: Planes,
) -> diffcalc::Result<Var> {
    Ok(g.input(Tensor::from_f64(&[planes.c, planes.h, planes.w], data)?))
}
