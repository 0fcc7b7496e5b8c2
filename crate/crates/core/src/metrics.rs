//! Per-horizon prediction quality: MSE, occupancy hit rates, and average
//! log-likelihood under a kernel density estimate of training frames.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gridops::{ChannelRole, Ogm, ValueMode};
use crate::pipeline::{record_states, rollout, window_at};
use crate::predictor::EnvModel;
use crate::record::SequenceRecord;

fn same_grid(op: &'static str, a: &Ogm, b: &Ogm) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::Shape {
            op,
            left: format!("{:?}", a.grid.shape()),
            right: format!("{:?}", b.grid.shape()),
        });
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse_metric(pred: &Ogm, target: &Ogm) -> Result<f64> {
    same_grid("mse_metric", pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Hit rates in percent. `tp` is absent when the target has no occupied
/// pixel, `tn` when it has no free one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRates {
    pub tp: Option<f64>,
    pub tn: Option<f64>,
}

/// Classification rates of `pred` against a binary `target`, pixel by pixel.
pub fn hit_rates(pred: &[f32], target: &[f32], threshold: f32) -> Result<HitRates> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            op: "hit_rates",
            left: format!("{} values", pred.len()),
            right: format!("{} values", target.len()),
        });
    }
    if let Some(v) = target.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("target must be binary, found {v}")));
    }
    let (mut occ, mut occ_hit, mut free, mut free_hit) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let said = p >= threshold;
        if t == 1.0 {
            occ += 1;
            occ_hit += usize::from(said);
        } else {
            free += 1;
            free_hit += usize::from(!said);
        }
    }
    let pct = |hit: usize, n: usize| (n > 0).then(|| 100.0 * hit as f64 / n as f64);
    Ok(HitRates {
        tp: pct(occ_hit, occ),
        tn: pct(free_hit, free),
    })
}

/// Hit rates over the occupancy channels of two frames.
pub fn tp_tn(pred: &Ogm, target: &Ogm, threshold: f32) -> Result<HitRates> {
    same_grid("tp_tn", pred, target)?;
    let chans = pred.grid.channels_with(ChannelRole::Occupancy);
    let gather = |f: &Ogm| -> Vec<f32> {
        chans
            .iter()
            .flat_map(|&c| f.channel(c).iter().copied())
            .collect()
    };
    hit_rates(&gather(pred), &gather(target), threshold)
}

/// Isotropic Gaussian kernel density over flattened frames.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    refs: Vec<Vec<f32>>,
    pub sigma: f64,
    pub dim: usize,
}

impl KdeModel {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

pub fn kde_fit(refs: Vec<Vec<f32>>, sigma: f64) -> Result<KdeModel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "kernel width must be positive, got {sigma}"
        )));
    }
    let dim = refs
        .first()
        .ok_or_else(|| Error::invalid("density estimate needs a reference"))?
        .len();
    if dim == 0 || refs.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid(
            "reference vectors must share one non-zero length",
        ));
    }
    Ok(KdeModel { refs, sigma, dim })
}

/// Up to `count` frames spread evenly over the records.
pub fn kde_references(records: &[SequenceRecord], count: usize) -> Vec<Vec<f32>> {
    let all: Vec<&Ogm> = records.iter().flat_map(|r| r.frames.iter()).collect();
    let n = count.min(all.len());
    (0..n)
        .map(|i| all[i * all.len() / n].data().to_vec())
        .collect()
}

pub fn kde_logpdf(model: &KdeModel, x: &[f32]) -> Result<f64> {
    if x.len() != model.dim {
        return Err(Error::Shape {
            op: "kde_logpdf",
            left: format!("{} values", model.dim),
            right: format!("{} values", x.len()),
        });
    }
    let two_s2 = 2.0 * model.sigma * model.sigma;
    let exps: Vec<f64> = model
        .refs
        .iter()
        .map(|r| {
            let d2: f64 = r
                .iter()
                .zip(x)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            -d2 / two_s2
        })
        .collect();
    let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln();
    let d = model.dim as f64;
    Ok(
        -0.5 * d * (std::f64::consts::TAU * model.sigma * model.sigma).ln()
            - (model.refs.len() as f64).ln()
            + lse,
    )
}

/// Mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Stat {
    /// `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, stderr, n })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonRow {
    pub horizon: usize,
    pub mse: Stat,
    /// Binary frames only.
    pub tp: Option<Stat>,
    pub tn: Option<Stat>,
    /// With a density model only.
    pub all: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<HorizonRow>,
}

impl EvalReport {
    pub fn row(&self, horizon: usize) -> Option<&HorizonRow> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }

    fn entries(&self) -> Vec<(usize, &'static str, Stat)> {
        let mut out = Vec::new();
        for r in &self.rows {
            out.push((r.horizon, "mse", r.mse));
            for (name, s) in [("tp", r.tp), ("tn", r.tn), ("all", r.all)] {
                if let Some(s) = s {
                    out.push((r.horizon, name, s));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,metric,mean,spread\n");
        for (k, name, st) in self.entries() {
            let _ = writeln!(s, "{k},{name},{},{}", st.mean, st.stderr);
        }
        s
    }

    /// Aligned table, one row per metric and one column per horizon.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8}", "metric");
        for r in &self.rows {
            let _ = write!(s, "{:>24}", format!("k = {}", r.horizon));
        }
        s.push('\n');
        for name in ["mse", "tp", "tn", "all"] {
            let cells: Vec<Option<Stat>> = self
                .rows
                .iter()
                .map(|r| match name {
                    "mse" => Some(r.mse),
                    "tp" => r.tp,
                    "tn" => r.tn,
                    _ => r.all,
                })
                .collect();
            if cells.iter().all(Option::is_none) {
                continue;
            }
            let _ = write!(s, "{name:<8}");
            for c in cells {
                let text = match c {
                    Some(st) if name == "mse" => format!("{:.5} ± {:.5}", st.mean, st.stderr),
                    Some(st) => format!("{:.2} ± {:.2}", st.mean, st.stderr),
                    None => "-".to_string(),
                };
                let _ = write!(s, "{text:>24}");
            }
            s.push('\n');
        }
        s
    }
}

/// Closed-loop rollout from the first full window of every record, scored
/// against the recorded frames at each horizon.
pub fn evaluate(
    model: &mut dyn EnvModel,
    data: &[SequenceRecord],
    horizons: &[usize],
    kde: Option<&KdeModel>,
) -> Result<EvalReport> {
    let cfg = model.config().clone();
    let far = *horizons
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("no horizons to evaluate"))?;
    if horizons.contains(&0) {
        return Err(Error::invalid("horizons start at 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("no evaluation sequences"));
    }
    let t = cfg.input_frames;
    let mut per = vec![[const { Vec::new() }; 4]; horizons.len()];
    for rec in data {
        if rec.len() < t + far {
            return Err(Error::invalid(format!(
                "horizon {far} with {t} input frames needs {} frames, a sequence has {}",
                t + far,
                rec.len()
            )));
        }
        let states = record_states(rec)?;
        let window = window_at(&cfg, rec, &states, t - 1)?;
        let truths = &rec.frames[t..t + far];
        let steps = rollout(
            model,
            window,
            &rec.actions[t - 1..t - 1 + far],
            Some(truths),
        )?;
        for (slot, &k) in per.iter_mut().zip(horizons) {
            let (pred, truth) = (&steps[k - 1].frame, &truths[k - 1]);
            slot[0].push(mse_metric(pred, truth)?);
            if cfg.grid.mode == ValueMode::Binary {
                let h = tp_tn(pred, truth, 0.5)?;
                slot[1].extend(h.tp);
                slot[2].extend(h.tn);
            }
            if let Some(m) = kde {
                slot[3].push(kde_logpdf(m, pred.data())?);
            }
        }
    }
    let rows = horizons
        .iter()
        .zip(&per)
        .map(|(&horizon, s)| HorizonRow {
            horizon,
            mse: Stat::of(&s[0]).expect("one value per sequence"),
            tp: Stat::of(&s[1]),
            tn: Stat::of(&s[2]),
            all: Stat::of(&s[3]),
        })
        .collect();
    Ok(EvalReport { rows })
}
