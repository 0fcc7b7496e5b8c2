//! Central finite-difference verification of [`Graph::backward`].

use std::fmt;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Coordinates whose kink pattern changes within `kink_margin · step`
    /// are skipped.
    pub kink_margin: f64,
    /// Evenly spaced subset of each block; `None` checks every coordinate.
    pub max_coords_per_block: Option<usize>,
    /// Lower bound of the relative-error denominator, so that gradients
    /// near zero are compared absolutely.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            kink_margin: 10.0,
            max_coords_per_block: None,
            denom_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub block: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
    /// Where a non-finite value was first seen, if anywhere.
    pub non_finite: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.blocks.iter().all(|b| b.max_rel_err < self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(loc) = &self.non_finite {
            return write!(f, "FAIL non-finite value at {loc}");
        }
        writeln!(
            f,
            "{} max rel err {:.3e} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tol
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "  block {:>3}: checked {:>5} skipped {:>4} max {:.3e} mean {:.3e}",
                b.block, b.checked, b.skipped, b.max_rel_err, b.mean_rel_err
            )?;
        }
        Ok(())
    }
}

struct Eval {
    loss: f64,
    kinks: Vec<u8>,
    non_finite: Option<String>,
}

fn evaluate<F>(f: &mut F, params: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var, Eval)>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let non_finite = g.first_non_finite().map(|node| format!("node {node}"));
    let eval = Eval {
        loss: g.value(loss).data().first().copied().unwrap_or(f64::NAN),
        kinks: g.kink_pattern(),
        non_finite,
    };
    Ok((g, vars, loss, eval))
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences at `params`. `f` receives the parameter leaves in
/// the order given and must be deterministic.
pub fn grad_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        tol: opts.tol,
        blocks: Vec::new(),
        non_finite: None,
    };
    if params.is_empty() {
        return Ok(report);
    }
    let (mut graph, vars, loss, base) = evaluate(&mut f, params)?;
    if let Some(loc) = base.non_finite {
        report.non_finite = Some(format!("base point, {loc}"));
        return Ok(report);
    }
    let grads = graph.backward(loss)?;
    if let Some((b, i)) = vars.iter().enumerate().find_map(|(b, &v)| {
        grads
            .wrt(v)
            .and_then(|g| g.data().iter().position(|x| !x.is_finite()))
            .map(|i| (b, i))
    }) {
        report.non_finite = Some(format!("gradient block {b}, coordinate {i}"));
        return Ok(report);
    }

    let mut work = params.to_vec();
    for (b, &var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(var)
            .expect("every block is a parameter")
            .data()
            .to_vec();
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords_per_block {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
            _ => (0..n).collect(),
        };
        let mut block = BlockReport {
            block: b,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            worst: None,
        };
        let mut total = 0.0;
        for i in coords {
            let x0 = params[b].data()[i];
            let mut at = |x: f64, work: &mut Vec<Tensor<f64>>| -> Result<Eval> {
                work[b].data_mut()[i] = x;
                let (_, _, _, e) = evaluate(&mut f, work)?;
                work[b].data_mut()[i] = x0;
                Ok(e)
            };
            let margin = opts.kink_margin * opts.step;
            let mut near_kink = false;
            if !base.kinks.is_empty() {
                for x in [x0 - margin, x0 + margin] {
                    if at(x, &mut work)?.kinks != base.kinks {
                        near_kink = true;
                    }
                }
            }
            if near_kink {
                block.skipped += 1;
                continue;
            }
            let plus = at(x0 + opts.step, &mut work)?;
            let minus = at(x0 - opts.step, &mut work)?;
            for (side, e) in [("+", &plus), ("-", &minus)] {
                if let Some(loc) = &e.non_finite {
                    report.non_finite =
                        Some(format!("block {b}, coordinate {i} ({side}step), {loc}"));
                    report.blocks.push(block);
                    return Ok(report);
                }
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.denom_floor);
            block.checked += 1;
            total += err;
            if err > block.max_rel_err || block.worst.is_none() {
                block.max_rel_err = err.max(block.max_rel_err);
                block.worst = Some(i);
            }
        }
        if block.checked > 0 {
            block.mean_rel_err = total / block.checked as f64;
        }
        report.blocks.push(block);
    }
    Ok(report)
}
