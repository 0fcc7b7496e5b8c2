use anticipation::losses::{
    gaussian_kl, graph_divergence, graph_kl, graph_ssim, horizon_loss, recon_divergence, ssim,
    Divergence, LossBreakdown, Planes,
};
use anticipation::predictor::GaussianCode;
use diffcalc::{grad_check, GradCheckOptions, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn mse_matches_hand_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (frame(&mut rng, 16), frame(&mut rng, 16));
    let mut s = 0.0;
    for i in 0..16 {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    assert!((recon_divergence(&a, &b, Divergence::Mse).unwrap() - s / 16.0).abs() < 1e-12);
    let mut ce = 0.0;
    for i in 0..16 {
        ce -= a[i] * b[i].ln() + (1.0 - a[i]) * (1.0 - b[i]).ln();
    }
    assert!(
        (recon_divergence(&a, &b, Divergence::CrossEntropy).unwrap() - ce / 16.0).abs() < 1e-12
    );
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 8;
    let q = GaussianCode::new(
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..d).map(|_| rng.random_range(0.3..2.0)).collect(),
    )
    .unwrap();
    let p = GaussianCode::new(
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..d).map(|_| rng.random_range(0.3..2.0)).collect(),
    )
    .unwrap();
    let log_density = |c: &GaussianCode, z: &[f64]| -> f64 {
        (0..d)
            .map(|i| {
                -0.5 * ((z[i] - c.mean[i]).powi(2) / c.var[i]
                    + (2.0 * std::f64::consts::PI * c.var[i]).ln())
            })
            .sum()
    };
    let n = 1_000_000;
    let mut total = 0.0;
    for _ in 0..n {
        let z = q.sample(&mut rng);
        total += log_density(&q, &z) - log_density(&p, &z);
    }
    let estimate = total / n as f64;
    let exact = gaussian_kl(&q, &p).unwrap();
    assert!(
        (estimate - exact).abs() < 0.01 * exact,
        "mc {estimate} exact {exact}"
    );
}

#[test]
fn graph_terms_match_plain_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let planes = Planes { c: 2, h: 10, w: 9 };
    let (a, b) = (frame(&mut rng, planes.len()), frame(&mut rng, planes.len()));
    let mut g = Graph::<f64>::new();
    let va = g.input(Tensor::from_f64(&[2, 10, 9], &a).unwrap());
    let vb = g.input(Tensor::from_f64(&[2, 10, 9], &b).unwrap());
    let s = graph_ssim(&mut g, va, vb).unwrap();
    assert!((g.value(s).item() - ssim(&a, &b, planes).unwrap()).abs() < 1e-12);
    for mode in [Divergence::Mse, Divergence::CrossEntropy] {
        let d = graph_divergence(&mut g, va, vb, mode).unwrap();
        assert!((g.value(d).item() - recon_divergence(&a, &b, mode).unwrap()).abs() < 1e-12);
    }
    let q = GaussianCode::new(vec![0.2, -0.4, 1.0], vec![0.5, 1.5, 0.9]).unwrap();
    let p = GaussianCode::new(vec![-0.1, 0.3, 0.0], vec![1.2, 0.7, 2.0]).unwrap();
    let vars: Vec<_> = [q.mean.clone(), q.log_var(), p.mean.clone(), p.log_var()]
        .into_iter()
        .map(|v| g.input(Tensor::from_vec(v)))
        .collect();
    let kl = graph_kl(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
    assert!((g.value(kl).item() - gaussian_kl(&q, &p).unwrap()).abs() < 1e-12);
}

#[test]
fn loss_terms_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = frame(&mut rng, 2 * 9 * 9);
    let params = [
        Tensor::from_f64(&[2, 9, 9], &frame(&mut rng, 2 * 9 * 9)).unwrap(),
        Tensor::from_vec((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
        Tensor::from_vec((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
        Tensor::from_vec((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
        Tensor::from_vec((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
    ];
    let report = grad_check(
        |g, p| {
            let t = g.input(Tensor::from_f64(&[2, 9, 9], &target)?);
            let pred = g.sigmoid(p[0])?;
            let d = graph_divergence(g, t, pred, Divergence::CrossEntropy)?;
            let s = graph_ssim(g, t, pred)?;
            let s = g.scale(s, -0.1)?;
            let kl = graph_kl(g, p[1], p[2], p[3], p[4])?;
            let total = g.add(d, s)?;
            g.add(total, kl)
        },
        &params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn horizon_sum_is_additive() {
    let steps = [
        LossBreakdown::new(0.1, 0.9, 0.2, 0.05),
        LossBreakdown::new(0.3, 0.5, 0.0, 0.05),
    ];
    let one = horizon_loss(&steps[..1]).unwrap();
    assert_eq!(one, steps[0]);
    let both = horizon_loss(&steps).unwrap();
    assert!((both.total - (steps[0].total + steps[1].total)).abs() < 1e-15);
    assert!(both.total >= one.total);
    assert!(horizon_loss(&[]).is_err());
}

fn code_strategy(d: usize) -> impl Strategy<Value = GaussianCode> {
    (
        prop::collection::vec(-3.0f64..3.0, d),
        prop::collection::vec(0.05f64..5.0, d),
    )
        .prop_map(|(m, v)| GaussianCode::new(m, v).unwrap())
}

proptest! {
    #[test]
    fn kl_is_nonnegative(q in code_strategy(6), p in code_strategy(6)) {
        prop_assert!(gaussian_kl(&q, &p).unwrap() >= 0.0);
        prop_assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn ssim_bounded_and_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = Planes { c: 2, h: 12, w: 10 };
        let (a, b) = (frame(&mut rng, planes.len()), frame(&mut rng, planes.len()));
        let ab = ssim(&a, &b, planes).unwrap();
        let ba = ssim(&b, &a, planes).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a, planes).unwrap(), 1.0);
    }

    #[test]
    fn ssim_invariant_to_shared_translation(seed in any::<u64>(), dy in 0usize..4, dx in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (14, 13);
        let (a, b) = (frame(&mut rng, h * w), frame(&mut rng, h * w));
        // Shift both frames down/right; compare on the region both still contain.
        let mut shift = |x: &[f64]| {
            let mut y: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            for r in 0..h - dy {
                for c in 0..w - dx {
                    y[(r + dy) * w + c + dx] = x[r * w + c];
                }
            }
            y
        };
        let (sa, sb) = (shift(&a), shift(&b));
        let window = |x: &[f64], r0: usize, c0: usize| {
            let mut out = Vec::new();
            for r in r0..r0 + h - dy {
                out.extend_from_slice(&x[r * w + c0..r * w + c0 + w - dx]);
            }
            out
        };
        let planes = Planes { c: 1, h: h - dy, w: w - dx };
        let before = ssim(&window(&a, 0, 0), &window(&b, 0, 0), planes).unwrap();
        let after = ssim(&window(&sa, dy, dx), &window(&sb, dy, dx), planes).unwrap();
        prop_assert_eq!(before.to_bits(), after.to_bits());
    }
}
