use anticipation::gridops::{DiffFrame, Ogm};
use anticipation::losses::gaussian_kl;
use anticipation::pipeline::{record_states, window_at};
use anticipation::predictor::{
    check_model_gradients, dl_compose, predict_step, random_inputs, sample_latent, switch_source,
    tiny_config, Ablation, CodeSource, Container, EnvModel, GaussianCode, LatentChoice, Learned,
    NetInputs, Network, Noise, OracleStub, PersistenceStub, PredictorConfig, SampleMode,
    StepContext, Variant,
};
use anticipation::worldsim::{generate, Mode, ScenarioSpec, ViewSpec};
use diffcalc::{GradCheckOptions, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn base_cfg() -> PredictorConfig {
    tiny_config(Mode::Highway, Variant::Base)
}

fn zero_inputs(cfg: &PredictorConfig) -> NetInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut inp = random_inputs(cfg, &mut rng);
    for v in [
        &mut inp.history,
        &mut inp.measurements,
        &mut inp.diffs,
        &mut inp.anticipated,
    ] {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    inp.target = Some(vec![0.0; inp.anticipated.len()]);
    inp
}

/// Evaluates `out` under the prior mean.
fn mean_output(net: &Network, inp: &NetInputs) -> Vec<f64> {
    let mut g: Graph<f64> = Graph::new();
    let p = net.params.leaves(&mut g);
    let out = net
        .forward(
            &mut g,
            &p,
            inp,
            &Noise::zeros(net.cfg.latent_dim),
            LatentChoice::PriorMean,
        )
        .unwrap();
    g.value(out.out).data().to_vec()
}

#[test]
fn untrained_codes_follow_the_initialization_contract() {
    let cfg = base_cfg();
    let net = Network::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let codes = net.codes(&random_inputs(&cfg, &mut rng)).unwrap();
    assert!(codes.prior.mean.iter().all(|&m| m == 0.0));
    assert!(codes.prior.var.iter().all(|&v| v == 1.0));
    let post = codes.posterior.unwrap();
    assert!(post.var.iter().all(|&v| v > 0.0));
    assert_eq!(gaussian_kl(&codes.prior, &codes.prior).unwrap(), 0.0);
    assert_eq!(gaussian_kl(&post, &post).unwrap(), 0.0);
    assert!(codes.motion.var.iter().all(|&v| v == 0.5));
    assert!(codes.motion.mean.iter().all(|m| m.is_finite()));
}

#[test]
fn encoders_are_deterministic_and_finite_on_zero_input() {
    let cfg = base_cfg();
    let net = Network::new(cfg.clone(), 4).unwrap();
    let inp = zero_inputs(&cfg);
    let a = net.codes(&inp).unwrap();
    assert_eq!(a, net.codes(&inp).unwrap());
    assert!(a.shared.iter().chain(&a.motion.mean).all(|v| v.is_finite()));
    assert_eq!(mean_output(&net, &inp), mean_output(&net, &inp));
}

#[test]
fn inference_cannot_use_the_posterior() {
    let cfg = base_cfg();
    let net = Network::new(cfg.clone(), 0).unwrap();
    let mut inp = zero_inputs(&cfg);
    inp.target = None;
    let mut g: Graph<f32> = Graph::new();
    let p = net.params.leaves(&mut g);
    assert!(net
        .forward(&mut g, &p, &inp, &Noise::zeros(8), LatentChoice::Posterior)
        .is_err());
    inp.history.pop();
    assert!(net.codes(&inp).is_err());
}

#[test]
fn decoder_heads_stay_in_range() {
    for (variant, lo) in [(Variant::Base, 0.0), (Variant::Dl, -1.0)] {
        let cfg = tiny_config(Mode::Highway, variant);
        let mut net = Network::new(cfg.clone(), 9).unwrap();
        // Large weights push the heads into saturation.
        for t in &mut net.params.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= 8.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let mut inp = random_inputs(&cfg, &mut rng);
            inp.history.iter_mut().for_each(|v| *v *= 10.0);
            let out = mean_output(&net, &inp);
            assert_eq!(out.len(), cfg.predicted_channels().len() * 16 * 16);
            assert!(out.iter().all(|&v| (lo..=1.0).contains(&v)), "{variant}");
        }
    }
}

#[test]
fn dl_compose_examples() {
    let cfg = tiny_config(Mode::Urban, Variant::Dl);
    let mut j_ego = Ogm::zeros(cfg.grid.clone());
    j_ego.set(0, 3, 3, 1.0);
    j_ego.set(0, 4, 4, 0.25);
    let zero = DiffFrame {
        shape: cfg.grid.shape(),
        data: vec![0.0; cfg.grid.len()],
    };
    let (raw, clipped) = dl_compose(&j_ego, &zero).unwrap();
    assert_eq!(clipped, j_ego);
    assert!(raw
        .iter()
        .zip(j_ego.data())
        .all(|(&r, &e)| r == f64::from(e)));

    let mut diff = zero.clone();
    let w = cfg.grid.w;
    diff.data[3 * w + 3] = 0.5;
    diff.data[4 * w + 4] = -0.75;
    let (raw, clipped) = dl_compose(&j_ego, &diff).unwrap();
    assert_eq!(raw[3 * w + 3], 1.5);
    assert_eq!(clipped.get(0, 3, 3), 1.0);
    assert_eq!(raw[4 * w + 4], -0.5);
    assert_eq!(clipped.get(0, 4, 4), 0.0);

    // The true difference recovers the environment exactly.
    let mut env = Ogm::zeros(cfg.grid.clone());
    env.set(0, 7, 9, 1.0);
    let truth = DiffFrame {
        shape: cfg.grid.shape(),
        data: env
            .data()
            .iter()
            .zip(j_ego.data())
            .map(|(&a, &b)| f64::from(a) - f64::from(b))
            .collect(),
    };
    assert_eq!(dl_compose(&j_ego, &truth).unwrap().1, env);
}

fn highway_record(
    seed: u64,
    size: usize,
) -> (PredictorConfig, anticipation::record::SequenceRecord) {
    let mut spec = ScenarioSpec::new(Mode::Highway, seed);
    spec.view = ViewSpec::default_for(Mode::Highway, size);
    let mut cfg = PredictorConfig::new(spec.view.grid(Mode::Highway));
    cfg.input_frames = 4;
    cfg.width = 4;
    cfg.hidden = 16;
    cfg.latent_dim = 8;
    (cfg, generate(&spec).unwrap())
}

#[test]
fn aligned_oracle_environment_reproduces_the_next_frame() {
    let (cfg, rec) = highway_record(5, 32);
    let states = record_states(&rec).unwrap();
    let margin = 4;
    for end in [3, 10, 20, 30] {
        let window = window_at(&cfg, &rec, &states, end).unwrap();
        let truth = &rec.frames[end + 1];
        let ctx = StepContext::new(&window, rec.actions[end], Some(truth)).unwrap();
        let env = OracleStub(cfg.clone()).predict_env(&ctx).unwrap();
        let pred = ctx.finish(&env).unwrap();
        let (h, w) = (cfg.grid.h, cfg.grid.w);
        let mut err = 0.0;
        let mut n = 0;
        for c in 0..cfg.grid.c() {
            for r in margin..h - margin {
                for col in margin..w - margin {
                    err += f64::from((pred.get(c, r, col) - truth.get(c, r, col)).abs());
                    n += 1;
                }
            }
        }
        assert!(err / (n as f64) < 0.02, "step {end}: {}", err / n as f64);
    }
}

#[test]
fn prediction_steps_give_valid_frames() {
    let (cfg, rec) = highway_record(6, 32);
    let states = record_states(&rec).unwrap();
    let window = window_at(&cfg, &rec, &states, 3).unwrap();
    let net = Network::new(cfg.clone(), 1).unwrap();
    let mut learned = Learned::new(&net, SampleMode::Mean, 0);
    let a = predict_step(&mut learned, &window, &rec.actions[3], None).unwrap();
    let b = predict_step(
        &mut Learned::new(&net, SampleMode::Mean, 99),
        &window,
        &rec.actions[3],
        None,
    )
    .unwrap();
    assert_eq!(a, b);
    assert!(a.frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.state, states[4]);

    let p = predict_step(
        &mut PersistenceStub(cfg.clone()),
        &window,
        &rec.actions[3],
        None,
    )
    .unwrap();
    let oracle = predict_step(
        &mut OracleStub(cfg.clone()),
        &window,
        &rec.actions[3],
        Some(&rec.frames[4]),
    )
    .unwrap();
    assert_eq!(oracle.frame, rec.frames[4]);
    assert_eq!(p.frame.grid, cfg.grid);

    let mut other = cfg.clone();
    other.ablation.no_rbm = true;
    assert!(predict_step(&mut PersistenceStub(other), &window, &rec.actions[3], None).is_err());
}

#[test]
fn prior_and_posterior_paths_share_the_encoder() {
    let net = Network::new(base_cfg(), 0).unwrap();
    let prior = net.prior_path_params();
    let posterior = net.posterior_path_params();
    let shared = net.shared_encoder_params();
    assert!(!shared.is_empty());
    for i in &shared {
        assert!(
            prior.contains(i) && posterior.contains(i),
            "{}",
            net.params.names[*i]
        );
    }
    for i in net.prior_head_params() {
        assert!(!posterior.contains(&i));
    }
}

fn prior_head_grad_norm(net: &Network, inp: &NetInputs, choice: LatentChoice) -> f64 {
    let mut g: Graph<f64> = Graph::new();
    let p = net.params.leaves(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Noise::draw(net.cfg.latent_dim, &mut rng);
    let (_, [rec, _, _], _) = net.step_loss(&mut g, &p, inp, &noise, choice).unwrap();
    let grads = g.backward(rec).unwrap();
    net.prior_head_params()
        .iter()
        .map(|&i| {
            grads
                .wrt(p[i])
                .map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>())
        })
        .sum::<f64>()
        .sqrt()
}

#[test]
fn reconstruction_trains_the_prior_only_on_switched_steps() {
    let mut cfg = base_cfg();
    cfg.eta_percent = 100.0;
    let mut net = Network::new(cfg.clone(), 2).unwrap();
    // At initialization the output ignores the latent code; move off it.
    let mut jitter = ChaCha8Rng::seed_from_u64(5);
    for t in &mut net.params.tensors {
        t.data_mut().iter_mut().for_each(|v| *v += jitter.random_range(-0.1..0.1));
    }
    let inp = random_inputs(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(switch_source(cfg.eta_percent, &mut rng), CodeSource::Prior);
    assert!(prior_head_grad_norm(&net, &inp, LatentChoice::Prior) > 0.0);
    assert_eq!(
        prior_head_grad_norm(&net, &inp, LatentChoice::Posterior),
        0.0
    );
}

#[test]
fn disabled_motion_branch_equals_a_silenced_one() {
    let cfg = base_cfg();
    let mut full = Network::new(cfg.clone(), 8).unwrap();
    for i in full.motion_params() {
        full.params.tensors[i]
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let mut ablated_cfg = cfg.clone();
    ablated_cfg.ablation = Ablation {
        no_me: true,
        ..Ablation::default()
    };
    let mut ablated = Network::new(ablated_cfg, 8).unwrap();
    for (name, t) in ablated
        .params
        .names
        .iter()
        .zip(ablated.params.tensors.iter_mut())
    {
        let i = full.params.names.iter().position(|n| n == name).unwrap();
        *t = full.params.tensors[i].clone();
    }
    let inp = random_inputs(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
    let a = mean_output(&full, &inp);
    let b = mean_output(&ablated, &inp);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn eta_switch_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let prior = (0..n)
        .filter(|_| switch_source(10.0, &mut rng) == CodeSource::Prior)
        .count();
    let freq = prior as f64 / n as f64;
    assert!((freq - 0.10).abs() < 0.01, "{freq}");

    let p = GaussianCode::standard(2);
    let q = GaussianCode::new(vec![5.0, 5.0], vec![1e-30, 1e-30]).unwrap();
    for (eta, want) in [(0.0, CodeSource::Posterior), (100.0, CodeSource::Prior)] {
        for _ in 0..200 {
            assert_eq!(
                sample_latent(&p, Some(&q), SampleMode::Train, eta, &mut rng)
                    .unwrap()
                    .1,
                want
            );
        }
    }
    assert!(sample_latent(&p, None, SampleMode::Train, 10.0, &mut rng).is_err());
}

#[test]
fn reparameterized_draws_match_their_code() {
    let code = GaussianCode::new(vec![1.5, -0.5], vec![0.25, 4.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| code.sample(&mut rng)).collect();
    for d in 0..2 {
        let xs: Vec<f64> = draws.iter().map(|x| x[d]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let v = code.var[d];
        assert!(
            (mean - code.mean[d]).abs() < 3.0 * (v / n as f64).sqrt(),
            "mean {mean}"
        );
        assert!(
            (var - v).abs() < 3.0 * v * (2.0 / (n - 1) as f64).sqrt(),
            "var {var}"
        );
    }
    let tight = GaussianCode::new(vec![0.3], vec![1e-300]).unwrap();
    assert_eq!(tight.sample(&mut rng), vec![0.3]);
}

#[test]
fn snapshot_roundtrip_is_bit_exact() {
    let mut cfg = tiny_config(Mode::Urban, Variant::Dl);
    cfg.ablation.no_bcde = true;
    let net = Network::new(cfg, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    net.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    assert_eq!(back, net);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(back.to_container().to_bytes(), bytes);

    assert!(Container::from_bytes(&bytes[..bytes.len() - 3], &path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = Container::from_bytes(&bad, &path).unwrap_err().to_string();
    assert!(err.contains("model.bin"), "{err}");
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let opts = GradCheckOptions {
        max_coords_per_block: Some(6),
        ..GradCheckOptions::default()
    };
    for (mode, variant) in [(Mode::Highway, Variant::Base), (Mode::Urban, Variant::Dl)] {
        let report = check_model_gradients(&tiny_config(mode, variant), 21, &opts).unwrap();
        assert!(report.passed(), "{mode} {variant}\n{report}");
    }
}
