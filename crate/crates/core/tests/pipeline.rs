use anticipation::metrics::{evaluate, kde_fit, kde_references};
use anticipation::pipeline::{
    ablate, ablation_cells, epoch_csv, record_states, rollout, window_at, Adam, TrainConfig,
    Trainer,
};
use anticipation::predictor::{Network, OracleStub, PersistenceStub, PredictorConfig};
use anticipation::record::SequenceRecord;
use anticipation::worldsim::{generate, Mode, ScenarioSpec, ViewSpec};
use anticipation::Error;
use diffcalc::Tensor;

fn small_data(mode: Mode, seeds: std::ops::Range<u64>) -> (PredictorConfig, Vec<SequenceRecord>) {
    let view = ViewSpec::default_for(mode, 16);
    let data = seeds
        .map(|s| {
            let mut spec = ScenarioSpec::new(mode, s);
            spec.view = view.clone();
            spec.length = 12;
            generate(&spec).unwrap()
        })
        .collect();
    let mut cfg = PredictorConfig::new(view.grid(mode));
    cfg.input_frames = 3;
    cfg.width = 4;
    cfg.hidden = 16;
    cfg.latent_dim = 8;
    (cfg, data)
}

fn quick_train(max_steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 2,
        horizon: 2,
        seed: 5,
        max_steps: Some(max_steps),
        ..TrainConfig::default()
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut p = vec![Tensor::from_vec(vec![3.0f32, -2.0])];
    let mut adam = Adam::new(0.1, &p);
    for _ in 0..500 {
        let g = vec![p[0].map(|v| 2.0 * v)];
        adam.update(&mut p, &g);
    }
    assert!(
        p[0].data().iter().all(|v| v.abs() < 1e-2),
        "{:?}",
        p[0].data()
    );
}

#[test]
fn training_is_reproducible_and_resumable() {
    let (cfg, data) = small_data(Mode::Highway, 0..4);
    let mut a = Trainer::new(cfg.clone(), quick_train(6)).unwrap();
    a.run(&data, |_| Ok(())).unwrap();
    assert_eq!(a.curve.len(), 6);
    assert!(a.curve.iter().all(|r| r.total.is_finite()));

    let mut b = Trainer::new(cfg.clone(), quick_train(6)).unwrap();
    b.run(&data, |_| Ok(())).unwrap();
    assert_eq!(a, b);

    // Stop after three steps, store, reload, finish.
    let mut c = Trainer::new(cfg, quick_train(3)).unwrap();
    c.run(&data, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    c.to_container().write(&path).unwrap();
    let container = anticipation::predictor::Container::read(&path).unwrap();
    let mut d = Trainer::from_container(&container, &path).unwrap();
    assert_eq!(d, c);
    d.train.max_steps = Some(6);
    d.run(&data, |_| Ok(())).unwrap();
    assert_eq!(d.curve, a.curve);
    assert_eq!(d.net, a.net);
}

#[test]
fn epoch_callbacks_and_summaries() {
    let (cfg, data) = small_data(Mode::Urban, 0..3);
    let train = TrainConfig {
        epochs: 2,
        batch_size: 2,
        horizon: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, train).unwrap();
    let mut seen = Vec::new();
    t.run(&data, |tr| {
        seen.push(tr.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![2, 4]);
    let csv = epoch_csv(&t.curve);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,rec,ssim,kl,total"));
}

#[test]
fn non_finite_loss_aborts_without_touching_parameters() {
    let (cfg, data) = small_data(Mode::Highway, 0..2);
    let mut t = Trainer::new(cfg, quick_train(3)).unwrap();
    t.net.params.tensors[0].data_mut()[0] = f32::NAN;
    let before = t.net.clone();
    let err = t.run(&data, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(t.step, 0);
    assert_eq!(format!("{:?}", t.net), format!("{before:?}"));
}

#[test]
fn short_sequences_are_rejected() {
    let (cfg, data) = small_data(Mode::Highway, 0..2);
    let mut train = quick_train(1);
    train.horizon = 10;
    let err = Trainer::new(cfg, train)
        .unwrap()
        .run(&data, |_| Ok(()))
        .unwrap_err();
    assert!(err.to_string().contains("at least"), "{err}");
}

#[test]
fn rollouts_chain_predictions() {
    let (cfg, data) = small_data(Mode::Urban, 0..1);
    let rec = &data[0];
    let states = record_states(rec).unwrap();
    let w = window_at(&cfg, rec, &states, 2).unwrap();
    let truths = &rec.frames[3..8];
    let steps = rollout(
        &mut OracleStub(cfg.clone()),
        w.clone(),
        &rec.actions[2..7],
        Some(truths),
    )
    .unwrap();
    assert_eq!(steps.len(), 5);
    for (s, t) in steps.iter().zip(truths) {
        assert_eq!(&s.frame, t);
    }
    assert_eq!(steps[4].state, states[7]);
    assert!(rollout(&mut PersistenceStub(cfg), w, &[], None).is_err());
}

#[test]
fn stubs_score_as_expected() {
    let (mut cfg, data) = small_data(Mode::Urban, 10..14);
    cfg.interp = anticipation::gridops::Interp::Nearest;
    let kde = kde_fit(kde_references(&data, 50), 0.1).unwrap();
    let r = evaluate(&mut OracleStub(cfg.clone()), &data, &[1, 5], Some(&kde)).unwrap();
    for row in &r.rows {
        assert_eq!(row.mse.mean, 0.0);
        assert_eq!(row.tp.unwrap().mean, 100.0);
        assert_eq!(row.tn.unwrap().mean, 100.0);
        assert!(row.all.unwrap().mean.is_finite());
    }
    let p1 = evaluate(&mut PersistenceStub(cfg.clone()), &data, &[1, 5], None).unwrap();
    let p2 = evaluate(&mut PersistenceStub(cfg), &data, &[1, 5], None).unwrap();
    assert_eq!(p1, p2);
    assert!(p1
        .rows
        .iter()
        .all(|r| r.mse.mean.is_finite() && r.all.is_none()));
    assert!(p1
        .to_csv()
        .starts_with("horizon,metric,mean,spread\n1,mse,"));
    assert!(p1.to_table().contains("k = 5"));
}

#[test]
fn ablation_needs_every_configuration() {
    let (cfg, data) = small_data(Mode::Highway, 0..2);
    let nets: Vec<Network> = ablation_cells()
        .iter()
        .map(|a| {
            let mut c = cfg.clone();
            c.ablation = *a;
            Network::new(c, 0).unwrap()
        })
        .collect();
    let refs: Vec<&Network> = nets.iter().collect();
    let err = ablate(&refs[..3], &[("regular", &data)], &[1], None).unwrap_err();
    assert!(err.to_string().contains("no_me"), "{err}");
    let cells = ablate(&refs, &[("regular", &data), ("rare", &data)], &[1, 2], None).unwrap();
    assert_eq!(cells.len(), 8);
    assert_eq!(cells[5].config, "no_rbm");
    assert_eq!(cells[5].suite, "rare");
}
