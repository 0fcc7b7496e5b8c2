//! Command-line front end: generate synthetic sequences, train, evaluate,
//! and run the invariant checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anticipation::config::{parse_list, RunConfig};
use anticipation::gridops::{roundtrip_check, Interp, Ogm};
use anticipation::metrics::{evaluate, kde_fit, kde_references, EvalReport, KdeModel};
use anticipation::pipeline::{epoch_csv, record_states, rollout, steps_csv, window_at, Trainer};
use anticipation::predictor::{
    check_model_gradients, tiny_config, Container, EnvModel, Learned, Network, OracleStub,
    PersistenceStub, PredictorConfig, SampleMode, Variant,
};
use anticipation::record::{
    check_record, decode_pgm, encode_pgm, read_record, write_record, Manifest, SequenceRecord,
    MANIFEST,
};
use anticipation::worldsim::{generate, rare_suite, ActionStats, Mode, RarePolicy, ViewSpec};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use diffcalc::GradCheckOptions;

#[derive(Parser)]
#[command(
    name = "anticipation",
    version,
    about = "Occupancy grid prediction with ego anticipation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train a predictor on generated sequences.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a model or a stub at several horizons.
    Eval {
        #[arg(long, conflicts_with = "stub", required_unless_present = "stub")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        stub: Option<Stub>,
        /// Recorded sequences: the regular suite, and the action statistics
        /// of the tail-sample rare policy.
        #[arg(long)]
        data: PathBuf,
        /// Model settings for stubs; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "1,5,10,20")]
        horizons: String,
        #[arg(long, value_enum, default_value_t = Suite::Regular)]
        suite: Suite,
        /// Training sequences for the log-likelihood density estimate.
        #[arg(long)]
        kde_data: Option<PathBuf>,
        /// Sequences per rare policy.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// First seed of the rare-policy sequences.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes predicted and true frames side by side for the first sequence.
        #[arg(long)]
        dump_frames: Option<PathBuf>,
        /// Directory for the CSV reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run invariant checks; exits 0 only if every selected check passes.
    Check {
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long)]
        gradcheck: bool,
        #[arg(long)]
        roundtrip: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    Persistence,
    Oracle,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Suite {
    Regular,
    Rare,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use anticipation::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_) | E::Invalid(_)) => 2,
        Some(E::Numeric(_)) => 3,
        Some(E::Data { .. } | E::Io { .. } | E::Shape { .. } | E::Graph(_)) => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            count,
        } => cmd_gen(config.as_deref(), &out, seed, count),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(&config, &data, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            stub,
            data,
            config,
            horizons,
            suite,
            kde_data,
            count,
            seed,
            dump_frames,
            out,
        } => cmd_eval(EvalArgs {
            checkpoint,
            stub,
            data,
            config,
            horizons,
            suite,
            kde_data,
            count,
            seed,
            dump_frames,
            out,
        }),
        Command::Check {
            record,
            gradcheck,
            roundtrip,
        } => cmd_check(record.as_deref(), gradcheck, roundtrip),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::defaults(Mode::Highway),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: u64, count: usize) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out).map_err(|e| anticipation::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    for i in 0..count as u64 {
        let s = seed + i;
        let rec = generate(&cfg.scenario(s))?;
        let name = format!("seq_{s:05}");
        write_record(&rec, &out.join(&name))?;
        println!("{name} collisions={}", rec.collisions);
    }
    Ok(ExitCode::SUCCESS)
}

/// Every record under `dir` (or `dir` itself when it is a record), sorted
/// by directory name.
fn load_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    if dir.join(MANIFEST).is_file() {
        return Ok(vec![read_record(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| anticipation::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(anticipation::Error::Data {
            path: dir.to_path_buf(),
            reason: "no sequence records found".into(),
        }
        .into());
    }
    let records = dirs
        .iter()
        .map(|d| read_record(d))
        .collect::<anticipation::Result<Vec<_>>>()?;
    if let Some(r) = records.iter().find(|r| r.grid != records[0].grid) {
        return Err(anticipation::Error::Shape {
            op: "dataset",
            left: format!("{:?}", records[0].grid.shape()),
            right: format!("{:?}", r.grid.shape()),
        }
        .into());
    }
    Ok(records)
}

/// The model configuration for a dataset: settings from `cfg`, grid from
/// the data, which must agree with the configured grid size.
fn model_config(cfg: &RunConfig, data: &[SequenceRecord]) -> Result<PredictorConfig> {
    let grid = data[0].grid.clone();
    if grid.h != cfg.grid_size || grid.w != cfg.grid_size {
        return Err(anticipation::Error::Shape {
            op: "configuration vs data",
            left: format!("configured grid {}×{}", cfg.grid_size, cfg.grid_size),
            right: format!("data grid {}×{}", grid.h, grid.w),
        }
        .into());
    }
    let p = cfg.predictor(grid);
    p.validate()?;
    Ok(p)
}

fn cmd_train(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = load_config(Some(config))?;
    print!("{}", cfg.to_text());
    let data = load_dataset(data_dir)?;
    let pcfg = model_config(&cfg, &data)?;
    let mut trainer = match resume {
        None => Trainer::new(pcfg, cfg.train.clone())?,
        Some(path) => {
            let mut t = Trainer::from_container(&Container::read(path)?, path)?;
            let same = t.net.cfg == pcfg
                && t.train.seed == cfg.train.seed
                && t.train.batch_size == cfg.train.batch_size
                && t.train.horizon == cfg.train.horizon
                && t.train.learning_rate == cfg.train.learning_rate;
            if !same {
                bail!(anticipation::Error::Config(format!(
                    "{} was trained with different settings than {}",
                    path.display(),
                    config.display()
                )));
            }
            t.train.epochs = cfg.train.epochs;
            t.train.max_steps = cfg.train.max_steps;
            t
        }
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let save = |t: &Trainer| -> anticipation::Result<()> {
        t.to_container().write(&out.join("checkpoint.bin"))?;
        let io = |p: PathBuf, s: String| {
            fs::write(&p, s).map_err(|e| anticipation::Error::Io { path: p, source: e })
        };
        io(out.join("loss_steps.csv"), steps_csv(&t.curve))?;
        io(out.join("loss_epochs.csv"), epoch_csv(&t.curve))
    };
    let result = trainer.run(&data, |t| {
        if let Some(r) = t.curve.last() {
            eprintln!(
                "epoch {} step {} total {:.6} rec {:.6}",
                r.epoch, t.step, r.total, r.rec
            );
        }
        save(t)
    });
    // Also reached on failure: the parameters are the last good ones.
    save(&trainer)?;
    trainer.net.save(&out.join("model.bin"))?;
    result?;
    Ok(ExitCode::SUCCESS)
}

struct EvalArgs {
    checkpoint: Option<PathBuf>,
    stub: Option<Stub>,
    data: PathBuf,
    config: Option<PathBuf>,
    horizons: String,
    suite: Suite,
    kde_data: Option<PathBuf>,
    count: usize,
    seed: u64,
    dump_frames: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let horizons: Vec<usize> = parse_list(&args.horizons, "horizon")?;
    if horizons.is_empty() || horizons.contains(&0) {
        bail!(anticipation::Error::Config(
            "horizons must be positive".into()
        ));
    }
    let data = load_dataset(&args.data)?;
    let net;
    let mut model: Box<dyn EnvModel + '_> = match (&args.checkpoint, args.stub) {
        (Some(path), _) => {
            net = Network::load(path)?;
            if net.cfg.grid != data[0].grid {
                return Err(anticipation::Error::Shape {
                    op: "checkpoint vs data",
                    left: format!("model grid {:?}", net.cfg.grid.shape()),
                    right: format!("data grid {:?}", data[0].grid.shape()),
                }
                .into());
            }
            Box::new(Learned::new(&net, SampleMode::Mean, args.seed))
        }
        (None, Some(stub)) => {
            let pcfg = match &args.config {
                Some(p) => model_config(&load_config(Some(p))?, &data)?,
                None => PredictorConfig::new(data[0].grid.clone()),
            };
            match stub {
                Stub::Persistence => Box::new(PersistenceStub(pcfg)),
                Stub::Oracle => Box::new(OracleStub(pcfg)),
            }
        }
        (None, None) => bail!(anticipation::Error::Config(
            "give --checkpoint or --stub".into()
        )),
    };
    let kde: Option<KdeModel> = match &args.kde_data {
        Some(dir) => {
            let refs = load_dataset(dir)?;
            let n = args
                .config
                .as_deref()
                .map_or(Ok(2000), |p| load_config(Some(p)).map(|c| c.kde_references))?;
            Some(kde_fit(kde_references(&refs, n), 0.1)?)
        }
        None => None,
    };
    let suites: Vec<(String, Vec<SequenceRecord>)> = match args.suite {
        Suite::Regular => vec![("regular".to_string(), data)],
        Suite::Rare => rare_suites(model.config(), &data, &horizons, args.count, args.seed)?,
    };
    println!(
        "horizons: {}",
        horizons
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    for (name, records) in &suites {
        let report = evaluate(model.as_mut(), records, &horizons, kde.as_ref())?;
        println!("suite: {name} ({} sequences)", records.len());
        print!("{}", report.to_table());
        if let Some(dir) = &args.out {
            write_report(dir, name, &report)?;
        }
        if let Some(dir) = &args.dump_frames {
            dump_frames(model.as_mut(), &records[0], &horizons, &dir.join(name))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_report(dir: &Path, suite: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("report_{suite}.csv")), report.to_csv())?;
    Ok(())
}

/// One suite per rare policy, matching the data's rendering.
fn rare_suites(
    cfg: &PredictorConfig,
    data: &[SequenceRecord],
    horizons: &[usize],
    count: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<SequenceRecord>)>> {
    let grid = &data[0].grid;
    let mode = Mode::of_grid(grid)?;
    let mut view = ViewSpec::default_for(mode, grid.h);
    view.meters_per_pixel = grid.meters_per_pixel;
    let mut base = anticipation::worldsim::ScenarioSpec::new(mode, seed);
    base.view = view;
    base.dt = data[0].dt;
    base.length = cfg.input_frames + horizons.iter().max().copied().unwrap_or(1);
    let stats = ActionStats::from_actions(data.iter().flat_map(|r| r.actions.iter()))?;
    let mut out = Vec::new();
    for name in ["hard-brake", "hard-steer", "tail-sample"] {
        let policy = RarePolicy::parse(name, Some(stats))?;
        let records = rare_suite(
            &base,
            &policy,
            cfg.input_frames - 1,
            seed..seed + count as u64,
        )?;
        out.push((name.to_string(), records));
    }
    Ok(out)
}

/// Prediction and truth side by side, two pixels apart, per horizon and
/// channel.
fn dump_frames(
    model: &mut dyn EnvModel,
    rec: &SequenceRecord,
    horizons: &[usize],
    dir: &Path,
) -> Result<()> {
    let cfg = model.config().clone();
    let t = cfg.input_frames;
    let far = horizons.iter().copied().max().unwrap_or(1);
    let states = record_states(rec)?;
    let window = window_at(&cfg, rec, &states, t - 1)?;
    let truths = &rec.frames[t..t + far];
    let steps = rollout(
        model,
        window,
        &rec.actions[t - 1..t - 1 + far],
        Some(truths),
    )?;
    fs::create_dir_all(dir)?;
    let (h, w) = (cfg.grid.h, cfg.grid.w);
    for &k in horizons {
        let (pred, truth): (&Ogm, &Ogm) = (&steps[k - 1].frame, &truths[k - 1]);
        for c in 0..cfg.grid.c() {
            let mut plane = vec![0.5f32; h * (2 * w + 2)];
            for r in 0..h {
                let row = &mut plane[r * (2 * w + 2)..(r + 1) * (2 * w + 2)];
                row[..w].copy_from_slice(&pred.channel(c)[r * w..(r + 1) * w]);
                row[w + 2..].copy_from_slice(&truth.channel(c)[r * w..(r + 1) * w]);
            }
            fs::write(
                dir.join(format!("k{k:02}_c{c}.pgm")),
                encode_pgm(&plane, h, 2 * w + 2),
            )?;
        }
    }
    Ok(())
}

fn cmd_check(record: Option<&Path>, gradcheck: bool, roundtrip: bool) -> Result<ExitCode> {
    if record.is_none() && !gradcheck && !roundtrip {
        bail!(anticipation::Error::Config(
            "select at least one of --record, --gradcheck, --roundtrip".into()
        ));
    }
    let mut failures: Vec<String> = Vec::new();
    if let Some(dir) = record {
        let found = check_record(dir);
        println!(
            "record {}: {}",
            dir.display(),
            if found.is_empty() { "ok" } else { "FAILED" }
        );
        failures.extend(found.into_iter().map(|f| format!("record: {f}")));
    }
    if gradcheck {
        let opts = GradCheckOptions {
            max_coords_per_block: Some(12),
            ..GradCheckOptions::default()
        };
        for (mode, variant) in [(Mode::Highway, Variant::Base), (Mode::Urban, Variant::Dl)] {
            let report = check_model_gradients(&tiny_config(mode, variant), 0, &opts)?;
            println!(
                "gradcheck {mode} {variant}: max relative error {:.3e}",
                report.max_rel_err()
            );
            if !report.passed() {
                failures.push(format!(
                    "gradcheck {mode} {variant}: {}",
                    report.to_string().trim()
                ));
            }
        }
    }
    if roundtrip {
        failures.extend(roundtrip_failures()?);
    }
    for f in &failures {
        println!("FAIL {f}");
    }
    Ok(if failures.is_empty() {
        println!("all checks passed");
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn roundtrip_failures() -> Result<Vec<String>> {
    let mut failures = Vec::new();
    let report = roundtrip_check(1000, 0, Interp::Bilinear)?;
    println!(
        "warp roundtrip: mean interior error {:.5}, max {:.5} over {} frames",
        report.mean(),
        report.max(),
        report.errors.len()
    );
    if report.mean() >= 0.02 {
        failures.push(format!(
            "warp roundtrip: mean interior error {:.5} >= 0.02",
            report.mean()
        ));
    }
    let levels: Vec<f32> = (0..=255u8).map(|v| f32::from(v) / 255.0).collect();
    let bytes = encode_pgm(&levels, 16, 16);
    let (_, _, back) = decode_pgm(&bytes, Path::new("<memory>"))?;
    if back != (0..=255u8).collect::<Vec<_>>() {
        failures.push("pgm roundtrip: levels changed".into());
    }
    for mode in [Mode::Highway, Mode::Urban] {
        let manifest = Manifest {
            grid: ViewSpec::default_for(mode, 64).grid(mode),
            dt: 0.1,
            length: 40,
        };
        let text = manifest.to_text();
        let again = Manifest::parse(&text, Path::new("<memory>"))?.to_text();
        if text != again {
            failures.push(format!("manifest roundtrip ({mode}): text changed"));
        }
    }
    println!("pgm and manifest roundtrips checked");
    Ok(failures)
}
