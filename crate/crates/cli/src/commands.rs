use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use taylorfold::checkpoint::{self, Checkpoint};
use taylorfold::corpus::{self, Corpus};
use taylorfold::gradcheck::{check_composed_model, GradCheckReport};
use taylorfold::metrics::{evaluate, MetricReport};
use taylorfold::nets::{DerivativeNet, MappingNet};
use taylorfold::train::{checkpoint_name, train, TrainOutputs, TrainRun};
use taylorfold::{ComposerConfig, ModelSpec, RecurrenceVariant};

use crate::config::{ConfigError, RunConfig};

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(i32)]
pub enum ExitCode {
    Ok = 0,
    Other = 1,
    Config = 2,
    Io = 3,
    NonFinite = 4,
    GradCheck = 5,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] taylorfold::Error),
    #[error("gradient check failed: max relative error {max:.3e} >= {tolerance:e}")]
    GradCheck { max: f64, tolerance: f64 },
    #[error("sweep failed for orders {0:?}")]
    Sweep(Vec<usize>),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use taylorfold::Error as E;
        match self {
            Self::Config(ConfigError::Io { .. }) => ExitCode::Io,
            Self::Config(_) => ExitCode::Config,
            Self::Core(E::Io { .. } | E::Format { .. } | E::Checkpoint(_)) => ExitCode::Io,
            Self::Core(E::NonFinite { .. }) => ExitCode::NonFinite,
            Self::Core(_) | Self::Sweep(_) => ExitCode::Other,
            Self::GradCheck { .. } => ExitCode::GradCheck,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const CONFIG_ECHO: &str = "config.echo";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-4;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(taylorfold::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| ConfigError::Invalid(format!("`{key}` is required")).into())
}

/// Creates `dir` and writes the effective configuration into it.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.echo()).map_err(|e| io_err(&path, e))
}

/// Writes `data.count` procedural pairs plus the manifest into `out`.
pub fn synthesize(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    echo_config(cfg, &cfg.out)?;
    let spec = cfg.degradation_spec();
    corpus::make_scene_corpus(&spec, cfg.count, cfg.height, cfg.width, &cfg.out)?;
    println!(
        "synthesized {} {} samples (seed {}) in {}",
        cfg.count,
        spec.kind,
        cfg.seed,
        cfg.out.display()
    );
    Ok(())
}

fn train_in(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> CliResult<TrainRun> {
    echo_config(cfg, dir)?;
    let tcfg = cfg.train_config();
    let mut run = match &cfg.resume {
        Some(path) => TrainRun::from_checkpoint(&Checkpoint::load(path)?)?,
        None => TrainRun::new(cfg.model, cfg.composer, &tcfg),
    };
    let out = TrainOutputs {
        dir: Some(dir.to_path_buf()),
    };
    train(&mut run, corpus, &tcfg, &out)?;
    Ok(run)
}

/// Trains on `train.corpus`; writes `loss.tsv` and checkpoints into `out`.
pub fn train_cmd(cfg: &RunConfig) -> CliResult<TrainRun> {
    cfg.validate()?;
    let corpus = corpus::load_corpus(required(&cfg.train_corpus, "train.corpus")?)?;
    let run = train_in(cfg, &corpus, &cfg.out)?;
    println!(
        "trained {} epochs ({} steps); checkpoint {}",
        run.state.epoch,
        run.state.step,
        cfg.out.join(checkpoint_name(run.state.epoch)).display()
    );
    Ok(run)
}

fn write_metrics(report: &MetricReport, dir: &Path) -> CliResult<()> {
    let path = dir.join(METRICS_FILE);
    fs::write(&path, report.to_tsv()).map_err(|e| io_err(&path, e))
}

/// Scores `eval.checkpoint` on `eval.corpus`; writes `metrics.tsv`.
pub fn eval_cmd(cfg: &RunConfig) -> CliResult<MetricReport> {
    let ck = Checkpoint::load(required(&cfg.eval_checkpoint, "eval.checkpoint")?)?;
    let corpus = corpus::load_corpus(required(&cfg.eval_corpus, "eval.corpus")?)?;
    echo_config(cfg, &cfg.out)?;
    let spec = checkpoint::model_spec(&ck)?;
    let composer = checkpoint::composer(&ck)?;
    let params = ck.params_for(&spec)?;
    let report = evaluate(&spec, &params, &composer, &corpus)?;
    write_metrics(&report, &cfg.out)?;
    println!(
        "{} images: mean PSNR {:.4} dB, mean SSIM {:.4}",
        report.count(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(report)
}

/// The fixed model used by `gradcheck`.
pub fn gradcheck_model() -> (ModelSpec, [usize; 4]) {
    let spec = ModelSpec {
        image_channels: 3,
        mapping: MappingNet {
            features: 4,
            blocks: 1,
        },
        derivative: Some(DerivativeNet { features: 4 }),
    };
    (spec, [1, 3, 8, 8])
}

/// Finite-difference check of the composed order-3 model under both
/// recurrence variants. Fails unless every relative error is below
/// [`GRADCHECK_TOLERANCE`].
pub fn gradcheck_cmd(cfg: &RunConfig) -> CliResult<Vec<(RecurrenceVariant, GradCheckReport)>> {
    echo_config(cfg, &cfg.out)?;
    let (spec, shape) = gradcheck_model();
    let mut reports = Vec::new();
    for variant in [RecurrenceVariant::WithKResidual, RecurrenceVariant::ConcatOnly] {
        let composer = ComposerConfig {
            order: 3,
            variant,
            ..cfg.composer
        };
        let r = check_composed_model(&spec, &composer, shape, cfg.seed, GRADCHECK_STEP)?;
        println!(
            "{}\tchecked {}\tmax relative error {:.3e}",
            checkpoint::variant_name(variant),
            r.checked,
            r.max_rel_error
        );
        reports.push((variant, r));
    }
    let max = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    if max.is_nan() || max >= GRADCHECK_TOLERANCE {
        return Err(CliError::GradCheck {
            max,
            tolerance: GRADCHECK_TOLERANCE,
        });
    }
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub order: usize,
    pub result: Result<(f64, f64), String>,
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("order\tpsnr\tssim\tstatus\n");
    for r in rows {
        match &r.result {
            Ok((p, q)) => s.push_str(&format!("{}\t{p}\t{q}\tok\n", r.order)),
            Err(e) => s.push_str(&format!("{}\t-\t-\tfailed: {}\n", r.order, e.replace(['\t', '\n'], " "))),
        }
    }
    s
}

fn sweep_one(cfg: &RunConfig, order: usize, train_set: &Corpus, test_set: &Corpus) -> CliResult<(f64, f64)> {
    let dir = cfg.out.join(format!("order_{order}"));
    let mut sub = cfg.clone();
    sub.composer.order = order;
    sub.out = dir.clone();
    sub.validate()?;
    let run = train_in(&sub, train_set, &dir)?;
    let report = evaluate(&run.model, &run.params, &run.composer, test_set)?;
    write_metrics(&report, &dir)?;
    Ok((report.mean_psnr, report.mean_ssim))
}

/// Trains and evaluates one model per order in `sweep.orders`, each in
/// `out/order_<k>`, using up to `sweep.jobs` threads. A failing order is
/// recorded in `sweep.tsv` and does not stop the others.
pub fn sweep_cmd(cfg: &RunConfig) -> CliResult<Vec<SweepRow>> {
    let mut base = cfg.clone();
    base.composer.order = 0;
    base.validate()?;
    let train_set = corpus::load_corpus(required(&cfg.train_corpus, "train.corpus")?)?;
    let test_set = corpus::load_corpus(required(&cfg.eval_corpus, "eval.corpus")?)?;
    echo_config(cfg, &cfg.out)?;

    let orders = &cfg.sweep_orders;
    let next = AtomicUsize::new(0);
    let results = Mutex::new(vec![None; orders.len()]);
    let jobs = cfg.sweep_jobs.min(orders.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&order) = orders.get(i) else { break };
                let r = sweep_one(cfg, order, &train_set, &test_set).map_err(|e| e.to_string());
                match &r {
                    Ok((p, q)) => println!("order {order}: PSNR {p:.4} dB, SSIM {q:.4}"),
                    Err(e) => eprintln!("order {order}: failed: {e}"),
                }
                results.lock().unwrap()[i] = Some(SweepRow { order, result: r });
            });
        }
    });
    let rows: Vec<SweepRow> = results.into_inner().unwrap().into_iter().flatten().collect();
    let path = cfg.out.join(SWEEP_FILE);
    fs::write(&path, sweep_tsv(&rows)).map_err(|e| io_err(&path, e))?;
    let failed: Vec<usize> = rows.iter().filter(|r| r.result.is_err()).map(|r| r.order).collect();
    if !failed.is_empty() {
        return Err(CliError::Sweep(failed));
    }
    Ok(rows)
}
