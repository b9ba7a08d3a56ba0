//! End-to-end training: random patch batches, the composed loss, Adam with a
//! step-decay schedule, TSV loss logs and resumable checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::composer::{compose_model, framework_loss, ComposerConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nets::{init_params, ModelSpec, ParamSet};
use crate::rng::{SplitMix64, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch: usize,
    pub batch: usize,
    pub lr0: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Write `ckpt_epoch%04d.bin` every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Parameters whose path starts with any of these are not updated.
    pub frozen: Vec<String>,
    /// Multiplier applied to the initial weights of the output projections
    /// (`F.conv_out`, `G.conv2`). `0` starts F at the identity and G at zero.
    pub output_init_scale: f64,
}

impl Default for TrainConfig {
    /// 100x100 patches, batch 4, lr 1e-3 decayed by 0.2 at epochs 30, 50
    /// and 80, 100 epochs.
    fn default() -> Self {
        Self {
            patch: 100,
            batch: 4,
            lr0: 1e-3,
            decay_epochs: vec![30, 50, 80],
            decay_factor: 0.2,
            epochs: 100,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            frozen: Vec::new(),
            output_init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// Desk scale: 32x32 patches, 20 epochs with decays at the same
    /// fractions (0.3, 0.5, 0.8) of the run, output projections zeroed.
    pub fn desk() -> Self {
        Self {
            patch: 32,
            epochs: 20,
            decay_epochs: vec![6, 10, 16],
            output_init_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.batch == 0 {
            return Err(Error::Invalid("patch and batch sizes must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::Invalid("learning rate and decay factor must be positive".into()));
        }
        if !(self.output_init_scale.is_finite() && self.output_init_scale >= 0.0) {
            return Err(Error::Invalid("output init scale must be finite and non-negative".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("decay epochs must be strictly increasing".into()));
        }
        let a = &self.adam;
        if !(a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Invalid("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// `lr0 * factor^d`, where `d` counts decay epochs `<= epoch`. When the
/// factor is the reciprocal of an integer `m`, this is evaluated as
/// `lr0 / m^d` so decimal schedules come out exact.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let d = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
    let inv = 1.0 / cfg.decay_factor;
    if inv.fract() == 0.0 && inv * cfg.decay_factor == 1.0 {
        cfg.lr0 / inv.powi(d)
    } else {
        cfg.lr0 * cfg.decay_factor.powi(d)
    }
}

/// Optimizer moments, counters and the batch sampler's generator.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// First moments, keyed like the parameters.
    pub m: ParamSet,
    /// Second moments.
    pub v: ParamSet,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub rng: SplitMix64,
}

impl TrainState {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let zeros = || {
            let mut z = ParamSet::new();
            for (n, t) in params.iter() {
                z.insert(n, Tensor::zeros(t.shape().to_vec()));
            }
            z
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            epoch: 0,
            lr: lr_at(0, cfg),
            rng: SplitMix64::for_stream(cfg.seed, Stream::Batches),
        }
    }
}

/// One bias-corrected Adam update of every non-frozen parameter.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut TrainState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = cfg.adam;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if cfg.is_frozen(name) {
            continue;
        }
        let grad = p
            .grad()
            .ok_or_else(|| Error::MissingGrad(name.to_owned()))?
            .to_vec();
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no first moment for `{name}`")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no second moment for `{name}`")))?;
        for (((w, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.lr = lr;
    Ok(())
}

/// Crops `batch` co-located `patch x patch` windows from randomly chosen
/// pairs. Returns `(degraded, clean)` as `[batch, c, patch, patch]`.
pub fn sample_patch_batch(
    corpus: &Corpus,
    patch: usize,
    batch: usize,
    rng: &mut SplitMix64,
) -> Result<(Tensor, Tensor)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot sample from an empty corpus".into()));
    }
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    let mut channels = 0;
    for _ in 0..batch {
        let item = &corpus.items[rng.below(corpus.len() as u64) as usize];
        let [_, c, h, w] = item.degraded.dims4("sample_patch_batch")?;
        if h < patch || w < patch {
            return Err(Error::Invalid(format!(
                "{}: image {w}x{h} is smaller than the {patch}x{patch} patch",
                corpus.root.join(&item.file).display()
            )));
        }
        channels = c;
        let top = rng.below((h - patch + 1) as u64) as usize;
        let left = rng.below((w - patch + 1) as u64) as usize;
        for (src, dst) in [(&item.degraded, &mut ys), (&item.clean, &mut xs)] {
            let d = src.data();
            for ch in 0..c {
                for row in top..top + patch {
                    let start = (ch * h + row) * w + left;
                    dst.extend_from_slice(&d[start..start + patch]);
                }
            }
        }
    }
    let shape = [batch, channels, patch, patch];
    Ok((Tensor::new(shape, ys)?, Tensor::new(shape, xs)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_output: f64,
    pub loss_mapping: f64,
}

pub const LOSS_HEADER: &str = "epoch\tstep\tlr\tloss\tloss_O\tloss_f\n";

pub fn loss_rows_tsv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_HEADER);
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.step, r.lr, r.loss, r.loss_output, r.loss_mapping
        );
    }
    s
}

const OUTPUT_PROJECTIONS: [&str; 2] = ["F.conv_out.weight", "G.conv2.weight"];

/// Everything a training run produces or resumes from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub model: ModelSpec,
    pub composer: ComposerConfig,
    pub params: ParamSet,
    pub state: TrainState,
}

impl TrainRun {
    pub fn new(model: ModelSpec, composer: ComposerConfig, cfg: &TrainConfig) -> Self {
        let mut params = init_params(&model, cfg.seed);
        if cfg.output_init_scale != 1.0 {
            for (name, t) in params.iter_mut() {
                if OUTPUT_PROJECTIONS.contains(&name) {
                    t.data_mut().iter_mut().for_each(|v| *v *= cfg.output_init_scale);
                }
            }
        }
        let state = TrainState::new(&params, cfg);
        Self {
            model,
            composer,
            params,
            state,
        }
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::default();
        checkpoint::put_model_spec(&mut ck, &self.model);
        checkpoint::put_composer(&mut ck, &self.composer);
        ck.set_meta("train.seed", seed);
        ck.set_meta("state.step", self.state.step);
        ck.set_meta("state.epoch", self.state.epoch);
        ck.set_meta("state.lr", self.state.lr);
        ck.set_meta("state.rng", self.state.rng.state());
        ck.put_params(&self.params);
        for (n, t) in self.state.m.iter() {
            ck.tensors.insert(format!("adam.m/{n}"), t.clone());
        }
        for (n, t) in self.state.v.iter() {
            ck.tensors.insert(format!("adam.v/{n}"), t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = checkpoint::model_spec(ck)?;
        let composer = checkpoint::composer(ck)?;
        let params = ck.params_for(&model)?;
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (n, t) in params.iter() {
            for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let key = format!("{prefix}{n}");
                let moment = ck
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{key}` missing")))?;
                if moment.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("tensor `{key}` has the wrong shape")));
                }
                dst.insert(n, moment.clone());
            }
        }
        let state = TrainState {
            m,
            v,
            step: ck.meta_parse("state.step")?,
            epoch: ck.meta_parse("state.epoch")?,
            lr: ck.meta_parse("state.lr")?,
            rng: SplitMix64::new(ck.meta_parse("state.rng")?),
        };
        Ok(Self {
            model,
            composer,
            params,
            state,
        })
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.bin")
}

/// Optional on-disk outputs of [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

/// Runs epochs `run.state.epoch .. cfg.epochs`. One epoch is
/// `ceil(len / batch)` random batches. A non-finite loss aborts the run.
///
/// With an output directory, appends rows to `loss.tsv` and writes
/// `ckpt_epoch%04d.bin` every `checkpoint_every` epochs and after the last.
pub fn train(
    run: &mut TrainRun,
    corpus: &Corpus,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    run.composer.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch);
    let mut log = Vec::new();
    let log_path = out.dir.as_ref().map(|d| d.join("loss.tsv"));
    if let (Some(dir), Some(path)) = (&out.dir, &log_path) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if run.state.step == 0 || !path.exists() {
            fs::write(path, LOSS_HEADER).map_err(|e| Error::io(path, e))?;
        }
    }

    while run.state.epoch < cfg.epochs {
        let epoch = run.state.epoch;
        let lr = lr_at(epoch, cfg);
        let first_row = log.len();
        for _ in 0..steps_per_epoch {
            let (y, x) = sample_patch_batch(corpus, cfg.patch, cfg.batch, &mut run.state.rng)?;
            run.params.zero_grads();
            debug_assert!(run
                .params
                .iter()
                .all(|(_, t)| t.grad().is_some_and(|g| g.iter().all(|&v| v == 0.0))));

            let mut g = Graph::new();
            let vars = run.params.bind(&mut g);
            let yv = g.constant(y);
            let xv = g.constant(x);
            let trace = compose_model(&mut g, &run.model, &vars, yv, &run.composer)?;
            let loss = framework_loss(&mut g, &trace, xv, &run.composer)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: run.state.step,
                    lr,
                    loss: value,
                });
            }
            g.backward(loss.total)?;
            run.params.absorb_grads(&g, &vars);
            adam_step(&mut run.params, &mut run.state, lr, cfg)?;
            log.push(LossRow {
                epoch,
                step: run.state.step,
                lr,
                loss: value,
                loss_output: g.value(loss.output).item(),
                loss_mapping: g.value(loss.mapping).item(),
            });
        }
        run.state.epoch += 1;

        if let (Some(dir), Some(path)) = (&out.dir, &log_path) {
            let mut body = loss_rows_tsv(&log[first_row..]);
            body.replace_range(..LOSS_HEADER.len(), "");
            append(path, &body)?;
            let done = run.state.epoch;
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == cfg.epochs {
                run.to_checkpoint(cfg.seed).save(dir.join(checkpoint_name(done)))?;
            }
        }
    }
    Ok(log)
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
