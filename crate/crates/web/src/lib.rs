//! Browser demo. Three operations are exported to JavaScript:
//!
//! - [`Demo::new`] renders a procedural scene and degrades it with rain or blur,
//! - [`blur_kernel_rgba`] draws a blur kernel,
//! - [`Demo::train`] runs a few Adam steps of a small Taylor-composed model on
//!   the degraded image and [`Demo::term_rgba`] shows `f_out` and each `g^k / k!`.
//!
//! Images cross the boundary as RGBA bytes, row-major, ready for `ImageData`.

use taylorfold::composer::{compose_model, factorial_weights};
use taylorfold::corpus::Corpus;
use taylorfold::degrade::{
    make_blur_kernel, synthesize, BlurKernelKind, BlurParams, DegradationKind, DegradationSample, DegradationSpec,
};
use taylorfold::metrics::psnr;
use taylorfold::nets::{DerivativeNet, MappingNet};
use taylorfold::scene::render_scene;
use taylorfold::train::{train, TrainConfig, TrainOutputs, TrainRun};
use taylorfold::{ComposerConfig, Graph, ModelSpec, RecurrenceVariant, Result, Tensor};
use wasm_bindgen::prelude::*;

pub const MAX_SIZE: usize = 96;

fn js(e: taylorfold::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[1, 3, h, w]` in `[0, 1]` to RGBA bytes. `signed` maps `0` to mid grey and
/// scales by `gain`.
pub fn to_rgba(t: &Tensor, signed: bool, gain: f64) -> Vec<u8> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            let v = t.data()[c * plane + i];
            let v = if signed { 0.5 + gain * v } else { gain * v };
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn demo_model() -> ModelSpec {
    ModelSpec {
        image_channels: 3,
        mapping: MappingNet {
            features: 8,
            blocks: 1,
        },
        derivative: Some(DerivativeNet { features: 8 }),
    }
}

pub fn parse_variant(s: &str) -> Result<RecurrenceVariant> {
    taylorfold::checkpoint::parse_variant(s)
        .ok_or_else(|| taylorfold::Error::Invalid(format!("unknown recurrence variant `{s}`")))
}

/// Kernel values as a `size x size` grey image, each cell `scale` pixels wide,
/// normalized so the largest tap is white.
pub fn kernel_image(params: &BlurParams, scale: usize) -> Result<Vec<u8>> {
    let k = make_blur_kernel(params)?;
    let n = params.size;
    let max = k.data().iter().cloned().fold(0.0, f64::max);
    let side = n * scale;
    let mut out = vec![0u8; side * side * 4];
    for y in 0..side {
        for x in 0..side {
            let v = k.data()[(y / scale) * n + x / scale] / max;
            let b = (v * 255.0).round() as u8;
            out[(y * side + x) * 4..][..4].copy_from_slice(&[b, b, b, 255]);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn blur_kernel_rgba(kind: &str, size: usize, sigma: f64, length: f64, angle: f64, scale: usize) -> std::result::Result<Vec<u8>, JsError> {
    let params = BlurParams {
        kernel: kind.parse().map_err(js)?,
        size,
        sigma,
        motion_length: length,
        motion_angle_deg: angle,
        ..BlurParams::default()
    };
    kernel_image(&params, scale.max(1)).map_err(js)
}

#[wasm_bindgen]
pub struct Demo {
    size: usize,
    sample: DegradationSample,
    corpus: Corpus,
    run: TrainRun,
    train_cfg: TrainConfig,
    last_loss: f64,
}

impl Demo {
    pub fn create(kind: DegradationKind, blur_kernel: BlurKernelKind, seed: u64, size: usize) -> Result<Self> {
        if !(16..=MAX_SIZE).contains(&size) {
            return Err(taylorfold::Error::Invalid(format!("size must be in 16..={MAX_SIZE}")));
        }
        let clean = render_scene(size, size, seed);
        let mut spec = match kind {
            DegradationKind::Rain => DegradationSpec::rain(seed),
            DegradationKind::Blur => DegradationSpec::blur(seed),
        };
        spec.blur.kernel = blur_kernel;
        let sample = synthesize(&clean, &spec)?;
        let corpus = Corpus::from_samples(std::slice::from_ref(&sample));
        let train_cfg = TrainConfig {
            patch: size.min(32),
            batch: 2,
            epochs: 0,
            decay_epochs: Vec::new(),
            seed,
            output_init_scale: 0.0,
            ..TrainConfig::default()
        };
        let run = TrainRun::new(demo_model(), ComposerConfig::default(), &train_cfg);
        Ok(Self {
            size,
            sample,
            corpus,
            run,
            train_cfg,
            last_loss: f64::NAN,
        })
    }

    /// Changes the order or variant; parameters are kept, so a model trained
    /// at one order can be inspected at another.
    pub fn configure(&mut self, order: usize, variant: RecurrenceVariant) -> Result<()> {
        let cfg = ComposerConfig {
            order,
            variant,
            ..self.run.composer
        };
        cfg.validate()?;
        self.run.composer = cfg;
        Ok(())
    }

    /// One optimizer step per epoch on a one-image corpus.
    pub fn train_steps(&mut self, steps: usize) -> Result<f64> {
        self.train_cfg.epochs = self.run.state.epoch + steps;
        let log = train(&mut self.run, &self.corpus, &self.train_cfg, &TrainOutputs::default())?;
        if let Some(row) = log.last() {
            self.last_loss = row.loss;
        }
        Ok(self.last_loss)
    }

    /// `f_out`, then `g^k / k!` for `k = 1..=n`, then `O`, on the full image.
    pub fn terms(&self) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = self.run.params.bind_frozen(&mut g);
        let y = g.constant(self.sample.degraded.clone());
        let trace = compose_model(&mut g, &self.run.model, &vars, y, &self.run.composer)?;
        let v = trace.values(&g);
        let weights = factorial_weights(v.terms.len());
        let mut out = vec![v.f_out];
        out.extend(v.terms.iter().zip(weights).map(|(t, w)| t.map(|x| x * w)));
        out.push(v.output.map(|x| x.clamp(0.0, 1.0)));
        Ok(out)
    }
}

#[wasm_bindgen]
impl Demo {
    /// `kind` is `rain` or `blur`; `blur_kernel` is `box`, `gaussian` or `motion`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, blur_kernel: &str, seed: u64, size: usize) -> std::result::Result<Demo, JsError> {
        Self::create(kind.parse().map_err(js)?, blur_kernel.parse().map_err(js)?, seed, size).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        to_rgba(&self.sample.clean, false, 1.0)
    }

    pub fn degraded_rgba(&self) -> Vec<u8> {
        to_rgba(&self.sample.degraded, false, 1.0)
    }

    /// Residual around mid grey, amplified 2x.
    pub fn residual_rgba(&self) -> Vec<u8> {
        to_rgba(&self.sample.residual, true, 2.0)
    }

    pub fn input_psnr(&self) -> f64 {
        psnr(&self.sample.degraded, &self.sample.clean, 1.0).unwrap_or(f64::NAN)
    }

    pub fn set_order(&mut self, order: usize, variant: &str) -> std::result::Result<(), JsError> {
        let v = parse_variant(variant).map_err(js)?;
        self.configure(order, v).map_err(js)
    }

    pub fn train(&mut self, steps: usize) -> std::result::Result<f64, JsError> {
        self.train_steps(steps).map_err(js)
    }

    pub fn steps_done(&self) -> f64 {
        self.run.state.step as f64
    }

    pub fn term_count(&self) -> usize {
        self.run.composer.order + 2
    }

    /// Index 0 is `f_out`, `1..=n` are weighted terms (signed view, `gain`),
    /// `n + 1` is the clamped output.
    pub fn term_rgba(&self, index: usize, gain: f64) -> std::result::Result<Vec<u8>, JsError> {
        let terms = self.terms().map_err(js)?;
        let last = terms.len() - 1;
        let t = terms
            .get(index)
            .ok_or_else(|| JsError::new(&format!("term index {index} out of range")))?;
        let signed = index != 0 && index != last;
        Ok(to_rgba(t, signed, if signed { gain } else { 1.0 }))
    }

    pub fn output_psnr(&self) -> std::result::Result<f64, JsError> {
        let terms = self.terms().map_err(js)?;
        psnr(terms.last().unwrap(), &self.sample.clean, 1.0).map_err(js)
    }
}
