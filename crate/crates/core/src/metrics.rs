//! PSNR, SSIM and corpus evaluation.

use std::fmt::Write as _;

use crate::composer::{compose_model, ComposerConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nets::{ModelSpec, ParamSet};
use crate::tensor::{ensure_same_shape, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `10 log10(peak^2 / MSE)` over every element; `+inf` when the inputs match.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    ensure_same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * plane[y * w + x + j])
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * wo + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over every valid window position and every channel, with an
/// 11x11 Gaussian window (sigma 1.5), `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    ensure_same_shape("ssim", a, b)?;
    let [n, c, h, w] = a.dims4("ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            op: "ssim",
            dim: "image extent smaller than the window".into(),
            expected: SSIM_WINDOW,
            got: h.min(w),
        });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let pa = &a.data()[p * plane..(p + 1) * plane];
        let pb = &b.data()[p * plane..(p + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let e_aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
        let e_bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
        let e_ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub index: usize,
    pub file: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Self {
            rows,
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// `index file psnr ssim` rows and a `mean` footer; `+inf` prints `inf`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("index\tfile\tpsnr\tssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.index, r.file, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "mean\t{}\t{}\t{}", self.count(), self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Full-image inference with the composed model. The output is clamped to
/// `[0, 1]` before scoring against the clean image.
pub fn restore(
    spec: &ModelSpec,
    params: &ParamSet,
    cfg: &ComposerConfig,
    degraded: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind_frozen(&mut g);
    let y = g.constant(degraded.detached());
    let trace = compose_model(&mut g, spec, &vars, y, cfg)?;
    Ok(g.value(trace.output).map(|v| v.clamp(0.0, 1.0)))
}

pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamSet,
    cfg: &ComposerConfig,
    corpus: &Corpus,
) -> Result<MetricReport> {
    let rows = corpus
        .items
        .iter()
        .map(|item| {
            let out = restore(spec, params, cfg, &item.degraded)?;
            Ok(MetricRow {
                index: item.index,
                file: item.file.clone(),
                psnr: psnr(&out, &item.clean, 1.0)?,
                ssim: ssim(&out, &item.clean, 1.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}
