//! Synthetic paired data: `y = A x + N`.
//!
//! Rain uses `A = I` and a non-negative streak field for `N`. Blur uses a
//! normalized kernel for `A` (replicate-edge padding) and Gaussian noise for
//! `N`. Both clamp the degraded image to `[0, 1]`; the residual is stored
//! before clamping.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradationKind {
    Rain,
    Blur,
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rain => "rain",
            Self::Blur => "blur",
        })
    }
}

impl FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(Self::Rain),
            "blur" => Ok(Self::Blur),
            _ => Err(Error::Invalid(format!("unknown degradation kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlurKernelKind {
    Box,
    Gaussian,
    Motion,
}

impl fmt::Display for BlurKernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Box => "box",
            Self::Gaussian => "gaussian",
            Self::Motion => "motion",
        })
    }
}

impl FromStr for BlurKernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Self::Box),
            "gaussian" => Ok(Self::Gaussian),
            "motion" => Ok(Self::Motion),
            _ => Err(Error::Invalid(format!("unknown blur kernel `{s}`"))),
        }
    }
}

/// Streak field parameters. Angles are degrees from vertical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainParams {
    pub streaks: (usize, usize),
    pub length: (f64, f64),
    pub angle_deg: (f64, f64),
    pub intensity: (f64, f64),
    /// Standard deviation of the Gaussian cross-section, in pixels.
    pub thickness: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streaks: (20, 50),
            length: (4.0, 12.0),
            angle_deg: (-20.0, 20.0),
            intensity: (0.2, 0.5),
            thickness: 0.6,
        }
    }
}

/// Blur kernel and noise parameters. Motion angle is degrees from horizontal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurParams {
    pub kernel: BlurKernelKind,
    pub size: usize,
    pub sigma: f64,
    pub motion_length: f64,
    pub motion_angle_deg: f64,
    pub noise_sigma: f64,
}

impl Default for BlurParams {
    fn default() -> Self {
        Self {
            kernel: BlurKernelKind::Gaussian,
            size: 7,
            sigma: 1.2,
            motion_length: 5.0,
            motion_angle_deg: 0.0,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub rain: RainParams,
    pub blur: BlurParams,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn rain(seed: u64) -> Self {
        Self {
            kind: DegradationKind::Rain,
            rain: RainParams::default(),
            blur: BlurParams::default(),
            seed,
        }
    }

    pub fn blur(seed: u64) -> Self {
        Self {
            kind: DegradationKind::Blur,
            ..Self::rain(seed)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rain;
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo <= hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{name}: range {lo}..{hi} is empty")))
            }
        };
        if r.streaks.0 > r.streaks.1 {
            return Err(Error::Invalid(format!(
                "rain streaks: range {}..{} is empty",
                r.streaks.0, r.streaks.1
            )));
        }
        ordered("rain length", r.length.0, r.length.1)?;
        ordered("rain angle", r.angle_deg.0, r.angle_deg.1)?;
        ordered("rain intensity", r.intensity.0, r.intensity.1)?;
        if r.intensity.0 < 0.0 || r.length.0 < 0.0 {
            return Err(Error::Invalid("rain length and intensity must be non-negative".into()));
        }
        if !(r.thickness > 0.0) {
            return Err(Error::Invalid("rain thickness must be positive".into()));
        }
        let b = &self.blur;
        if b.size % 2 == 0 {
            return Err(Error::Invalid(format!("blur kernel size must be odd, got {}", b.size)));
        }
        if !(b.sigma >= 0.0 && b.noise_sigma >= 0.0 && b.motion_length >= 0.0) {
            return Err(Error::Invalid("blur sigma, noise and motion length must be non-negative".into()));
        }
        Ok(())
    }
}

/// A clean image, its degraded observation and the additive residual.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSample {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub residual: Tensor,
    pub seed: u64,
}

fn check_image(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    let dims = t.dims4(op)?;
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid(format!("{op}: clean image values must lie in [0, 1]")));
    }
    Ok(dims)
}

fn clamp_unit(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), d).expect("same shape")
}

fn distance_to_segment(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Non-negative field of oriented line segments with Gaussian cross-section,
/// identical across channels.
pub fn rain_streaks(shape: [usize; 4], params: &RainParams, rng: &mut SplitMix64) -> Tensor {
    let [n, c, h, w] = shape;
    let mut plane = vec![0.0; h * w];
    let count = rng.int_inclusive(params.streaks.0 as u64, params.streaks.1 as u64);
    let reach = 3.0 * params.thickness;
    let inv = 1.0 / (2.0 * params.thickness * params.thickness);
    for _ in 0..count {
        let cx = rng.range(0.0, w as f64);
        let cy = rng.range(0.0, h as f64);
        let len = rng.range(params.length.0, params.length.1);
        let theta = rng.range(params.angle_deg.0, params.angle_deg.1).to_radians();
        let intensity = rng.range(params.intensity.0, params.intensity.1);
        let (ux, uy) = (theta.sin() * len / 2.0, theta.cos() * len / 2.0);
        let a = (cx - ux, cy - uy);
        let b = (cx + ux, cy + uy);
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = distance_to_segment(x as f64, y as f64, a, b);
                if d <= reach {
                    plane[y * w + x] += intensity * (-d * d * inv).exp();
                }
            }
        }
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for _ in 0..n * c {
        out.extend_from_slice(&plane);
    }
    Tensor::new(shape, out).expect("shape")
}

pub fn synth_rain(clean: &Tensor, spec: &DegradationSpec) -> Result<DegradationSample> {
    if spec.kind != DegradationKind::Rain {
        return Err(Error::Invalid(format!("synth_rain called with a {} spec", spec.kind)));
    }
    spec.validate()?;
    let dims = check_image("synth_rain", clean)?;
    let mut rng = SplitMix64::new(spec.seed);
    let residual = rain_streaks(dims, &spec.rain, &mut rng);
    let degraded = clamp_unit(&add(clean, &residual));
    Ok(DegradationSample {
        clean: clean.detached(),
        degraded,
        residual,
        seed: spec.seed,
    })
}

fn delta_kernel(size: usize) -> Tensor {
    let mut k = Tensor::zeros([size, size]);
    k.data_mut()[(size / 2) * size + size / 2] = 1.0;
    k
}

fn normalized(mut k: Tensor) -> Tensor {
    let s: f64 = k.data().iter().sum();
    k.data_mut().iter_mut().for_each(|v| *v /= s);
    k
}

/// Non-negative `[size, size]` kernel summing to one.
pub fn make_blur_kernel(params: &BlurParams) -> Result<Tensor> {
    let size = params.size;
    if size % 2 == 0 {
        return Err(Error::Invalid(format!("blur kernel size must be odd, got {size}")));
    }
    let r = (size / 2) as f64;
    Ok(match params.kernel {
        BlurKernelKind::Box => Tensor::full([size, size], 1.0 / (size * size) as f64),
        BlurKernelKind::Gaussian => {
            if params.sigma < 0.5 {
                delta_kernel(size)
            } else {
                let inv = 1.0 / (2.0 * params.sigma * params.sigma);
                normalized(Tensor::from_fn([size, size], |i| {
                    let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
                    (-(x * x + y * y) * inv).exp()
                }))
            }
        }
        BlurKernelKind::Motion => {
            if params.motion_length <= 1.0 {
                delta_kernel(size)
            } else {
                // Anti-aliased segment: dense samples splatted bilinearly.
                let theta = params.motion_angle_deg.to_radians();
                let (dx, dy) = (theta.cos(), -theta.sin());
                let samples = (params.motion_length * 16.0).ceil() as usize + 1;
                let mut k = Tensor::zeros([size, size]);
                let data = k.data_mut();
                for s in 0..samples {
                    let t = (s as f64 / (samples - 1) as f64 - 0.5) * (params.motion_length - 1.0);
                    let (x, y) = (r + t * dx, r + t * dy);
                    let (x0, y0) = (x.floor(), y.floor());
                    let (fx, fy) = (x - x0, y - y0);
                    for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                        for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                            let (xi, yi) = (x0 + ox, y0 + oy);
                            if xi >= 0.0 && yi >= 0.0 && xi < size as f64 && yi < size as f64 {
                                data[yi as usize * size + xi as usize] += wx * wy;
                            }
                        }
                    }
                }
                normalized(k)
            }
        }
    })
}

/// Cross-correlation of every channel with `kernel`, replicating edge pixels.
pub fn blur_replicate(img: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = img.dims4("blur")?;
    let (kh, kw) = match kernel.shape() {
        &[kh, kw] => (kh, kw),
        other => {
            return Err(Error::Rank {
                op: "blur kernel",
                expected: 2,
                got: other.to_vec(),
            })
        }
    };
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let k = kernel.data();
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for i in 0..kh as isize {
                    let sy = (y + i - ry).clamp(0, h as isize - 1) as usize;
                    for j in 0..kw as isize {
                        let sx = (x + j - rx).clamp(0, w as isize - 1) as usize;
                        acc += k[(i * kw as isize + j) as usize] * plane[sy * w + sx];
                    }
                }
                dst[y as usize * w + x as usize] = acc;
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// The degradation operator `A`: identity for rain, the blur kernel for blur.
pub fn apply_operator(clean: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    match spec.kind {
        DegradationKind::Rain => Ok(clean.detached()),
        DegradationKind::Blur => blur_replicate(clean, &make_blur_kernel(&spec.blur)?),
    }
}

pub fn synth_blur(clean: &Tensor, spec: &DegradationSpec) -> Result<DegradationSample> {
    if spec.kind != DegradationKind::Blur {
        return Err(Error::Invalid(format!("synth_blur called with a {} spec", spec.kind)));
    }
    spec.validate()?;
    check_image("synth_blur", clean)?;
    let blurred = apply_operator(clean, spec)?;
    let mut rng = SplitMix64::new(spec.seed);
    let sigma = spec.blur.noise_sigma;
    let residual = if sigma > 0.0 {
        Tensor::from_fn(blurred.shape().to_vec(), |_| sigma * rng.normal())
    } else {
        Tensor::zeros(blurred.shape().to_vec())
    };
    let degraded = clamp_unit(&add(&blurred, &residual));
    Ok(DegradationSample {
        clean: clean.detached(),
        degraded,
        residual,
        seed: spec.seed,
    })
}

/// Dispatches on `spec.kind`.
pub fn synthesize(clean: &Tensor, spec: &DegradationSpec) -> Result<DegradationSample> {
    match spec.kind {
        DegradationKind::Rain => synth_rain(clean, spec),
        DegradationKind::Blur => synth_blur(clean, spec),
    }
}
