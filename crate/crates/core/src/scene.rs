//! Procedural clean images: a two-colour gradient, a few soft-edged shapes
//! and a faint sinusoidal texture.

use crate::rng::SplitMix64;
use crate::tensor::Tensor;

fn smooth_alpha(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

/// `[1, 3, height, width]` image in `[0, 1]`.
pub fn render_scene(height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let color = |rng: &mut SplitMix64| [rng.range(0.1, 0.9), rng.range(0.1, 0.9), rng.range(0.1, 0.9)];
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let phi = rng.range(0.0, std::f64::consts::TAU);
    let (gx, gy) = (phi.cos(), phi.sin());
    let diag = ((height * height + width * width) as f64).sqrt().max(1.0);

    let mut img = vec![[0.0f64; 3]; height * width];
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + ((x as f64 - width as f64 / 2.0) * gx + (y as f64 - height as f64 / 2.0) * gy) / diag;
            let t = t.clamp(0.0, 1.0);
            let px = &mut img[y * width + x];
            for ch in 0..3 {
                px[ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }

    let shapes = rng.int_inclusive(3, 7);
    let side = height.min(width) as f64;
    for _ in 0..shapes {
        let disc = rng.uniform() < 0.5;
        let cx = rng.range(0.0, width as f64);
        let cy = rng.range(0.0, height as f64);
        let a = rng.range(side / 16.0, side / 4.0);
        let b = rng.range(side / 16.0, side / 4.0);
        let col = color(&mut rng);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sd = if disc {
                    (dx * dx + dy * dy).sqrt() - a
                } else {
                    (dx.abs() - a).max(dy.abs() - b)
                };
                let alpha = smooth_alpha(sd);
                if alpha > 0.0 {
                    let px = &mut img[y * width + x];
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - alpha) + col[ch] * alpha;
                    }
                }
            }
        }
    }

    let fx = rng.range(0.1, 0.6);
    let fy = rng.range(0.1, 0.6);
    let phase = rng.range(0.0, std::f64::consts::TAU);
    let amp = rng.range(0.01, 0.04);

    let mut data = vec![0.0; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let tex = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            for ch in 0..3 {
                data[(ch * height + y) * width + x] = (img[y * width + x][ch] + tex).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([1, 3, height, width], data).expect("shape")
}
