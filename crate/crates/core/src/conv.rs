//! 2-D cross-correlation kernels over raw slices, lowered to GEMM via im2col.
//!
//! Convention: `out[n, o, y, x] = bias[o] + sum_{c,i,j} w[o, c, i, j] *
//! in[n, c, y*stride + i - pad, x*stride + j - pad]`, with zeros outside the
//! image. The kernel is not flipped.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        pad: usize,
        stride: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = dims4("conv2d input", input)?;
        let [cout, wcin, kh, kw] = dims4("conv2d weight", weight)?;
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
        }
        if wcin != cin {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "input channels".into(),
                expected: wcin,
                got: cin,
            });
        }
        let blen: usize = bias.iter().product();
        if bias.len() != 1 || blen != cout {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "bias length".into(),
                expected: cout,
                got: blen,
            });
        }
        if h + 2 * pad < kh {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "padded height".into(),
                expected: kh,
                got: h + 2 * pad,
            });
        }
        if w + 2 * pad < kw {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "padded width".into(),
                expected: kw,
                got: w + 2 * pad,
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            stride,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Rank {
            op,
            expected: 4,
            got: s.to_vec(),
        }),
    }
}

/// `c = a * b + beta * c`, with `a` m x k and `b` k x n given by strides, `c`
/// dense row-major m x n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(reach(m, k, a_strides) <= a.len());
    assert!(reach(k, n, b_strides) <= b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[cin*kh*kw, ho*wo]` back into `[cin, h, w]`.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (kk, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = vec![0.0; kk * p];
    for s in 0..g.n {
        im2col(g, &x[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w], &mut cols);
        let y = &mut out[s * g.cout * p..(s + 1) * g.cout * p];
        for (o, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(b[o]);
        }
        gemm(g.cout, kk, p, w, (kk, 1), &cols, (p, 1), 1.0, y);
    }
    out
}

/// Accumulates into `dw`, `db` and, when given, `dx`.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (kk, p) = (g.patch_len(), g.positions());
    let img = g.cin * g.h * g.w;
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    for s in 0..g.n {
        let dys = &dy[s * g.cout * p..(s + 1) * g.cout * p];
        for (o, row) in dys.chunks_exact(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        im2col(g, &x[s * img..(s + 1) * img], &mut cols);
        // dW[cout, kk] += dY[cout, p] * cols^T[p, kk]
        gemm(g.cout, p, kk, dys, (p, 1), &cols, (1, p), 1.0, dw);
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[kk, p] = W^T[kk, cout] * dY[cout, p]
            gemm(kk, g.cout, p, w, (1, kk), dys, (p, 1), 0.0, &mut dcols);
            col2im(g, &dcols, &mut dx[s * img..(s + 1) * img]);
        }
    }
}
