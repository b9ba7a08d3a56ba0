//! Binary PPM (P6, maxval 255) for `[1, 3, h, w]` tensors in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn ppm_header(width: usize, height: usize) -> String {
    format!("P6\n{width} {height}\n255\n")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *t.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Rank {
                op: "write_ppm",
                expected: 4,
                got: t.shape().to_vec(),
            })
        }
    };
    if c != 3 {
        return Err(Error::Shape {
            op: "write_ppm",
            dim: "channels".into(),
            expected: 3,
            got: c,
        });
    }
    let d = t.data();
    let mut out = ppm_header(w, h).into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

pub fn write_ppm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(path, "not a PNM file"));
    }
    if bytes[1] != b'6' {
        return Err(Error::format(
            path,
            format!("unsupported format P{} (only binary P6)", bytes[1] as char),
        ));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number().ok_or_else(|| Error::format(path, "malformed width"))?;
    let height = hdr.number().ok_or_else(|| Error::format(path, "malformed height"))?;
    let maxval = hdr.number().ok_or_else(|| Error::format(path, "malformed maxval"))?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing separator after header"));
    }
    let payload = &bytes[hdr.pos + 1..];
    let need = 3 * width * height;
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let plane = width * height;
    let mut data = vec![0.0; need];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = f64::from(payload[3 * i + ch]) / 255.0;
        }
    }
    Tensor::new([1, 3, height, width], data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}
