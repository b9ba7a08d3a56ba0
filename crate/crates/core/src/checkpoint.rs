//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic     8 bytes  "TAYLCKPT"
//! version   u32      (currently 1)
//! n_meta    u32
//!   key_len u32, key bytes (UTF-8), val_len u32, val bytes (UTF-8)   x n_meta
//! n_tensor  u32
//!   name_len u32, name bytes, rank u32, extents u64 x rank,
//!   payload f64 x product(extents)                                  x n_tensor
//! ```
//!
//! Metadata and tensors are written sorted by key, so identical content
//! always serializes to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::composer::{ComposerConfig, RecurrenceVariant, SeedTerm};
use crate::error::{Error, Result};
use crate::nets::{DerivativeNet, MappingNet, ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TAYLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32("metadata count")? {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            ck.metadata.insert(k, v);
        }
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("tensor extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name}: extent overflow"))
            })?, "tensor payload")?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` has bad value `{v}`")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_owned(), value.to_string());
    }

    pub fn put_params(&mut self, params: &ParamSet) {
        for (n, t) in params.iter() {
            self.tensors.insert(n.to_owned(), t.detached());
        }
    }

    /// Extracts the parameter tensors `spec` expects. Errors name the first
    /// missing or mis-shaped tensor (in sorted order), or any parameter-like
    /// tensor the model does not know.
    pub fn params_for(&self, spec: &ModelSpec) -> Result<ParamSet> {
        let mut expected = spec.param_shapes();
        expected.sort();
        let mut ps = ParamSet::new();
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            ps.insert(name.clone(), t.clone());
        }
        for name in self.tensors.keys() {
            let is_param = name.starts_with("F.") || name.starts_with("G.");
            if is_param && ps.get(name).is_none() {
                return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
            }
        }
        Ok(ps)
    }
}

pub fn put_model_spec(ck: &mut Checkpoint, spec: &ModelSpec) {
    ck.set_meta("model.image_channels", spec.image_channels);
    ck.set_meta("model.f_features", spec.mapping.features);
    ck.set_meta("model.f_blocks", spec.mapping.blocks);
    ck.set_meta(
        "model.g_features",
        spec.derivative.map_or("none".to_owned(), |d| d.features.to_string()),
    );
}

pub fn model_spec(ck: &Checkpoint) -> Result<ModelSpec> {
    let g = ck.meta("model.g_features")?;
    let derivative = if g == "none" {
        None
    } else {
        Some(DerivativeNet {
            features: ck.meta_parse("model.g_features")?,
        })
    };
    Ok(ModelSpec {
        image_channels: ck.meta_parse("model.image_channels")?,
        mapping: MappingNet {
            features: ck.meta_parse("model.f_features")?,
            blocks: ck.meta_parse("model.f_blocks")?,
        },
        derivative,
    })
}

pub fn variant_name(v: RecurrenceVariant) -> &'static str {
    match v {
        RecurrenceVariant::WithKResidual => "with_k_residual",
        RecurrenceVariant::ConcatOnly => "concat_only",
    }
}

pub fn parse_variant(s: &str) -> Option<RecurrenceVariant> {
    match s {
        "with_k_residual" => Some(RecurrenceVariant::WithKResidual),
        "concat_only" => Some(RecurrenceVariant::ConcatOnly),
        _ => None,
    }
}

pub fn seed_term_name(s: SeedTerm) -> &'static str {
    match s {
        SeedTerm::MappingOutput => "f_out",
        SeedTerm::DegradedInput => "input",
    }
}

pub fn parse_seed_term(s: &str) -> Option<SeedTerm> {
    match s {
        "f_out" => Some(SeedTerm::MappingOutput),
        "input" => Some(SeedTerm::DegradedInput),
        _ => None,
    }
}

pub fn put_composer(ck: &mut Checkpoint, cfg: &ComposerConfig) {
    ck.set_meta("composer.order", cfg.order);
    ck.set_meta("composer.lambda", cfg.lambda);
    ck.set_meta("composer.variant", variant_name(cfg.variant));
    ck.set_meta("composer.seed_term", seed_term_name(cfg.seed_term));
}

pub fn composer(ck: &Checkpoint) -> Result<ComposerConfig> {
    let bad = |k: &str| Error::Checkpoint(format!("metadata `{k}` has an unknown value"));
    Ok(ComposerConfig {
        order: ck.meta_parse("composer.order")?,
        lambda: ck.meta_parse("composer.lambda")?,
        variant: parse_variant(ck.meta("composer.variant")?).ok_or_else(|| bad("composer.variant"))?,
        seed_term: parse_seed_term(ck.meta("composer.seed_term")?)
            .ok_or_else(|| bad("composer.seed_term"))?,
    })
}
