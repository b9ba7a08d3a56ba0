//! On-disk paired corpora: `clean_%06d.ppm`, `degraded_%06d.ppm` and a
//! `manifest.tsv` describing every sample.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::degrade::{synthesize, DegradationKind, DegradationSample, DegradationSpec};
use crate::error::{Error, Result};
use crate::ppm::{encode_ppm, read_ppm};
use crate::rng::{split, Stream};
use crate::scene::render_scene;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";

const COLUMNS: [&str; 20] = [
    "index",
    "clean_file",
    "degraded_file",
    "kind",
    "seed",
    "rain_streaks_min",
    "rain_streaks_max",
    "rain_length_min",
    "rain_length_max",
    "rain_angle_min",
    "rain_angle_max",
    "rain_intensity_min",
    "rain_intensity_max",
    "rain_thickness",
    "blur_kernel",
    "blur_size",
    "blur_sigma",
    "blur_motion_length",
    "blur_motion_angle",
    "blur_noise_sigma",
];

/// Seed of sample `index` in a corpus seeded with `corpus_seed`.
pub fn sample_seed(corpus_seed: u64, index: usize) -> u64 {
    split(corpus_seed, index as u64)
}

pub fn clean_name(index: usize) -> String {
    format!("clean_{index:06}.ppm")
}

pub fn degraded_name(index: usize) -> String {
    format!("degraded_{index:06}.ppm")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub clean_file: String,
    pub degraded_file: String,
    pub kind: DegradationKind,
    pub seed: u64,
}

/// Degrades `cleans[i % cleans.len()]` for `i in 0..count`.
pub fn synthesize_samples(
    cleans: &[Tensor],
    spec: &DegradationSpec,
    count: usize,
) -> Result<Vec<DegradationSample>> {
    if count == 0 {
        return Err(Error::Invalid("corpus sample count must be at least 1".into()));
    }
    if cleans.is_empty() {
        return Err(Error::Invalid("no clean images supplied".into()));
    }
    (0..count)
        .map(|i| {
            let s = spec.with_seed(sample_seed(spec.seed, i));
            synthesize(&cleans[i % cleans.len()], &s)
        })
        .collect()
}

fn manifest_row(out: &mut String, e: &ManifestEntry, spec: &DegradationSpec) {
    let (r, b) = (&spec.rain, &spec.blur);
    let _ = writeln!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.index,
        e.clean_file,
        e.degraded_file,
        e.kind,
        e.seed,
        r.streaks.0,
        r.streaks.1,
        r.length.0,
        r.length.1,
        r.angle_deg.0,
        r.angle_deg.1,
        r.intensity.0,
        r.intensity.1,
        r.thickness,
        b.kernel,
        b.size,
        b.sigma,
        b.motion_length,
        b.motion_angle_deg,
        b.noise_sigma,
    );
}

/// Writes `count` degraded pairs plus the manifest into `dir`.
pub fn make_corpus(
    cleans: &[Tensor],
    spec: &DegradationSpec,
    count: usize,
    dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    spec.validate()?;
    let samples = synthesize_samples(cleans, spec, count)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = COLUMNS.join("\t");
    manifest.push('\n');
    let mut entries = Vec::with_capacity(count);
    for (index, s) in samples.iter().enumerate() {
        let entry = ManifestEntry {
            index,
            clean_file: clean_name(index),
            degraded_file: degraded_name(index),
            kind: spec.kind,
            seed: s.seed,
        };
        for (name, t) in [(&entry.clean_file, &s.clean), (&entry.degraded_file, &s.degraded)] {
            let path = dir.join(name);
            fs::write(&path, encode_ppm(t)?).map_err(|e| Error::io(&path, e))?;
        }
        manifest_row(&mut manifest, &entry, spec);
        entries.push(entry);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// `count` procedural clean scenes of the given size, seeded from `seed`.
pub fn scene_set(count: usize, height: usize, width: usize, seed: u64) -> Vec<Tensor> {
    let base = split(seed, Stream::Scenes as u64);
    (0..count)
        .map(|i| render_scene(height, width, split(base, i as u64)))
        .collect()
}

/// Procedural scenes degraded by `spec` and written to `dir`; one scene per
/// sample, both derived from `spec.seed`.
pub fn make_scene_corpus(
    spec: &DegradationSpec,
    count: usize,
    height: usize,
    width: usize,
    dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    if count == 0 {
        return Err(Error::Invalid("corpus sample count must be at least 1".into()));
    }
    let cleans = scene_set(count, height, width, spec.seed);
    make_corpus(&cleans, spec, count, dir)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::format(&path, "empty manifest"))?
        .split('\t')
        .collect();
    if header.len() < 5 || header[..5] != COLUMNS[..5] {
        return Err(Error::format(&path, "unexpected manifest header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(&path, format!("malformed row {}", n + 1));
            if f.len() < 5 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                index: f[0].parse().map_err(|_| bad())?,
                clean_file: f[1].to_owned(),
                degraded_file: f[2].to_owned(),
                kind: f[3].parse().map_err(|_| bad())?,
                seed: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// A loaded pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub index: usize,
    pub file: String,
    pub clean: Tensor,
    pub degraded: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Builds an in-memory corpus from already synthesized samples.
    pub fn from_samples(samples: &[DegradationSample]) -> Self {
        Self {
            root: PathBuf::new(),
            items: samples
                .iter()
                .enumerate()
                .map(|(index, s)| CorpusItem {
                    index,
                    file: degraded_name(index),
                    clean: s.clean.clone(),
                    degraded: s.degraded.clone(),
                })
                .collect(),
        }
    }
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let entries = read_manifest(dir)?;
    let items = entries
        .into_iter()
        .map(|e| {
            let clean = read_ppm(dir.join(&e.clean_file))?;
            let degraded = read_ppm(dir.join(&e.degraded_file))?;
            if clean.shape() != degraded.shape() {
                return Err(Error::format(
                    dir.join(&e.degraded_file),
                    format!("shape {:?} differs from its clean pair {:?}", degraded.shape(), clean.shape()),
                ));
            }
            Ok(CorpusItem {
                index: e.index,
                file: e.degraded_file,
                clean,
                degraded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        root: dir.to_path_buf(),
        items,
    })
}
