//! Synthetic tracklets with planted per-class patterns, and the on-disk
//! dataset layout:
//!
//! ```text
//! <root>/manifest.toml
//! <root>/schema.toml
//! <root>/<split>/<id>/000000.vtf ...
//! <root>/<split>/<id>/labels.toml
//! ```

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::{line_of, Error, Result};
use crate::text::{AttributeSchema, GroupKind};
use crate::vision::{Frame, CHANNELS};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SCHEMA_FILE: &str = "schema.toml";
pub const LABELS_FILE: &str = "labels.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: String,
    pub frames: Vec<Frame>,
    pub labels: Vec<bool>,
}

impl Tracklet {
    pub fn frame_refs(&self) -> Vec<&Frame> {
        self.frames.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub train: Vec<Tracklet>,
    pub test: Vec<Tracklet>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Tracklet] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub tracklets: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Chance that a frame carries noise only, with no class pattern.
    pub occlusion: f64,
    /// Scale of the planted class patterns around the mid-gray base.
    pub amplitude: f64,
    /// Side in pixels of the tile each class pattern repeats over.
    pub period: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub prototype_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tracklets: 700,
            frames: 6,
            height: 32,
            width: 16,
            noise: 0.1,
            occlusion: 0.3,
            amplitude: 0.1,
            period: 8,
            train_fraction: 5.0 / 7.0,
            seed: 0,
            prototype_seed: 1,
        }
    }
}

/// Mid-gray background every frame is rendered on.
const GRAY: f64 = 0.5;
const PROTOTYPE_WAVES: usize = 4;
const MAX_FREQUENCY: usize = 3;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Usage(m));
        if !(0.0..1.0).contains(&self.occlusion) {
            return fail(format!("occlusion probability must be in [0, 1), got {}", self.occlusion));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("split fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return fail(format!("amplitude must be positive, got {}", self.amplitude));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.period == 0 {
            return fail("frames, height, width and period must be at least 1".into());
        }
        let train = self.train_count();
        if train == 0 || train == self.tracklets {
            return fail(format!(
                "{} tracklets with split fraction {} leaves an empty split",
                self.tracklets, self.train_fraction
            ));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        (self.tracklets as f64 * self.train_fraction).round() as usize
    }

    fn pixels(&self) -> usize {
        self.height * self.width * CHANNELS
    }
}

/// One zero-mean, unit-RMS low-frequency pattern per class.
pub fn prototypes(spec: &SyntheticSpec, classes: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..classes)
        .map(|_| {
            let mut p = vec![0.0; spec.pixels()];
            for _ in 0..PROTOTYPE_WAVES {
                let (fy, fx) = loop {
                    let f = (rng.random_range(0..=MAX_FREQUENCY), rng.random_range(0..=MAX_FREQUENCY));
                    if f != (0, 0) {
                        break f;
                    }
                };
                let phase = rng.random_range(0.0..TAU);
                let gains: Vec<f64> = (0..CHANNELS).map(|_| normal.sample(&mut rng)).collect();
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let arg = TAU * (fy * y + fx * x) as f64 / spec.period as f64;
                        let wave = (arg + phase).cos();
                        for (c, g) in gains.iter().enumerate() {
                            p[(y * spec.width + x) * CHANNELS + c] += g * wave;
                        }
                    }
                }
            }
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            p.iter_mut().for_each(|v| *v -= mean);
            let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt().max(1e-12);
            p.iter_mut().for_each(|v| *v /= rms);
            p
        })
        .collect()
}

fn sample_labels(schema: &AttributeSchema, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut labels = vec![false; schema.class_count()];
    for (g, group) in schema.groups().iter().enumerate() {
        let range = schema.group_range(g);
        match group.kind {
            GroupKind::Exclusive => labels[rng.random_range(range)] = true,
            GroupKind::Binary => range.for_each(|i| labels[i] = rng.random_bool(0.5)),
        }
    }
    labels
}

fn render_tracklet(
    spec: &SyntheticSpec,
    schema: &AttributeSchema,
    protos: &[Vec<f64>],
    index: usize,
) -> Result<(Tracklet, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let labels = sample_labels(schema, &mut rng);
    let mut clean = vec![GRAY; spec.pixels()];
    for (proto, _) in protos.iter().zip(&labels).filter(|(_, &on)| on) {
        for (c, p) in clean.iter_mut().zip(proto) {
            *c += spec.amplitude * p;
        }
    }
    let blank = vec![GRAY; spec.pixels()];
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut frames = Vec::with_capacity(spec.frames);
    let mut occluded = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        let hidden = rng.random_bool(spec.occlusion);
        let base = if hidden { &blank } else { &clean };
        let pixels: Vec<f32> = if spec.noise == 0.0 {
            base.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()
        } else {
            base.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect()
        };
        frames.push(Frame::new(spec.height, spec.width, pixels)?);
        occluded.push(hidden);
    }
    let tracklet = Tracklet {
        id: format!("t{index:06}"),
        frames,
        labels,
    };
    Ok((tracklet, occluded))
}

/// Generates the dataset in memory, also returning which frames of each
/// tracklet (train first, then test) were occluded.
pub fn generate_detailed(spec: &SyntheticSpec, schema: &AttributeSchema) -> Result<(Dataset, Vec<Vec<bool>>)> {
    spec.validate()?;
    let protos = prototypes(spec, schema.class_count());
    let rendered = (0..spec.tracklets)
        .into_par_iter()
        .map(|i| render_tracklet(spec, schema, &protos, i))
        .collect::<Result<Vec<_>>>()?;
    let (mut tracklets, occluded): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let test = tracklets.split_off(spec.train_count());
    let dataset = Dataset {
        schema: schema.clone(),
        train: tracklets,
        test,
    };
    Ok((dataset, occluded))
}

pub fn generate(spec: &SyntheticSpec, schema: &AttributeSchema) -> Result<Dataset> {
    generate_detailed(spec, schema).map(|(d, _)| d)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema: String,
    class_count: Spanned<usize>,
    tracklet: Vec<Spanned<ManifestEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    split: Split,
    dir: String,
    frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelFile {
    id: String,
    labels: Spanned<Vec<u8>>,
    groups: BTreeMap<String, Vec<String>>,
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.vtf")
}

fn positives_by_group(schema: &AttributeSchema, labels: &[bool]) -> BTreeMap<String, Vec<String>> {
    schema
        .groups()
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let on = schema
                .group_range(g)
                .zip(&group.classes)
                .filter(|(i, _)| labels[*i])
                .map(|(_, c)| c.name.clone())
                .collect();
            (group.name.clone(), on)
        })
        .collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes a dataset under `root`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(&root.join(SCHEMA_FILE), dataset.schema.to_toml().as_bytes())?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Test] {
        for t in dataset.split(split) {
            let rel = format!("{}/{}", split.as_str(), t.id);
            let dir = root.join(&rel);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, f) in t.frames.iter().enumerate() {
                f.write(&dir.join(frame_name(i)))?;
            }
            let record = LabelFile {
                id: t.id.clone(),
                labels: Spanned::new(0..0, t.labels.iter().map(|&b| b as u8).collect()),
                groups: positives_by_group(&dataset.schema, &t.labels),
            };
            let text = toml::to_string(&record).expect("label record serializes");
            write_file(&dir.join(LABELS_FILE), text.as_bytes())?;
            entries.push(Spanned::new(
                0..0,
                ManifestEntry {
                    split,
                    dir: rel,
                    frames: t.frames.len(),
                },
            ));
        }
    }
    let manifest = ManifestFile {
        schema: SCHEMA_FILE.into(),
        class_count: Spanned::new(0..0, dataset.schema.class_count()),
        tracklet: entries,
    };
    let path = root.join(MANIFEST_FILE);
    write_file(&path, toml::to_string(&manifest).expect("manifest serializes").as_bytes())?;
    Ok(path)
}

/// Generates and writes; returns the manifest path.
pub fn generate_to_disk(spec: &SyntheticSpec, schema: &AttributeSchema, root: &Path) -> Result<PathBuf> {
    write_dataset(&generate(spec, schema)?, root)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_toml<T: serde::de::DeserializeOwned>(src: &str, path: &Path) -> Result<T> {
    toml::from_str(src).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_of(src, e.span().map_or(0, |s| s.start)),
        message: e.message().to_string(),
    })
}

fn load_tracklet(dir: &Path, frames: usize, schema: &AttributeSchema) -> Result<Tracklet> {
    let label_path = dir.join(LABELS_FILE);
    let src = read_text(&label_path)?;
    let record: LabelFile = parse_toml(&src, &label_path)?;
    let mismatch = |offset: usize, message: String| Error::LabelMismatch {
        path: label_path.clone(),
        line: line_of(&src, offset),
        message,
    };
    let at = record.labels.span().start;
    if let Some(bad) = record.labels.get_ref().iter().find(|&&v| v > 1) {
        return Err(mismatch(at, format!("label values must be 0 or 1, found {bad}")));
    }
    let labels: Vec<bool> = record.labels.get_ref().iter().map(|&v| v == 1).collect();
    schema.check_labels(&labels).map_err(|m| mismatch(at, m))?;
    if record.groups != positives_by_group(schema, &labels) {
        return Err(mismatch(at, "group listing disagrees with the label vector".into()));
    }
    if frames == 0 {
        return Err(Error::Contract(format!("{} lists no frames", dir.display())));
    }
    let frames = (0..frames).map(|i| Frame::read(&dir.join(frame_name(i)))).collect::<Result<_>>()?;
    Ok(Tracklet {
        id: record.id,
        frames,
        labels,
    })
}

/// Loads and validates a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let src = read_text(manifest_path)?;
    let manifest: ManifestFile = parse_toml(&src, manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let schema = AttributeSchema::load(&root.join(&manifest.schema))?;
    if *manifest.class_count.get_ref() != schema.class_count() {
        return Err(Error::Parse {
            path: manifest_path.to_path_buf(),
            line: line_of(&src, manifest.class_count.span().start),
            message: format!(
                "manifest declares {} classes but schema {} has {}",
                manifest.class_count.get_ref(),
                manifest.schema,
                schema.class_count()
            ),
        });
    }
    let loaded = manifest
        .tracklet
        .par_iter()
        .map(|e| load_tracklet(&root.join(&e.get_ref().dir), e.get_ref().frames, &schema).map(|t| (e.get_ref().split, t)))
        .collect::<Result<Vec<_>>>()?;
    let mut dataset = Dataset {
        schema,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, t) in loaded {
        match split {
            Split::Train => dataset.train.push(t),
            Split::Test => dataset.test.push(t),
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            tracklets: 12,
            frames: 3,
            height: 8,
            width: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::default().validate().is_ok());
        assert_eq!(SyntheticSpec::default().train_count(), 500);
        for bad in [
            SyntheticSpec { train_fraction: 1.5, ..small() },
            SyntheticSpec { occlusion: 1.0, ..small() },
            SyntheticSpec { noise: -0.1, ..small() },
            SyntheticSpec { tracklets: 1, ..small() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Usage(_))));
        }
    }

    #[test]
    fn prototypes_are_normalised() {
        for p in prototypes(&small(), 5) {
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((rms - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_frames_repeat() {
        let spec = SyntheticSpec { noise: 0.0, occlusion: 0.0, ..small() };
        let d = generate(&spec, &AttributeSchema::default_mars()).unwrap();
        for t in d.train.iter().chain(&d.test) {
            assert!(t.frames.iter().all(|f| f == &t.frames[0]));
        }
    }

    #[test]
    fn labels_respect_groups() {
        let schema = AttributeSchema::default_mars();
        let d = generate(&small(), &schema).unwrap();
        assert_eq!(d.train.len(), 9);
        assert_eq!(d.test.len(), 3);
        for t in d.train.iter().chain(&d.test) {
            schema.check_labels(&t.labels).unwrap();
        }
    }

    #[test]
    fn occlusion_rate_is_binomial() {
        let spec = SyntheticSpec {
            tracklets: 1000,
            frames: 6,
            height: 2,
            width: 2,
            occlusion: 0.5,
            ..SyntheticSpec::default()
        };
        let (_, occluded) = generate_detailed(&spec, &AttributeSchema::default_mars()).unwrap();
        let counts: Vec<f64> = occluded.iter().map(|o| o.iter().filter(|&&b| b).count() as f64).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let std_err = (6.0f64 * 0.5 * 0.5).sqrt() / (counts.len() as f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * std_err, "mean {mean}");
    }

    fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in std::fs::read_dir(&dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn write_load_round_trip_and_determinism() {
        let schema = AttributeSchema::default_mars();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let manifest = generate_to_disk(&small(), &schema, a.path()).unwrap();
        generate_to_disk(&small(), &schema, b.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded, generate(&small(), &schema).unwrap());
    }

    #[test]
    fn load_errors_are_distinct() {
        let schema = AttributeSchema::default_mars();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_to_disk(&small(), &schema, dir.path()).unwrap();
        let frame = dir.path().join("train/t000000/000001.vtf");
        let bytes = std::fs::read(&frame).unwrap();
        std::fs::write(&frame, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        assert!(matches!(err, Error::CorruptFrame { .. }), "{err}");
        assert!(err.to_string().contains("000001.vtf"));
        std::fs::write(&frame, &bytes).unwrap();

        std::fs::remove_file(dir.path().join("test/t000011/000000.vtf")).unwrap();
        assert!(matches!(load_dataset(&manifest).unwrap_err(), Error::MissingFile { .. }));
        generate_to_disk(&small(), &schema, dir.path()).unwrap();

        let labels = dir.path().join("train/t000003/labels.toml");
        let text = std::fs::read_to_string(&labels).unwrap();
        std::fs::write(&labels, text.replacen("labels = [", "labels = [1, ", 1)).unwrap();
        assert!(matches!(load_dataset(&manifest).unwrap_err(), Error::LabelMismatch { line: 2, .. }));
        std::fs::write(&labels, text).unwrap();

        let src = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, src.replace("class_count = 43", "class_count = 40")).unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(err.to_string().contains("40"));
    }
}
