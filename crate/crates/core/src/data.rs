//! Labeled image datasets: synthetic generation, persistence, manifests and
//! failure sets.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::LabeledBatch;
use crate::corruption::CorruptionSpec;
use crate::tensor::{derive_seed, digest_u64, Tensor};

pub const MAGIC: [u8; 4] = *b"CFDS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 * 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: {section} needs {needed} bytes, {available} left")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("label {label} at index {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: u32, classes: usize },
    #[error("example id {0} appears more than once")]
    DuplicateId(u64),
    #[error("unknown example id {0}")]
    UnknownId(u64),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("failure set line {line}: {reason}")]
    FailureSet { line: usize, reason: String },
    #[error("invalid generator arguments: {0}")]
    Generator(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// `n` images of shape `[channels, height, width]` with labels and unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    dims: [usize; 3],
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<u32>,
    ids: Vec<u64>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        dims: [usize; 3],
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<u32>,
        ids: Vec<u64>,
    ) -> Result<Self, DataError> {
        let n = labels.len();
        let per = dims.iter().product::<usize>();
        if ids.len() != n {
            return Err(DataError::Inconsistent(format!("{} ids for {n} labels", ids.len())));
        }
        if images.len() != n * per {
            return Err(DataError::Inconsistent(format!(
                "{} pixel values for {n} images of {per}",
                images.len()
            )));
        }
        if num_classes == 0 {
            return Err(DataError::Inconsistent("num_classes must be positive".into()));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes: num_classes,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(*id) {
                return Err(DataError::DuplicateId(*id));
            }
        }
        Ok(Self {
            name: name.into(),
            dims,
            num_classes,
            images,
            labels,
            ids,
        })
    }

    pub fn empty(name: impl Into<String>, dims: [usize; 3], num_classes: usize) -> Self {
        Self {
            name: name.into(),
            dims,
            num_classes,
            images: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub(crate) fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let per = self.image_len();
        &mut self.images[i * per..(i + 1) * per]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn index_by_id(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect()
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            name: self.name.clone(),
            dims: self.dims,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Examples with the given ids, in the order given.
    pub fn select_ids(&self, ids: &[u64]) -> Result<Self, DataError> {
        let index = self.index_by_id();
        let indices = ids
            .iter()
            .map(|id| index.get(id).copied().ok_or(DataError::UnknownId(*id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.subset(&indices))
    }

    /// Union of two datasets with disjoint ids.
    pub fn concat(&self, other: &Self) -> Result<Self, DataError> {
        if self.dims != other.dims || self.num_classes != other.num_classes {
            return Err(DataError::Inconsistent(format!(
                "cannot join {:?}/{} with {:?}/{}",
                self.dims, self.num_classes, other.dims, other.num_classes
            )));
        }
        let mut images = self.images.clone();
        images.extend_from_slice(&other.images);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        Self::new(self.name.clone(), self.dims, self.num_classes, images, labels, ids)
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image(i).iter().map(|v| *v as f64));
        }
        let [c, h, w] = self.dims;
        LabeledBatch {
            images: Tensor::new(vec![indices.len(), c, h, w], data),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }

    pub fn to_batch(&self) -> LabeledBatch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        digest_u64(h)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() * 4 + n * 12 + 4 + self.name.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for v in &self.images {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < HEADER_LEN {
            return Err(DataError::Header(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(DataError::Header(format!("bad magic {:?}", &bytes[..4])));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(DataError::Header(format!("unsupported version {version}")));
        }
        let n = r.u64("header")?;
        let dims = [r.u32("header")? as usize, r.u32("header")? as usize, r.u32("header")? as usize];
        let num_classes = r.u32("header")? as usize;
        if num_classes == 0 {
            return Err(DataError::Header("num_classes is zero".into()));
        }
        let n = usize::try_from(n).map_err(|_| DataError::Header(format!("count {n} too large")))?;
        let per = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .and_then(|p| p.checked_mul(n))
            .ok_or_else(|| DataError::Header(format!("size {n} x {dims:?} overflows")))?;

        let images = r
            .take("images", per, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels: Vec<u32> = r
            .take("labels", n, 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ids = r
            .take("ids", n, 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let name_len = r.u32("name")? as usize;
        let name = r.take("name", name_len, 1)?;
        let name = std::str::from_utf8(name)
            .map_err(|_| DataError::Inconsistent("split name is not utf-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(DataError::TrailingBytes(bytes.len() - r.pos));
        }
        Self::new(name, dims, num_classes, images, labels, ids)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_bytes()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, section: &'static str, count: usize, width: usize) -> Result<&'a [u8], DataError> {
        let available = self.bytes.len() - self.pos;
        let needed = count.saturating_mul(width);
        if needed > available {
            return Err(DataError::Truncated {
                section,
                needed,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + needed];
        self.pos += needed;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(section, 1, 4)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(section, 1, 8)?.try_into().unwrap()))
    }
}

/// Train, validation and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Split sizes per class: validation and test each get 15% (at least one),
/// training gets the rest.
pub fn split_counts(per_class: usize) -> (usize, usize, usize) {
    let held = (per_class * 15 / 100).max(1);
    (per_class - 2 * held, held, held)
}

/// Per-example appearance ranges of the synthetic gratings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticStyle {
    pub amplitude: (f64, f64),
    /// Brightness offsets are drawn from `[-offset, offset]`.
    pub offset: f64,
    /// Orientation wobble in radians, drawn from `[-wobble, wobble]`.
    pub wobble: f64,
    pub pixel_noise: f64,
    /// Grating frequencies in cycles per image width.
    pub frequencies: Vec<f64>,
    /// Distinct orientations; `None` gives every class its own.
    pub orientations: Option<usize>,
    /// Amplitude multipliers, indexed like `frequencies`.
    pub gains: Vec<f64>,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            amplitude: (0.05, 0.08),
            offset: 0.08,
            wobble: 0.12,
            pixel_noise: 0.02,
            frequencies: vec![2.5],
            orientations: Some(2),
            gains: vec![1.0, 2.5],
        }
    }
}

/// Class-conditional oriented gratings with per-example jitter: random
/// phase, amplitude, brightness offset, a small orientation wobble and mild
/// pixel noise. Ids are unique across the three splits.
pub fn generate_synthetic(num_classes: usize, per_class: usize, h: usize, w: usize, seed: u64) -> Result<Splits, DataError> {
    generate_synthetic_with(&SyntheticStyle::default(), num_classes, per_class, h, w, seed)
}

pub fn generate_synthetic_with(
    style: &SyntheticStyle,
    num_classes: usize,
    per_class: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Splits, DataError> {
    if per_class < 3 {
        return Err(DataError::Generator(format!("per_class = {per_class}, need at least 3")));
    }
    if num_classes == 0 || h == 0 || w == 0 {
        return Err(DataError::Generator("num_classes, h and w must be positive".into()));
    }
    let (lo, hi) = style.amplitude;
    if !(0.0 <= lo && lo <= hi)
        || style.offset < 0.0
        || style.wobble < 0.0
        || style.pixel_noise < 0.0
        || style.frequencies.is_empty()
        || style.gains.is_empty()
        || style.orientations == Some(0)
    {
        return Err(DataError::Generator(format!("invalid style {style:?}")));
    }
    let (n_train, n_val, _) = split_counts(per_class);
    let dims = [1, h, w];
    let mut parts: [(Vec<f32>, Vec<u32>, Vec<u64>); 3] = Default::default();
    let pixel_noise = Normal::new(0.0, style.pixel_noise).expect("non-negative sigma");
    for class in 0..num_classes {
        let (theta, freq, gain) = class_pattern(style, class, num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synthetic/class{class}")));
        for j in 0..per_class {
            let id = (class * per_class + j) as u64;
            let split = if j < n_train {
                0
            } else if j < n_train + n_val {
                1
            } else {
                2
            };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = gain * rng.gen_range(lo..=hi);
            let offset = rng.gen_range(-style.offset..=style.offset);
            let th = theta + rng.gen_range(-style.wobble..=style.wobble);
            let (s, c) = th.sin_cos();
            let part = &mut parts[split];
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * c + y as f64 * s) / w as f64;
                    let v = 0.5 + offset + amp * (std::f64::consts::TAU * freq * u + phase).sin() + pixel_noise.sample(&mut rng);
                    part.0.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            part.1.push(class as u32);
            part.2.push(id);
        }
    }
    let [train, val, test] = parts;
    let make = |name: &str, (images, labels, ids): (Vec<f32>, Vec<u32>, Vec<u64>)| {
        LabeledDataset::new(name, dims, num_classes, images, labels, ids)
    };
    Ok(Splits {
        train: make("train", train)?,
        val: make("val", val)?,
        test: make("test", test)?,
    })
}

/// Orientation, frequency and gain of a class's base grating.
fn class_pattern(style: &SyntheticStyle, class: usize, num_classes: usize) -> (f64, f64, f64) {
    let (theta, group) = match style.orientations {
        None => (std::f64::consts::PI * class as f64 / num_classes as f64, class),
        Some(n) => (std::f64::consts::PI * (class % n) as f64 / n as f64, class / n),
    };
    let f = &style.frequencies;
    let g = &style.gains;
    (theta, f[group % f.len()], g[group % g.len()])
}

/// Plain-text listing of split names and dataset paths, one `name path`
/// pair per line. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, PathBuf)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(name, path)| format!("{name} {}\n", path.display()))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut entries: Vec<(String, PathBuf)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((name, path)) = line.split_once(char::is_whitespace) else {
                return Err(DataError::Manifest {
                    line: i + 1,
                    reason: "expected `name path`".into(),
                });
            };
            if entries.iter().any(|(n, _)| n == name) {
                return Err(DataError::Manifest {
                    line: i + 1,
                    reason: format!("split {name:?} listed twice"),
                });
            }
            entries.push((name.to_string(), PathBuf::from(path.trim())));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Path> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_path())
    }

    /// Loads a manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut manifest = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (_, p) in &mut manifest.entries {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(manifest)
    }

    pub fn load_split(&self, name: &str) -> Result<LabeledDataset, DataError> {
        let path = self.get(name).ok_or_else(|| DataError::Manifest {
            line: 0,
            reason: format!("no split named {name:?}"),
        })?;
        LabeledDataset::load(path)
    }
}

/// Ids of examples a model misclassified on a (possibly corrupted) split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FailureSet {
    pub parent: String,
    pub corruption: Option<CorruptionSpec>,
    pub model_hash: u64,
    pub ids: Vec<u64>,
}

impl FailureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("parent {}\n", self.parent);
        match &self.corruption {
            Some(spec) => out.push_str(&format!("corruption {spec}\n")),
            None => out.push_str("corruption none\n"),
        }
        out.push_str(&format!("model {:016x}\n", self.model_hash));
        out.push_str(&format!("count {}\n", self.ids.len()));
        for id in &self.ids {
            out.push_str(&format!("{id}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let err = |line: usize, reason: String| DataError::FailureSet { line, reason };
        let mut lines = text.lines().enumerate();
        let mut field = |key: &str| -> Result<String, DataError> {
            let (i, line) = lines.next().ok_or_else(|| err(0, format!("missing `{key}` line")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| err(i + 1, format!("expected `{key} ...`")))
        };
        let parent = field("parent")?;
        let corruption = match field("corruption")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|e| err(2, format!("{e}")))?),
        };
        let model_hash = u64::from_str_radix(&field("model")?, 16).map_err(|e| err(3, e.to_string()))?;
        let count: usize = field("count")?.parse().map_err(|_| err(4, "bad count".into()))?;
        let mut ids = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let id: u64 = line.parse().map_err(|_| err(i + 1, format!("bad id {line:?}")))?;
            if !seen.insert(id) {
                return Err(DataError::DuplicateId(id));
            }
            ids.push(id);
        }
        if ids.len() != count {
            return Err(err(4, format!("count says {count}, found {} ids", ids.len())));
        }
        Ok(Self {
            parent,
            corruption,
            model_hash,
            ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Failures not in `selection`, keeping the original order.
pub fn exclude(failures: &FailureSet, selection: &[u64]) -> Result<FailureSet, DataError> {
    let members: HashSet<u64> = failures.ids.iter().copied().collect();
    if let Some(id) = selection.iter().find(|id| !members.contains(id)) {
        return Err(DataError::UnknownId(*id));
    }
    let drop: HashSet<u64> = selection.iter().copied().collect();
    Ok(FailureSet {
        ids: failures.ids.iter().copied().filter(|id| !drop.contains(id)).collect(),
        ..failures.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Splits {
        generate_synthetic(4, 100, 8, 8, 3).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = small();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (280, 60, 60));
        assert_eq!(split_counts(3), (1, 1, 1));
        assert_eq!(split_counts(20), (14, 3, 3));
        assert!(generate_synthetic(4, 2, 8, 8, 0).is_err());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        assert_eq!(small(), small());
        assert_ne!(small().train, generate_synthetic(4, 100, 8, 8, 4).unwrap().train);
    }

    #[test]
    fn splits_are_disjoint_and_in_range() {
        let s = small();
        let mut all = HashSet::new();
        for d in [&s.train, &s.val, &s.test] {
            for id in d.ids() {
                assert!(all.insert(*id));
            }
            assert!(d.images().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(d.labels().iter().all(|l| *l < 4));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = small().val;
        let p = dir.path().join("val.bin");
        d.save(&p).unwrap();
        let back = LabeledDataset::load(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), d.to_bytes());
        assert!(back.images().iter().zip(d.images()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let d = LabeledDataset::empty("none", [1, 4, 4], 3);
        assert_eq!(LabeledDataset::from_bytes(&d.to_bytes()).unwrap(), d);
    }

    #[test]
    fn truncation_and_corruption_reported_distinctly() {
        let d = small().test;
        let bytes = d.to_bytes();
        assert!(matches!(
            LabeledDataset::from_bytes(&bytes[..bytes.len() - 10]),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(LabeledDataset::from_bytes(&bytes[..10]), Err(DataError::Header(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(LabeledDataset::from_bytes(&bad_magic), Err(DataError::Header(_))));
        let mut bad_label = bytes.clone();
        let label_at = HEADER_LEN + d.images().len() * 4;
        bad_label[label_at..label_at + 4].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            LabeledDataset::from_bytes(&bad_label),
            Err(DataError::LabelOutOfRange { index: 0, label: 9, .. })
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(LabeledDataset::from_bytes(&trailing), Err(DataError::TrailingBytes(1))));
    }

    #[test]
    fn constructor_rejects_duplicates() {
        let r = LabeledDataset::new("x", [1, 1, 1], 2, vec![0.0, 0.0], vec![0, 1], vec![5, 5]);
        assert!(matches!(r, Err(DataError::DuplicateId(5))));
    }

    #[test]
    fn select_and_concat() {
        let s = small();
        let picked = s.test.select_ids(&[s.test.id(3), s.test.id(0)]).unwrap();
        assert_eq!(picked.ids(), &[s.test.id(3), s.test.id(0)]);
        assert_eq!(picked.image(0), s.test.image(3));
        assert!(matches!(s.test.select_ids(&[1_000_000]), Err(DataError::UnknownId(_))));
        let joined = s.train.concat(&s.val).unwrap();
        assert_eq!(joined.len(), 340);
        assert!(s.val.concat(&s.val).is_err());
        let b = picked.to_batch();
        assert_eq!(b.images.shape(), &[2, 1, 8, 8]);
        assert_eq!(b.labels[0], s.test.label(3) as usize);
    }

    #[test]
    fn manifest_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            entries: vec![("train".into(), "train.bin".into()), ("test".into(), "sub/test.bin".into())],
        };
        let p = dir.path().join("manifest.txt");
        fs::write(&p, format!("# splits\n{}", m.to_text())).unwrap();
        let loaded = Manifest::load(&p).unwrap();
        assert_eq!(loaded.get("test").unwrap(), dir.path().join("sub/test.bin"));
        assert!(Manifest::parse("train a\ntrain b\n").is_err());
        assert!(Manifest::parse("lonely\n").is_err());
    }

    fn failures() -> FailureSet {
        FailureSet {
            parent: "test".into(),
            corruption: Some("box_blur:4:1".parse().unwrap()),
            model_hash: 0xabc,
            ids: vec![7, 3, 11, 2],
        }
    }

    #[test]
    fn failure_set_text_round_trip() {
        let f = failures();
        assert_eq!(FailureSet::parse(&f.to_text()).unwrap(), f);
        let clean = FailureSet { corruption: None, ..f };
        assert_eq!(FailureSet::parse(&clean.to_text()).unwrap(), clean);
        assert!(FailureSet::parse("parent t\ncorruption none\nmodel 0\ncount 2\n1\n").is_err());
    }

    #[test]
    fn exclude_cases() {
        let f = failures();
        assert_eq!(exclude(&f, &[]).unwrap(), f);
        assert!(exclude(&f, &[7, 3, 11, 2]).unwrap().is_empty());
        let r = exclude(&f, &[3, 2]).unwrap();
        assert_eq!(r.ids, vec![7, 11]);
        assert_eq!(r.len(), f.len() - 2);
        assert!(matches!(exclude(&f, &[99]), Err(DataError::UnknownId(99))));
    }

    /// Flatten, hidden ReLU layer, linear head.
    fn two_layer(input: usize, hidden: usize, classes: usize, seed: u64) -> crate::autodiff::ComputeGraph {
        use crate::autodiff::{ComputeGraph, SlotTag};
        use crate::tensor::Tensor;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let bound = (6.0 / cols as f64).sqrt();
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let (w1, w2) = (init(hidden, input), init(classes, hidden));
        let mut g = ComputeGraph::new(&[1, input, 1]);
        let x = g.scale_shift(g.input(), 10.0, -5.0).unwrap();
        let x = g.flatten(x).unwrap();
        let w1 = g.param("w1", SlotTag::Weight, w1);
        let b1 = g.param("b1", SlotTag::Weight, Tensor::zeros(&[hidden]));
        let h = g.affine(x, w1, b1).unwrap();
        let h = g.relu(h).unwrap();
        let w2 = g.param("w2", SlotTag::Weight, w2);
        let b2 = g.param("b2", SlotTag::Weight, Tensor::zeros(&[classes]));
        let y = g.affine(h, w2, b2).unwrap();
        g.set_output(y);
        g
    }

    #[test]
    fn two_layer_baseline_learns_clean_split() {
        let s = generate_synthetic(4, 200, 12, 12, 0).unwrap();
        let flat = |d: &LabeledDataset| {
            LabeledDataset::new(&d.name, [1, 144, 1], 4, d.images().to_vec(), d.labels().to_vec(), d.ids().to_vec()).unwrap()
        };
        let (train, test) = (flat(&s.train), flat(&s.test));
        let mut model = two_layer(144, 64, 4, 1);
        let cfg = crate::bilevel::SearchConfig {
            batch_size: 16,
            lr_w: 0.02,
            ..Default::default()
        };
        crate::bilevel::train_weights(&mut model, &train, 30, &cfg).unwrap();
        let acc = crate::bilevel::accuracy(&model, &test).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
    }
}
