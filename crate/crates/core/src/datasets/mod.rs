//! Image datasets: the registry of loadable collections, synthetic generators,
//! augmentation for single-sample fine-tuning, and the separability gate that
//! admits dataset pairs into the benchmark.

mod augment;
mod formats;
mod gate;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use augment::{augment_batch, augment_batch_with, transform, AugmentPolicy, Transform};
pub use formats::read_mat_uint8;
pub use gate::{enumerate_pairs, simply_classified, DatasetPair, GateConfig, GATE_THRESHOLD};

/// Environment variable naming the raw data directory.
pub const DATA_ROOT_ENV: &str = "FTOOD_DATA_ROOT";

/// `$FTOOD_DATA_ROOT`, falling back to `./data`.
pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageShape {
    pub const GRAY28: ImageShape = ImageShape { h: 28, w: 28, c: 1 };
    pub const COLOR32: ImageShape = ImageShape { h: 32, w: 32, c: 3 };

    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn dims(&self) -> usize {
        self.h * self.w * self.c
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image in HWC order with 8-bit pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub id: String,
    pub shape: ImageShape,
    pub pixels: Vec<u8>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, shape: ImageShape, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != shape.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape} ({} values)", shape.dims()),
                actual: format!("{} values", pixels.len()),
            });
        }
        Ok(Self { id: id.into(), shape, pixels })
    }

    /// Pixel at row `i`, column `j`, channel `c`.
    pub fn at(&self, i: usize, j: usize, c: usize) -> u8 {
        self.pixels[(i * self.shape.w + j) * self.shape.c + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Noise,
    Constant,
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Noise => "noise",
            SyntheticKind::Constant => "constant",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Idx,
    Omniglot,
    Cifar10,
    Svhn,
    Synthetic(SyntheticKind),
}

#[derive(Clone, Copy, Debug)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub shape: ImageShape,
    pub source: Source,
    pub resize_rule: &'static str,
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry { name: "mnist", shape: ImageShape::GRAY28, source: Source::Idx, resize_rule: "none" },
    RegistryEntry { name: "fashion-mnist", shape: ImageShape::GRAY28, source: Source::Idx, resize_rule: "none" },
    RegistryEntry { name: "kmnist", shape: ImageShape::GRAY28, source: Source::Idx, resize_rule: "none" },
    RegistryEntry {
        name: "omniglot",
        shape: ImageShape::GRAY28,
        source: Source::Omniglot,
        resize_rule: "grayscale, invert (ink = 255), 105x105 -> 28x28 triangle filter",
    },
    RegistryEntry { name: "cifar10", shape: ImageShape::COLOR32, source: Source::Cifar10, resize_rule: "none" },
    RegistryEntry { name: "svhn", shape: ImageShape::COLOR32, source: Source::Svhn, resize_rule: "none" },
    RegistryEntry {
        name: "noise",
        shape: ImageShape::GRAY28,
        source: Source::Synthetic(SyntheticKind::Noise),
        resize_rule: "generated",
    },
    RegistryEntry {
        name: "constant",
        shape: ImageShape::GRAY28,
        source: Source::Synthetic(SyntheticKind::Constant),
        resize_rule: "generated",
    },
    RegistryEntry {
        name: "noise28",
        shape: ImageShape::GRAY28,
        source: Source::Synthetic(SyntheticKind::Noise),
        resize_rule: "generated",
    },
    RegistryEntry {
        name: "constant28",
        shape: ImageShape::GRAY28,
        source: Source::Synthetic(SyntheticKind::Constant),
        resize_rule: "generated",
    },
    RegistryEntry {
        name: "noise32",
        shape: ImageShape::COLOR32,
        source: Source::Synthetic(SyntheticKind::Noise),
        resize_rule: "generated",
    },
    RegistryEntry {
        name: "constant32",
        shape: ImageShape::COLOR32,
        source: Source::Synthetic(SyntheticKind::Constant),
        resize_rule: "generated",
    },
];

pub fn registry_entry(name: &str) -> Result<&'static RegistryEntry> {
    REGISTRY.iter().find(|e| e.name == name).ok_or_else(|| Error::UnknownDataset(name.to_string()))
}

/// Metadata written next to each loaded split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub split: Split,
    pub shape: ImageShape,
    pub size: usize,
    pub resize_rule: String,
    pub sha256: String,
    pub sources: Vec<String>,
}

struct Store {
    name: String,
    split: Split,
    shape: ImageShape,
    pixels: Vec<u8>,
}

/// An immutable, cheaply clonable view over a set of images. Views created by
/// `shuffled`, `take` or `subset` share the underlying pixel buffer.
#[derive(Clone)]
pub struct DatasetHandle {
    store: Arc<Store>,
    order: Arc<Vec<u32>>,
    label: String,
}

impl fmt::Debug for DatasetHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DatasetHandle")
            .field("name", &self.label)
            .field("split", &self.store.split)
            .field("shape", &self.store.shape)
            .field("len", &self.len())
            .finish()
    }
}

impl DatasetHandle {
    pub fn from_pixels(name: &str, split: Split, shape: ImageShape, pixels: Vec<u8>) -> Result<Self> {
        let d = shape.dims();
        if d == 0 || pixels.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("a multiple of {d} values"),
                actual: format!("{} values", pixels.len()),
            });
        }
        let n = pixels.len() / d;
        let store = Store { name: name.to_string(), split, shape, pixels };
        Ok(Self { store: Arc::new(store), order: Arc::new((0..n as u32).collect()), label: name.to_string() })
    }

    pub fn from_samples(name: &str, split: Split, shape: ImageShape, samples: &[ImageSample]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(samples.len() * shape.dims());
        for s in samples {
            if s.shape != shape {
                return Err(Error::ShapeMismatch { expected: shape.to_string(), actual: s.shape.to_string() });
            }
            pixels.extend_from_slice(&s.pixels);
        }
        Self::from_pixels(name, split, shape, pixels)
    }

    /// Display name; views derived by `renamed` carry their own label.
    pub fn name(&self) -> &str {
        &self.label
    }

    pub fn split(&self) -> Split {
        self.store.split
    }

    pub fn shape(&self) -> ImageShape {
        self.store.shape
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Raw HWC pixels of the `i`-th sample in iteration order.
    pub fn pixels(&self, i: usize) -> &[u8] {
        let d = self.store.shape.dims();
        let k = self.order[i] as usize;
        &self.store.pixels[k * d..(k + 1) * d]
    }

    /// Stable identifier: source name, split and position in the source file.
    pub fn id(&self, i: usize) -> String {
        format!("{}/{}/{}", self.store.name, self.store.split, self.order[i])
    }

    pub fn get(&self, i: usize) -> ImageSample {
        ImageSample { id: self.id(i), shape: self.store.shape, pixels: self.pixels(i).to_vec() }
    }

    pub fn iter(&self) -> impl Iterator<Item = ImageSample> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn samples(&self) -> Vec<ImageSample> {
        self.iter().collect()
    }

    fn with_order(&self, order: Vec<u32>) -> Self {
        Self { store: Arc::clone(&self.store), order: Arc::new(order), label: self.label.clone() }
    }

    /// Deterministic permutation of the iteration order.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut order = self.order.as_ref().clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.with_order(order)
    }

    pub fn take(&self, n: usize) -> Self {
        self.with_order(self.order.iter().take(n).copied().collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        self.with_order(idx.iter().map(|&i| self.order[i]).collect())
    }

    pub fn renamed(&self, label: &str) -> Self {
        Self { store: Arc::clone(&self.store), order: Arc::clone(&self.order), label: label.to_string() }
    }

    /// Split into two disjoint halves after a seeded shuffle; used to build
    /// same-distribution control pairs such as "mnist vs mnist-resplit".
    pub fn resplit(&self, seed: u64) -> (Self, Self) {
        let s = self.shuffled(seed);
        let half = s.len() / 2;
        let a = s.with_order(s.order[..half].to_vec());
        let b = s.with_order(s.order[half..].to_vec()).renamed(&format!("{}-resplit", self.label));
        (a, b)
    }

    /// SHA-256 over the pixels in iteration order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for i in 0..self.len() {
            h.update(self.pixels(i));
        }
        hex::encode(h.finalize())
    }

    pub fn mean_pixel(&self) -> f64 {
        let mut sum = 0u64;
        for i in 0..self.len() {
            sum += self.pixels(i).iter().map(|&p| p as u64).sum::<u64>();
        }
        sum as f64 / (self.len() * self.shape().dims()).max(1) as f64
    }
}

/// Load a registered dataset split from `root` in file order.
///
/// Synthetic names are rejected; use [`make_synthetic`] for those. A
/// `<name>.<split>.meta.json` file describing the split is written into the
/// dataset directory when that directory is writable.
pub fn load_dataset(name: &str, split: Split, root: &Path) -> Result<DatasetHandle> {
    let entry = registry_entry(name)?;
    let dir = root.join(name);
    let (pixels, sources) = match entry.source {
        Source::Synthetic(_) => return Err(Error::SyntheticNotLoadable(name.to_string())),
        Source::Idx => formats::load_idx(&dir, split)?,
        Source::Omniglot => formats::load_omniglot(&dir, split)?,
        Source::Cifar10 => formats::load_cifar10(&dir, split)?,
        Source::Svhn => formats::load_svhn(&dir, split)?,
    };
    let handle = DatasetHandle::from_pixels(name, split, entry.shape, pixels)?;
    let meta = DatasetMeta {
        name: name.to_string(),
        split,
        shape: entry.shape,
        size: handle.len(),
        resize_rule: entry.resize_rule.to_string(),
        sha256: handle.checksum(),
        sources: sources.iter().map(|p| p.display().to_string()).collect(),
    };
    let meta_path = dir.join(format!("{name}.{split}.meta.json"));
    if let Err(e) = std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?) {
        log::debug!("could not write {}: {e}", meta_path.display());
    }
    Ok(handle)
}

/// Generate `n` synthetic images. Noise images draw every pixel uniformly
/// from 0..=255; constant images repeat one uniformly drawn value.
pub fn make_synthetic(kind: SyntheticKind, shape: ImageShape, n: usize, seed: u64) -> Result<DatasetHandle> {
    make_synthetic_split(kind, shape, n, seed, Split::Train)
}

pub fn make_synthetic_split(
    kind: SyntheticKind,
    shape: ImageShape,
    n: usize,
    seed: u64,
    split: Split,
) -> Result<DatasetHandle> {
    if n == 0 {
        return Err(Error::precondition("synthetic dataset needs n > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shape.dims();
    let mut pixels = vec![0u8; n * d];
    match kind {
        SyntheticKind::Noise => rng.fill(pixels.as_mut_slice()),
        SyntheticKind::Constant => {
            for img in pixels.chunks_exact_mut(d) {
                img.fill(rng.random::<u8>());
            }
        }
    }
    let name = format!("{}{}", kind.as_str(), shape.h);
    DatasetHandle::from_pixels(&name, split, shape, pixels)
}

/// Resolves dataset names for experiments: registered files are loaded from
/// the data root, synthetic names are generated with split-specific seeds.
#[derive(Clone, Debug)]
pub struct DatasetResolver {
    pub root: PathBuf,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub seed: u64,
}

impl DatasetResolver {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), synthetic_train: 8000, synthetic_test: 2000, seed: 0 }
    }

    pub fn resolve(&self, name: &str, split: Split) -> Result<DatasetHandle> {
        let entry = registry_entry(name)?;
        match entry.source {
            Source::Synthetic(kind) => {
                let (n, salt) = match split {
                    Split::Train => (self.synthetic_train, 0),
                    Split::Test => (self.synthetic_test, 1),
                };
                let h = Sha256::digest(format!("{name}/{}", self.seed));
                let base = u64::from_le_bytes(h[..8].try_into().unwrap());
                Ok(make_synthetic_split(kind, entry.shape, n, base.wrapping_add(salt), split)?.renamed(name))
            }
            _ => Ok(load_dataset(name, split, &self.root)?.renamed(name)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_rejected_by_loader() {
        let err = load_dataset("noise", Split::Test, Path::new("data")).unwrap_err();
        assert!(matches!(err, Error::SyntheticNotLoadable(_)));
        assert!(matches!(load_dataset("imagenet", Split::Test, Path::new("data")), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn constant_images_are_flat() {
        let d = make_synthetic(SyntheticKind::Constant, ImageShape::GRAY28, 1, 9).unwrap();
        let px = d.pixels(0);
        assert_eq!(px.iter().min(), px.iter().max());
    }

    #[test]
    fn noise_mean_is_near_midpoint() {
        let d = make_synthetic(SyntheticKind::Noise, ImageShape::GRAY28, 1000, 3).unwrap();
        let m = d.mean_pixel();
        assert!((120.0..=135.0).contains(&m), "{m}");
    }

    #[test]
    fn synthetic_is_a_pure_function_of_its_inputs() {
        for kind in [SyntheticKind::Noise, SyntheticKind::Constant] {
            let a = make_synthetic(kind, ImageShape::COLOR32, 20, 5).unwrap();
            let b = make_synthetic(kind, ImageShape::COLOR32, 20, 5).unwrap();
            let c = make_synthetic(kind, ImageShape::COLOR32, 20, 6).unwrap();
            assert_eq!(a.checksum(), b.checksum());
            assert_ne!(a.checksum(), c.checksum());
        }
        assert!(make_synthetic(SyntheticKind::Noise, ImageShape::GRAY28, 0, 1).is_err());
    }

    #[test]
    fn resolver_splits_are_disjoint_and_deterministic() {
        let r = DatasetResolver { synthetic_train: 30, synthetic_test: 10, ..DatasetResolver::new("data") };
        let tr = r.resolve("noise28", Split::Train).unwrap();
        let te = r.resolve("noise28", Split::Test).unwrap();
        assert_eq!(tr.len(), 30);
        assert_ne!(tr.checksum(), te.take(10).checksum());
        let ids_tr: std::collections::HashSet<_> = (0..tr.len()).map(|i| tr.id(i)).collect();
        assert!((0..te.len()).all(|i| !ids_tr.contains(&te.id(i))));
        assert_eq!(te.checksum(), r.resolve("noise28", Split::Test).unwrap().checksum());
    }

    #[test]
    fn views_share_storage_and_shuffle_deterministically() {
        let d = make_synthetic(SyntheticKind::Noise, ImageShape::GRAY28, 50, 1).unwrap();
        assert_eq!(d.shuffled(4).checksum(), d.shuffled(4).checksum());
        assert_ne!(d.shuffled(4).checksum(), d.checksum());
        let (a, b) = d.resplit(2);
        assert_eq!(a.len() + b.len(), 50);
        assert_eq!(b.name(), "noise28-resplit");
        let sub = d.subset(&[3, 1]);
        assert_eq!(sub.pixels(0), d.pixels(3));
        assert_eq!(sub.id(1), d.id(1));
    }

    #[test]
    fn sample_shape_is_checked() {
        assert!(ImageSample::new("x", ImageShape::GRAY28, vec![0; 10]).is_err());
        assert!(ImageSample::new("x", ImageShape::new(2, 2, 1), vec![0; 4]).is_ok());
    }
}
