//! Image datasets: PCam ingestion, synthetic textures, augmentation and
//! labelled-subset sampling.

mod augment;
mod png_dir;
#[cfg(feature = "pcam")]
mod pcam;
mod synthetic;

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Real;

pub use augment::{augment, Dihedral};
pub use png_dir::{export_png_dir, import_png_dir, MANIFEST_FILE};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Published PCam split sizes.
pub const PCAM_TRAIN: usize = 262_144;
pub const PCAM_VALID: usize = 32_768;
pub const PCAM_TEST: usize = 32_768;
pub const PCAM_IMAGE_SIZE: usize = 96;

/// Smallest side length accepted for dataset images.
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => bail!(InvalidArgument, "unknown split `{other}`"),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An RGB image stored row-major as `height × width × 3` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub label: Option<u8>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<u8>, label: Option<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            bail!(
                Format,
                "{}x{} RGB image needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            );
        }
        if let Some(l) = label {
            if l > 1 {
                bail!(Format, "label {l} is not binary");
            }
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
            label,
        })
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Side length; only meaningful for square images.
    pub fn size(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-first floats, centred and scaled to roughly unit range.
    pub fn to_chw<T: Real>(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = T::lit((px[c] as f64 - 127.5) / 64.0);
            }
        }
        out
    }

    fn check_dataset_shape(&self) -> Result<()> {
        if !self.is_square() {
            bail!(Format, "image `{}` is {}x{}, not square", self.id, self.height, self.width);
        }
        if self.height < MIN_IMAGE_SIZE {
            bail!(Format, "image `{}` is smaller than {MIN_IMAGE_SIZE} pixels", self.id);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub source: String,
}

#[derive(Clone, Debug)]
pub struct DatasetStore {
    pub meta: DatasetMeta,
    pub train: Vec<ImageSample>,
    pub valid: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl DatasetStore {
    /// Builds a store, checking image shapes and id uniqueness across splits.
    pub fn new(
        meta: DatasetMeta,
        train: Vec<ImageSample>,
        valid: Vec<ImageSample>,
        test: Vec<ImageSample>,
    ) -> Result<Self> {
        let store = Self {
            meta,
            train,
            valid,
            test,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for s in self.split(split) {
                s.check_dataset_shape()?;
                if s.size() != self.meta.image_size {
                    bail!(
                        Format,
                        "image `{}` is {} pixels, dataset declares {}",
                        s.id,
                        s.size(),
                        self.meta.image_size
                    );
                }
                if !seen.insert(s.id.as_str()) {
                    bail!(Format, "sample id `{}` appears more than once", s.id);
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Train samples with the given ids, in the order of `ids`.
    pub fn select_train(&self, ids: &[String]) -> Result<Vec<ImageSample>> {
        let by_id: std::collections::HashMap<&str, &ImageSample> =
            self.train.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| crate::Error::InvalidArgument(format!("no train sample `{id}`")))
            })
            .collect()
    }
}

/// Draws a class-stratified subset of `n` labelled train ids without
/// replacement. Class counts differ by at most one whenever both classes hold
/// enough samples; otherwise the smaller class is exhausted and the rest is
/// filled from the larger.
pub fn sample_label_subset(store: &DatasetStore, n: usize, seed: u64) -> Result<Vec<String>> {
    let mut by_class: [Vec<&ImageSample>; 2] = [Vec::new(), Vec::new()];
    for s in &store.train {
        if let Some(l) = s.label {
            by_class[l as usize].push(s);
        }
    }
    let available = by_class[0].len() + by_class[1].len();
    if n > available {
        bail!(
            InvalidArgument,
            "requested {n} labelled samples but the train split holds {available}"
        );
    }
    if n == 0 {
        bail!(InvalidArgument, "subset size must be at least 1");
    }
    if by_class.iter().any(Vec::is_empty) {
        bail!(
            Stratification,
            "train split holds a single class ({} / {}); cannot stratify",
            by_class[0].len(),
            by_class[1].len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in by_class.iter_mut() {
        group.shuffle(&mut rng);
    }
    let odd_to = usize::from(rand::Rng::random_bool(&mut rng, 0.5));
    let mut quota = [n / 2, n / 2];
    quota[odd_to] += n % 2;
    for c in 0..2 {
        let short = quota[c].saturating_sub(by_class[c].len());
        quota[c] -= short;
        quota[1 - c] += short;
    }
    let mut ids: Vec<String> = by_class
        .iter()
        .zip(quota)
        .flat_map(|(g, q)| g[..q].iter().map(|s| s.id.clone()))
        .collect();
    ids.shuffle(&mut rng);
    Ok(ids)
}

/// Moves `round(fraction × |train|)` randomly chosen train samples into a
/// fresh validation split. The test split is untouched.
pub fn split_train_val(store: &DatasetStore, fraction: f64, seed: u64) -> Result<DatasetStore> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(InvalidArgument, "validation fraction {fraction} outside (0, 1)");
    }
    let n = store.train.len();
    let n_valid = validation_count(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_valid = vec![false; n];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let valid = order[..n_valid].iter().map(|&i| store.train[i].clone()).collect();
    let train = store
        .train
        .iter()
        .zip(&is_valid)
        .filter(|(_, v)| !**v)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(DatasetStore {
        meta: store.meta.clone(),
        train,
        valid,
        test: store.test.clone(),
    })
}

pub fn validation_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Reads the PCam HDF5 sextet from `dir`.
#[cfg(feature = "pcam")]
pub fn load_pcam(dir: impl AsRef<std::path::Path>) -> Result<DatasetStore> {
    pcam::load(dir.as_ref())
}

#[cfg(not(feature = "pcam"))]
pub fn load_pcam(dir: impl AsRef<std::path::Path>) -> Result<DatasetStore> {
    let _ = dir;
    bail!(Ingestion, "built without the `pcam` feature; HDF5 input unavailable")
}

/// File names of the published PCam sextet, as `(split, images, labels)`.
pub fn pcam_file_names() -> [(Split, String, String); 3] {
    Split::ALL.map(|s| {
        (
            s,
            format!("camelyonpatch_level_2_split_{}_x.h5", s.as_str()),
            format!("camelyonpatch_level_2_split_{}_y.h5", s.as_str()),
        )
    })
}
