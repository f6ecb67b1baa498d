//! Source/target data for desk-scale experiments.

mod idx;
mod shift;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use idx::{read_idx, write_idx, IdxArray};
pub use shift::{
    corrupt, shift_image, shift_spectrum, synth_domain_pair, DomainShiftSpec, ShiftKind, BLUR_SIGMA, CONTRAST_FACTOR,
    DEFAULT_BAND_RADIUS, LOWFREQ_SCALE, NOISE_SIGMA, PIXELATE_FRACTION,
};

use crate::error::{Result, SadaError};
use crate::grid::{write_json, Fingerprinter};
use crate::spectral::{Image, Shape};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled images of one shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub count: usize,
    pub shape: Shape,
    pub fingerprint: String,
    pub class_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(SadaError::shape(format!("{} labels", images.len()), format!("{} labels", labels.len())));
        }
        if let Some(first) = images.first() {
            let shape = first.shape();
            if let Some((i, bad)) = images.iter().enumerate().find(|(_, im)| im.shape() != shape) {
                return Err(SadaError::shape(shape.to_string(), format!("image {i}: {}", bad.shape())));
            }
        }
        Ok(Dataset { name: name.into(), split, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.images.first().map(|i| i.shape())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Content hash over shapes, pixels and labels; name and split are
    /// metadata and do not contribute.
    pub fn fingerprint(&self) -> String {
        let mut h = Fingerprinter::new("dataset");
        h.usize(self.len());
        for (img, &y) in self.images.iter().zip(&self.labels) {
            let s = img.shape();
            h.usize(s.channels).usize(s.height).usize(s.width).f64s(img.data()).usize(y);
        }
        h.finish()
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            split: self.split,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }

    pub fn to_rgb(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.iter().map(Image::to_rgb).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut class_counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            class_counts[y] += 1;
        }
        DatasetManifest {
            name: self.name.clone(),
            split: self.split,
            count: self.len(),
            shape: self.shape().unwrap_or(Shape::new(0, 0, 0)),
            fingerprint: self.fingerprint(),
            class_counts,
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        write_json(path, &self.manifest())
    }

    /// Quantizes pixels to bytes and writes an image/label IDX pair.
    pub fn save_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        let shape = self.shape().ok_or(SadaError::EmptyDataset)?;
        let mut dims = vec![self.len()];
        if shape.channels == 1 {
            dims.extend([shape.height, shape.width]);
        } else {
            dims.extend([shape.channels, shape.height, shape.width]);
        }
        let data = self
            .images
            .iter()
            .flat_map(|im| im.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        write_idx(images_path, &IdxArray::new(dims, data)?)?;
        let labels = self
            .labels
            .iter()
            .map(|&y| u8::try_from(y).map_err(|_| SadaError::InvalidInput(format!("label {y} does not fit a byte"))))
            .collect::<Result<Vec<u8>>>()?;
        write_idx(labels_path, &IdxArray::new(vec![self.len()], labels)?)
    }
}

/// Options for [`load_idx`].
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Replicate grayscale images into three channels.
    pub rgb: bool,
    pub name: Option<String>,
}

/// Loads an image/label IDX pair, scaling bytes to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let images = read_idx(images_path)?;
    let labels = read_idx(labels_path)?;
    let shape = match images.dims[..] {
        [_, h, w] => Shape::new(1, h, w),
        [_, c, h, w] => Shape::new(c, h, w),
        _ => {
            return Err(SadaError::Parse {
                offset: 3,
                message: format!(
                    "{}: expected a rank-3 or rank-4 image array, got dims {:?}",
                    images_path.display(),
                    images.dims
                ),
            })
        }
    };
    shape.validate()?;
    if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(SadaError::shape(format!("{} labels", images.dims[0]), format!("label dims {:?}", labels.dims)));
    }
    let imgs = images
        .data
        .chunks(shape.len())
        .map(|chunk| {
            let img = Image::new(shape, chunk.iter().map(|&b| b as f64 / 255.0).collect())?;
            Ok(if options.rgb { img.to_rgb() } else { img })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = options
        .name
        .clone()
        .unwrap_or_else(|| images_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default());
    Dataset::new(name, Split::Train, imgs, labels.data.iter().map(|&y| y as usize).collect())
}

/// Seeded, fingerprinted train/test subsets drawn without overlap.
pub fn desk_split(full: &Dataset, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train + n_test > full.len() {
        return Err(SadaError::Config(format!(
            "requested {n_train} train + {n_test} test images from a dataset of {}",
            full.len()
        )));
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = full.subset(&order[..n_train], format!("{}-train{n_train}", full.name));
    train.split = Split::Train;
    let mut test = full.subset(&order[n_train..n_train + n_test], format!("{}-test{n_test}", full.name));
    test.split = Split::Test;
    Ok((train, test))
}

/// Default location of the bundled digit files: `$SADA_DATA_DIR`, else the
/// `data/` directory of the workspace.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("SADA_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub const DIGITS_IMAGES: &str = "digits-images-idx3-ubyte.gz";
pub const DIGITS_LABELS: &str = "digits-labels-idx1-ubyte.gz";

/// Loads the bundled 10k-digit IDX pair from `dir`.
pub fn load_digits(dir: &Path) -> Result<Dataset> {
    let images = dir.join(DIGITS_IMAGES);
    if !images.exists() {
        return Err(SadaError::Config(format!(
            "digit data not found at {}; run scripts/import_digits.py or set SADA_DATA_DIR",
            images.display()
        )));
    }
    load_idx(&images, &dir.join(DIGITS_LABELS), &LoadOptions { rgb: false, name: Some("digits".into()) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = (0..n)
            .map(|k| {
                Image::new(
                    Shape::new(1, 4, 4),
                    (0..16)
                        .map(|p| if p == 0 { k as f64 / 255.0 } else { ((k * 16 + p) % 256) as f64 / 255.0 })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        Dataset::new("toy", Split::Train, images, (0..n).map(|k| k % 3).collect()).unwrap()
    }

    #[test]
    fn idx_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        let d = toy(5);
        d.save_idx(&ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, &LoadOptions::default()).unwrap();
        assert_eq!(back.fingerprint(), d.fingerprint());
        let first = std::fs::read(&ip).unwrap();
        back.save_idx(&ip, &lp).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), first);
    }

    #[test]
    fn rgb_expansion_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        toy(2).save_idx(&ip, &lp).unwrap();
        let rgb = load_idx(&ip, &lp, &LoadOptions { rgb: true, name: None }).unwrap();
        let img = &rgb.images[1];
        assert_eq!(img.shape().channels, 3);
        assert_eq!(img.channel(0), img.channel(2));
    }

    #[test]
    fn mismatched_labels_are_rejected() {
        let images = vec![Image::zeros(Shape::new(1, 4, 4))];
        assert!(Dataset::new("x", Split::Train, images, vec![0, 1]).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let d = toy(20);
        let (a, b) = desk_split(&d, 12, 5, 3).unwrap();
        let (a2, _) = desk_split(&d, 12, 5, 3).unwrap();
        assert_eq!(a.fingerprint(), a2.fingerprint());
        assert_eq!(a.len(), 12);
        assert_eq!(b.len(), 5);
        for img in &b.images {
            assert!(!a.images.contains(img));
        }
        assert!(desk_split(&d, 15, 6, 0).is_err());
    }

    #[test]
    fn fingerprint_ignores_metadata() {
        let d = toy(3);
        let mut e = d.clone();
        e.name = "other".into();
        e.split = Split::Test;
        assert_eq!(d.fingerprint(), e.fingerprint());
        e.labels[0] = 2;
        assert_ne!(d.fingerprint(), e.fingerprint());
    }
}
