use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::idx::{parse_idx, IdxFile, IMAGES_MAGIC, LABELS_MAGIC};
use crate::error::{Error, Result};
use crate::optim::fisher_yates;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds the four MNIST IDX
/// files.
pub const DATA_DIR_ENV: &str = "ERGOGHOST_MNIST_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `(file name, sha256)` of every source file.
    pub sources: Vec<(String, String)>,
    pub sampler_seed: Option<u64>,
    pub per_class: Option<usize>,
    pub scaling: String,
}

/// Labelled images as an `N×1×H×W` tensor scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn from_idx(images: &IdxFile, labels: &IdxFile) -> Result<Self> {
        if images.magic != IMAGES_MAGIC || labels.magic != LABELS_MAGIC {
            return Err(Error::Format("expected an image file and a label file".into()));
        }
        if images.count() != labels.count() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                images.count(),
                labels.count()
            )));
        }
        if let Some(bad) = labels.payload.iter().find(|&&l| l > 9) {
            return Err(Error::Format(format!("label {bad} outside 0..=9")));
        }
        let (n, h, w) = (
            images.dims[0] as usize,
            images.dims[1] as usize,
            images.dims[2] as usize,
        );
        let pixels = images.payload.iter().map(|&p| f64::from(p) / 255.0).collect();
        Ok(Self {
            images: Tensor::new(vec![n, 1, h, w], pixels)?,
            labels: labels.payload.iter().map(|&l| l as usize).collect(),
            provenance: Provenance {
                scaling: "pixel/255".into(),
                ..Provenance::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok(Self {
            images: Tensor::new(shape, data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
        })
    }

    /// The first `n` rows (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> [usize; 10] {
        let mut c = [0; 10];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Draws exactly `per_class` examples of each digit without replacement.
///
/// Each class's indices are shuffled by Fisher–Yates on the run's subsample
/// stream and the first `per_class` kept; the result is in ascending source
/// order.
pub fn rmnist_sample(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, Stream::Subsample);
    let mut chosen = Vec::with_capacity(per_class * 10);
    for class in 0..10 {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if idx.len() < per_class {
            return Err(Error::contract(format!(
                "class {class} has {} examples, {per_class} requested",
                idx.len()
            )));
        }
        fisher_yates(&mut idx, &mut rng);
        chosen.extend_from_slice(&idx[..per_class]);
    }
    chosen.sort_unstable();
    let mut out = dataset.subset(&chosen)?;
    out.provenance.sampler_seed = Some(seed);
    out.provenance.per_class = Some(per_class);
    Ok(out)
}

/// Train and test splits.
#[derive(Clone, Debug)]
pub struct MnistSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Directory from an explicit flag, else [`DATA_DIR_ENV`], else `data/mnist`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from("data/mnist"),
    }
}

fn read_idx(dir: &Path, name: &str) -> Result<(IdxFile, (String, String))> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingDataset(format!(
            "{} (run `ergoghost data fetch --checksum` or set {DATA_DIR_ENV})",
            path.display()
        )),
        _ => Error::Io(e),
    })?;
    let hash = crate::sha256_hex(&bytes);
    Ok((parse_idx(&bytes)?, (name.to_string(), hash)))
}

pub fn load_mnist(dir: &Path) -> Result<MnistSplit> {
    let load = |images: &str, labels: &str| -> Result<Dataset> {
        let (img, h1) = read_idx(dir, images)?;
        let (lab, h2) = read_idx(dir, labels)?;
        let mut d = Dataset::from_idx(&img, &lab)?;
        d.provenance.sources = vec![h1, h2];
        Ok(d)
    };
    Ok(MnistSplit {
        train: load(TRAIN_IMAGES, TRAIN_LABELS)?,
        test: load(TEST_IMAGES, TEST_LABELS)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 10 classes × `per` tiny 2×2 images.
    fn toy(per: usize) -> Dataset {
        let n = 10 * per;
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let pixels: Vec<u8> = (0..n * 4).map(|i| (i % 256) as u8).collect();
        let img = IdxFile {
            magic: IMAGES_MAGIC,
            dims: vec![n as u32, 2, 2],
            payload: pixels,
        };
        let lab = IdxFile {
            magic: LABELS_MAGIC,
            dims: vec![n as u32],
            payload: labels,
        };
        Dataset::from_idx(&img, &lab).unwrap()
    }

    #[test]
    fn pixels_are_scaled_to_unit_interval() {
        let d = toy(7);
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.images.data()[255], 1.0);
    }

    #[test]
    fn sample_has_exact_class_counts() {
        let d = toy(12);
        let s = rmnist_sample(&d, 5, 1).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.class_counts(), [5; 10]);
        assert_eq!(s.provenance.per_class, Some(5));
    }

    #[test]
    fn whole_class_for_any_seed() {
        let d = toy(4);
        for seed in [0, 1, 99] {
            let s = rmnist_sample(&d, 4, seed).unwrap();
            assert_eq!(s.labels, d.labels);
        }
    }

    #[test]
    fn same_seed_same_subset() {
        let d = toy(20);
        assert_eq!(rmnist_sample(&d, 7, 3).unwrap(), rmnist_sample(&d, 7, 3).unwrap());
        assert_ne!(
            rmnist_sample(&d, 7, 3).unwrap().images,
            rmnist_sample(&d, 7, 4).unwrap().images
        );
    }

    #[test]
    fn class_deficit_is_an_error() {
        assert!(matches!(rmnist_sample(&toy(2), 3, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_counts_rejected() {
        let img = IdxFile {
            magic: IMAGES_MAGIC,
            dims: vec![2, 1, 1],
            payload: vec![0, 0],
        };
        let lab = IdxFile {
            magic: LABELS_MAGIC,
            dims: vec![1],
            payload: vec![0],
        };
        assert!(Dataset::from_idx(&img, &lab).is_err());
        let lab = IdxFile {
            magic: LABELS_MAGIC,
            dims: vec![2],
            payload: vec![0, 11],
        };
        assert!(Dataset::from_idx(&img, &lab).is_err());
    }

    #[test]
    fn missing_files_give_a_fetch_hint() {
        let err = load_mnist(Path::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, Error::MissingDataset(ref m) if m.contains("data fetch")));
    }
}
