//! Image and mask ingestion, preprocessing, splitting and synthetic data.
//!
//! On disk a dataset is a directory with `images/` and `masks/`
//! subdirectories whose files pair up by stem (`images/a.png` with
//! `masks/a.png`). PNG and JPEG are accepted.

mod io;
mod synth;
mod transform;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use io::{load_image, load_mask, rgb_to_tensor, save_gray, save_image, save_mask, MASK_THRESHOLD};
pub use synth::synthetic_blobs;
pub use transform::{binarize, resize_bilinear, resize_mask, to_grayscale, LUMA_WEIGHTS};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    /// `(1, 3, H, W)` in [0, 1].
    pub image: Tensor<f32>,
    /// `(1, 1, H, W)` in {0, 1}.
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Directory(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub source: Source,
    pub items: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.88,
            seed: 0,
        }
    }
}

/// A stacked batch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub grays: Tensor<f32>,
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::invalid(format!(
                "duplicate stem `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Lists `(stem, image path, mask path)` under `root`, sorted by stem.
/// Any image without a mask (or mask without an image) is an error that
/// names every offending stem.
pub fn paired_files(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let images = image_files(&root.join("images"))?;
    let mut masks = image_files(&root.join("masks"))?;
    let mut pairs = Vec::with_capacity(images.len());
    let mut unpaired = Vec::new();
    for (stem, img) in images {
        match masks.remove(&stem) {
            Some(m) => pairs.push((stem, img, m)),
            None => unpaired.push(format!("{stem} (no mask)")),
        }
    }
    unpaired.extend(masks.into_keys().map(|s| format!("{s} (no image)")));
    ensure!(
        unpaired.is_empty(),
        "unpaired files under {}: {}",
        root.display(),
        unpaired.join(", ")
    );
    Ok(pairs)
}

impl Dataset {
    /// Loads every pair under `root`. With `size`, images are resized
    /// bilinearly and masks resized then re-binarized.
    pub fn from_dir(root: &Path, size: Option<(usize, usize)>) -> Result<Self> {
        let pairs = paired_files(root)?;
        ensure!(!pairs.is_empty(), "no images found under {}", root.join("images").display());
        let items = pairs
            .par_iter()
            .map(|(stem, img_path, mask_path)| {
                let image = load_image(img_path)?;
                let mask = load_mask(mask_path)?;
                ensure!(
                    image.shape()[2..] == mask.shape()[2..],
                    "{stem}: image is {:?} but mask is {:?}",
                    &image.shape()[2..],
                    &mask.shape()[2..]
                );
                let (image, mask) = match size {
                    Some((h, w)) => (resize_bilinear(&image, h, w)?, resize_mask(&mask, h, w)?),
                    None => (image, mask),
                };
                Ok(Sample {
                    name: stem.clone(),
                    image,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let name = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string());
        Ok(Dataset {
            name,
            source: Source::Directory(root.to_path_buf()),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Spatial size shared by every item, if uniform.
    pub fn uniform_size(&self) -> Option<(usize, usize)> {
        let first = self.items.first()?.image.shape();
        let hw = (first[2], first[3]);
        self.items
            .iter()
            .all(|s| (s.image.shape()[2], s.image.shape()[3]) == hw)
            .then_some(hw)
    }

    pub fn resized(&self, h: usize, w: usize) -> Result<Dataset> {
        let items = self
            .items
            .par_iter()
            .map(|s| {
                Ok(Sample {
                    name: s.name.clone(),
                    image: resize_bilinear(&s.image, h, w)?,
                    mask: resize_mask(&s.mask, h, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: self.name.clone(),
            source: self.source.clone(),
            items,
        })
    }

    /// Stacks the given items with their grayscale targets.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        ensure!(!indices.is_empty(), "empty batch");
        let pick = |f: fn(&Sample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let parts: Vec<Tensor<f32>> = indices.iter().map(|&i| f(&self.items[i]).clone()).collect();
            Tensor::stack_batch(&parts)
        };
        let images = pick(|s| &s.image)?;
        let masks = pick(|s| &s.mask)?;
        let grays = to_grayscale(&images)?;
        Ok(Batch { images, masks, grays })
    }

    /// Writes `images/<name>.png` and `masks/<name>.png` under `root`.
    pub fn export(&self, root: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        self.items.par_iter().try_for_each(|s| {
            save_image(&s.image, &root.join("images").join(format!("{}.png", s.name)))?;
            save_mask(&s.mask, &root.join("masks").join(format!("{}.png", s.name)))
        })
    }

    fn subset(&self, indices: &[usize], suffix: &str) -> Dataset {
        Dataset {
            name: format!("{}-{suffix}", self.name),
            source: self.source.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

/// Seeded shuffle, then the first `floor(fraction·N)` items train and the
/// rest validate.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(n > 0, "cannot split an empty dataset");
    ensure!(
        spec.train_fraction > 0.0 && spec.train_fraction < 1.0,
        "train fraction {} must lie strictly between 0 and 1",
        spec.train_fraction
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_fraction * n as f64).floor() as usize;
    let val = order.split_off(n_train);
    Ok((order, val))
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), spec)?;
    Ok((dataset.subset(&train, "train"), dataset.subset(&val, "val")))
}
