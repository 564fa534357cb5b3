use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{DatasetIndex, Label, Split};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Decode to RGB, resize to `height x width` with linear filtering when the
/// size differs, scale by 1/255 and lay out channel-major (`[3, H, W]`).
pub fn decode_image(path: &Path, height: usize, width: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let img = if img.width() as usize != width || img.height() as usize != height {
        imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    } else {
        img
    };
    let plane = height * width;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    /// 0 real, 1 fake.
    pub labels: Vec<f32>,
    /// Positions of the items within their loader.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Batches over one split. Images are decoded on demand (in parallel within
/// a batch, order preserved) unless [`Loader::preload`] cached them.
#[derive(Clone, Debug)]
pub struct Loader {
    pub root: PathBuf,
    pub paths: Vec<String>,
    pub labels: Vec<Label>,
    pub height: usize,
    pub width: usize,
    cache: Option<Vec<f32>>,
}

impl Loader {
    pub fn new(index: &DatasetIndex, split: Split, height: usize, width: usize) -> Result<Self> {
        let (paths, labels): (Vec<_>, Vec<_>) = index.in_split(split).map(|r| (r.path.clone(), r.label)).unzip();
        if paths.is_empty() {
            return Err(Error::EmptySplit(split.name().to_string()));
        }
        Ok(Loader {
            root: index.root.clone(),
            paths,
            labels,
            height,
            width,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn path(&self, i: usize) -> PathBuf {
        self.root.join(&self.paths[i])
    }

    /// Decode every image once and keep the pixels in memory.
    pub fn preload(&mut self) -> Result<()> {
        if self.cache.is_none() {
            let all: Vec<usize> = (0..self.len()).collect();
            self.cache = Some(self.decode(&all)?);
        }
        Ok(())
    }

    fn decode(&self, indices: &[usize]) -> Result<Vec<f32>> {
        let images: Vec<Vec<f32>> = indices
            .par_iter()
            .map(|&i| decode_image(&self.path(i), self.height, self.width))
            .collect::<Result<_>>()?;
        Ok(images.concat())
    }

    /// Item order for one epoch: identity, or a shuffle under `seed`.
    pub fn order(&self, shuffle: Option<u64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut seeded(seed));
        }
        order
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let pixels = match &self.cache {
            Some(cache) => {
                let n = self.image_len();
                indices
                    .iter()
                    .flat_map(|&i| cache[i * n..(i + 1) * n].iter().copied())
                    .collect()
            }
            None => self.decode(indices)?,
        };
        Ok(Batch {
            images: Tensor::from_vec(&[indices.len(), 3, self.height, self.width], pixels)?,
            labels: indices.iter().map(|&i| self.labels[i].value()).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Consecutive batches of `batch_size`; the last one may be short.
    pub fn batches(&self, batch_size: usize, shuffle: Option<u64>) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.order(shuffle);
        let size = batch_size.max(1);
        let chunks: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}
