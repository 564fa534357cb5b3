use rayon::prelude::*;

use super::{DatasetIndex, Split};
use crate::error::{Error, Result};

/// Normalised 256-bin histogram of luma `0.299 R + 0.587 G + 0.114 B` over
/// 8-bit RGB pixels.
pub fn luma_histogram<'a>(images: impl IntoIterator<Item = &'a image::RgbImage>) -> [f64; 256] {
    let mut counts = [0u64; 256];
    for img in images {
        for p in img.pixels() {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            counts[(y.round() as usize).min(255)] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut out = [0.0; 256];
    if total > 0 {
        for (o, &c) in out.iter_mut().zip(&counts) {
            *o = c as f64 / total as f64;
        }
    }
    out
}

fn l1(a: &[f64; 256], b: &[f64; 256]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Debug)]
pub struct HistogramReport {
    pub histograms: Vec<(Split, [f64; 256])>,
    /// Pairwise L1 distances, each in `[0, 2]`.
    pub distances: Vec<(Split, Split, f64)>,
    pub threshold: f64,
}

impl HistogramReport {
    pub fn from_histograms(histograms: Vec<(Split, [f64; 256])>, threshold: f64) -> Self {
        let mut distances = Vec::new();
        for i in 0..histograms.len() {
            for j in i + 1..histograms.len() {
                distances.push((histograms[i].0, histograms[j].0, l1(&histograms[i].1, &histograms[j].1)));
            }
        }
        HistogramReport {
            histograms,
            distances,
            threshold,
        }
    }

    /// Pairs whose distance exceeds the threshold.
    pub fn divergent(&self) -> Vec<(Split, Split, f64)> {
        self.distances
            .iter()
            .copied()
            .filter(|d| d.2 > self.threshold)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("split_a,split_b,l1,flagged\n");
        for (a, b, d) in &self.distances {
            s.push_str(&format!("{a},{b},{d:.6},{}\n", *d > self.threshold));
        }
        s
    }
}

/// Per-split luma histograms of the decoded images at native resolution.
pub fn histogram_check(index: &DatasetIndex, threshold: f64) -> Result<HistogramReport> {
    let mut histograms = Vec::new();
    for split in Split::ALL {
        let paths: Vec<_> = index.in_split(split).map(|r| index.full_path(r)).collect();
        if paths.is_empty() {
            return Err(Error::EmptySplit(split.name().to_string()));
        }
        let images: Vec<image::RgbImage> = paths
            .par_iter()
            .map(|p| {
                image::open(p).map(|i| i.to_rgb8()).map_err(|e| Error::Decode {
                    path: p.clone(),
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        histograms.push((split, luma_histogram(&images)));
    }
    Ok(HistogramReport::from_histograms(histograms, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn histograms_are_distributions() {
        let img = RgbImage::from_fn(7, 5, |x, y| Rgb([(x * 30) as u8, (y * 40) as u8, 200]));
        let h = luma_histogram([&img]);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_and_disjoint() {
        let black = RgbImage::from_pixel(4, 4, Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
        let r = HistogramReport::from_histograms(
            vec![
                (Split::Train, luma_histogram([&black])),
                (Split::Val, luma_histogram([&black])),
                (Split::Test, luma_histogram([&white])),
            ],
            0.1,
        );
        assert_eq!(r.distances[0].2, 0.0);
        assert!((r.distances[1].2 - 2.0).abs() < 1e-12);
        assert_eq!(r.divergent().len(), 2);
    }
}
