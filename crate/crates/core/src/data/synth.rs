use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::{scan_directory, DatasetIndex, Label};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: usize,
    /// Standard deviation of the per-pixel Gaussian noise, in `[0, 1]` units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class: 200,
            size: 32,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Amplitude of the checkerboard that marks fake images.
const CHECKER: f64 = 0.08;

/// Noise-free class template, `[H, W, 3]` row-major with values in `[0, 1]`.
/// Both classes share a per-channel horizontal gradient; fakes add a
/// one-pixel checkerboard.
pub fn template(label: Label, size: usize) -> Vec<f64> {
    let ends = [(0.2, 0.8), (0.3, 0.6), (0.7, 0.3)];
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = x as f64 / (size - 1) as f64;
            let check = match label {
                Label::Real => 0.0,
                Label::Fake if (x + y) % 2 == 0 => CHECKER,
                Label::Fake => -CHECKER,
            };
            for (a, b) in ends {
                out.push(a + (b - a) * t + check);
            }
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `out/{real,fake}/<class>_<nnnnn>.png` and return the scanned index.
pub fn synth_dataset(out: &Path, cfg: &SynthConfig) -> Result<DatasetIndex> {
    if cfg.size < 8 {
        return Err(Error::Config(format!("synthetic image size {} is below 8", cfg.size)));
    }
    if cfg.per_class == 0 {
        return Err(Error::Config("each class needs at least one image".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config(format!("noise level {} must be non-negative", cfg.noise)));
    }
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    for label in [Label::Real, Label::Fake] {
        let dir = out.join(label.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let base = template(label, cfg.size);
        for i in 0..cfg.per_class {
            let mut rng = seeded(derive_seed(cfg.seed, ((label as u64) << 32) | i as u64));
            let pixels: Vec<u8> = base
                .iter()
                .map(|&v| {
                    let n = if cfg.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    quantize(v + n)
                })
                .collect();
            let path = dir.join(format!("{}_{i:05}.png", label.name()));
            let side = cfg.size as u32;
            image::save_buffer(&path, &pixels, side, side, image::ExtendedColorType::Rgb8).map_err(|e| {
                Error::Decode {
                    path: path.clone(),
                    msg: e.to_string(),
                }
            })?;
        }
    }
    scan_directory(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode_image;

    #[test]
    fn noiseless_images_match_template() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            per_class: 2,
            size: 8,
            noise: 0.0,
            seed: 1,
        };
        let ix = synth_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(ix.len(), 4);
        for r in &ix.records {
            let img = decode_image(&ix.full_path(r), 8, 8).unwrap();
            let t = template(r.label, 8);
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        let want = quantize(t[(y * 8 + x) * 3 + c]) as f32 / 255.0;
                        assert_eq!(img[c * 64 + y * 8 + x], want);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_follow_directories() {
        let dir = tempfile::tempdir().unwrap();
        let ix = synth_dataset(
            dir.path(),
            &SynthConfig {
                per_class: 3,
                size: 8,
                noise: 0.1,
                seed: 2,
            },
        )
        .unwrap();
        assert_eq!(ix.count(None, Label::Real), 3);
        assert_eq!(ix.count(None, Label::Fake), 3);
        for r in &ix.records {
            assert!(r.path.starts_with(r.label.name()));
        }
        assert!(synth_dataset(
            dir.path(),
            &SynthConfig {
                size: 4,
                ..Default::default()
            }
        )
        .is_err());
    }
}
