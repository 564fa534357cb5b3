use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::Batch;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentKind {
    None,
    /// Random rotation, scaling and horizontal flip from the policy ranges.
    Basic,
    /// `n_ops` operations drawn uniformly from [`RAND_AUGMENT_MENU`] at a
    /// shared magnitude on a 0..=10 scale.
    RandAugment {
        n_ops: usize,
        magnitude: f64,
    },
    /// One of five fixed two-step sub-policies per image.
    AutoLite,
    /// `Basic` followed by `RandAugment` with defaults.
    Combined,
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentKind::None => f.write_str("none"),
            AugmentKind::Basic => f.write_str("basic"),
            AugmentKind::RandAugment { .. } => f.write_str("rand_augment"),
            AugmentKind::AutoLite => f.write_str("auto_lite"),
            AugmentKind::Combined => f.write_str("combined"),
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(AugmentKind::None),
            "basic" => Ok(AugmentKind::Basic),
            "rand_augment" | "randaugment" => Ok(AugmentKind::RandAugment {
                n_ops: 2,
                magnitude: 9.0,
            }),
            "auto_lite" | "autoaugment" => Ok(AugmentKind::AutoLite),
            "combined" => Ok(AugmentKind::Combined),
            other => Err(Error::Config(format!("unknown augmentation policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    /// Maximum absolute rotation in degrees.
    pub rotation: f64,
    /// Scale factor range.
    pub scale: (f64, f64),
    pub flip_prob: f64,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn new(kind: AugmentKind, seed: u64) -> Self {
        AugmentPolicy {
            kind,
            rotation: 15.0,
            scale: (0.9, 1.1),
            flip_prob: 0.5,
            seed,
        }
    }

    pub fn none() -> Self {
        Self::new(AugmentKind::None, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augmentation: {m}")));
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability outside [0, 1]");
        }
        if !(self.rotation >= 0.0) || !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return bad("rotation must be non-negative and scale range non-empty and positive");
        }
        if let AugmentKind::RandAugment { n_ops, magnitude } = self.kind {
            if n_ops == 0 || !(0.0..=10.0).contains(&magnitude) {
                return bad("rand_augment needs n_ops >= 1 and magnitude in [0, 10]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    Rotate,
    TranslateX,
    TranslateY,
    Scale,
    Contrast,
    Brightness,
    HorizontalFlip,
}

pub const RAND_AUGMENT_MENU: [AugmentOp; 7] = [
    AugmentOp::Rotate,
    AugmentOp::TranslateX,
    AugmentOp::TranslateY,
    AugmentOp::Scale,
    AugmentOp::Contrast,
    AugmentOp::Brightness,
    AugmentOp::HorizontalFlip,
];

/// (op, probability, magnitude) pairs.
const AUTO_LITE: [[(AugmentOp, f64, f64); 2]; 5] = [
    [(AugmentOp::Contrast, 0.6, 5.0), (AugmentOp::Rotate, 0.4, 3.0)],
    [(AugmentOp::Brightness, 0.6, 4.0), (AugmentOp::TranslateX, 0.5, 3.0)],
    [(AugmentOp::Rotate, 0.7, 6.0), (AugmentOp::TranslateY, 0.3, 4.0)],
    [(AugmentOp::Contrast, 0.5, 7.0), (AugmentOp::Brightness, 0.5, 3.0)],
    [(AugmentOp::TranslateX, 0.4, 5.0), (AugmentOp::Rotate, 0.6, 4.0)],
];

/// One `[3, H, W]` image.
struct Image<'a> {
    data: &'a mut [f32],
    h: usize,
    w: usize,
}

impl Image<'_> {
    /// Inverse-mapped affine warp about the centre with bilinear sampling
    /// and zero fill: rotate by `deg`, scale by `s`, shift by `(tx, ty)` px.
    fn affine(&mut self, deg: f64, s: f64, tx: f64, ty: f64) {
        let (h, w) = (self.h, self.w);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = (-deg.to_radians()).sin_cos();
        let src = self.data.to_vec();
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 - cx - tx) / s, (y as f64 - cy - ty) / s);
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                for c in 0..3 {
                    self.data[c * plane + y * w + x] = sample(&src[c * plane..(c + 1) * plane], h, w, sy, sx);
                }
            }
        }
    }

    fn flip(&mut self) {
        for row in self.data.chunks_mut(self.w) {
            row.reverse();
        }
    }

    /// Blend towards the mean intensity by `factor` (1 leaves it unchanged).
    fn contrast(&mut self, factor: f64) {
        let plane = self.h * self.w;
        let mean = (0..plane)
            .map(|i| {
                0.299 * self.data[i] as f64
                    + 0.587 * self.data[plane + i] as f64
                    + 0.114 * self.data[2 * plane + i] as f64
            })
            .sum::<f64>()
            / plane as f64;
        for v in self.data.iter_mut() {
            *v = (mean + factor * (*v as f64 - mean)) as f32;
        }
    }

    fn brightness(&mut self, factor: f64) {
        for v in self.data.iter_mut() {
            *v = (*v as f64 * factor) as f32;
        }
    }

    fn clamp(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    fn apply(&mut self, op: AugmentOp, magnitude: f64, rng: &mut impl Rng) {
        let m = magnitude / 10.0;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        match op {
            AugmentOp::Rotate => self.affine(sign * 30.0 * m, 1.0, 0.0, 0.0),
            AugmentOp::TranslateX => self.affine(0.0, 1.0, sign * 0.3 * m * self.w as f64, 0.0),
            AugmentOp::TranslateY => self.affine(0.0, 1.0, 0.0, sign * 0.3 * m * self.h as f64),
            AugmentOp::Scale => self.affine(0.0, 1.0 + sign * 0.3 * m, 0.0, 0.0),
            AugmentOp::Contrast => self.contrast(1.0 + sign * 0.9 * m),
            AugmentOp::Brightness => self.brightness(1.0 + sign * 0.9 * m),
            AugmentOp::HorizontalFlip => self.flip(),
        }
    }
}

fn sample(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1.0) * fx } else { 0.0 };
    let bottom = if fy > 0.0 {
        at(y0 + 1.0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1.0, x0 + 1.0) * fx } else { 0.0 }
    } else {
        0.0
    };
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn basic(img: &mut Image<'_>, p: &AugmentPolicy, rng: &mut impl Rng) {
    let deg = if p.rotation > 0.0 {
        rng.random_range(-p.rotation..=p.rotation)
    } else {
        0.0
    };
    let s = if p.scale.1 > p.scale.0 {
        rng.random_range(p.scale.0..=p.scale.1)
    } else {
        p.scale.0
    };
    img.affine(deg, s, 0.0, 0.0);
    if rng.random::<f64>() < p.flip_prob {
        img.flip();
    }
}

fn rand_augment(img: &mut Image<'_>, n_ops: usize, magnitude: f64, rng: &mut impl Rng) {
    for _ in 0..n_ops {
        let op = RAND_AUGMENT_MENU[rng.random_range(0..RAND_AUGMENT_MENU.len())];
        img.apply(op, magnitude, rng);
    }
}

/// Augment every image of `batch` in place of a copy. Randomness comes from
/// `(policy.seed, ordinal, image position)`, so results do not depend on
/// thread scheduling. Values are clamped to `[0, 1]`; shapes and labels are
/// untouched.
pub fn augment(batch: &Batch, policy: &AugmentPolicy, ordinal: u64) -> Batch {
    if policy.kind == AugmentKind::None {
        return batch.clone();
    }
    let mut out = batch.clone();
    let shape = out.images.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let per = 3 * h * w;
    let batch_seed = derive_seed(policy.seed, ordinal);
    for (i, data) in out.images.data_mut().chunks_mut(per).enumerate() {
        let mut rng = seeded(derive_seed(batch_seed, i as u64));
        let mut img = Image { data, h, w };
        match policy.kind {
            AugmentKind::None => {}
            AugmentKind::Basic => basic(&mut img, policy, &mut rng),
            AugmentKind::RandAugment { n_ops, magnitude } => rand_augment(&mut img, n_ops, magnitude, &mut rng),
            AugmentKind::AutoLite => {
                let sub = AUTO_LITE[rng.random_range(0..AUTO_LITE.len())];
                for (op, prob, mag) in sub {
                    if rng.random::<f64>() < prob {
                        img.apply(op, mag, &mut rng);
                    }
                }
            }
            AugmentKind::Combined => {
                basic(&mut img, policy, &mut rng);
                rand_augment(&mut img, 2, 9.0, &mut rng);
            }
        }
        img.clamp();
    }
    out
}
