//! Helpers shared by the integration tests.

use dfkit_core::data::{template, Batch, Label};
use dfkit_core::rng::seeded;
use dfkit_core::Tensor;
use rand_distr::{Distribution, Normal};

/// 16 noisy synthetic images, alternating real and fake.
pub fn synthetic_batch(seed: u64) -> Batch {
    let size = 32;
    let mut rng = seeded(seed);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..16 {
        let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
        let t = template(label, size);
        let plane = size * size;
        let mut chw = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let v: f64 = t[p * 3 + c] + normal.sample(&mut rng);
                chw[c * plane + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
        pixels.extend(chw);
        labels.push(label.value());
    }
    Batch {
        images: Tensor::from_vec(&[16, 3, size, size], pixels).unwrap(),
        labels,
        indices: (0..16).collect(),
    }
}
