use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Disc, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKGROUND: [f32; 3] = [0.2, 0.5, 0.2];
const NOISE_STD: f64 = 0.05;

/// Lesion colour per class.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.55, 0.30, 0.10],
    [0.90, 0.85, 0.20],
    [0.10, 0.10, 0.10],
    [0.92, 0.92, 0.92],
    [0.95, 0.50, 0.05],
    [0.80, 0.12, 0.10],
    [0.50, 0.20, 0.60],
    [0.20, 0.30, 0.85],
];

fn sample_seed(seed: u64, class: usize, index: usize) -> u64 {
    // splitmix-style mixing keeps neighbouring (class, index) pairs unrelated
    let mut z = seed ^ ((class as u64) << 40) ^ (index as u64);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Green leaf-like background with Gaussian noise; class `k` carries `3 + k`
/// discs of radius `2 + k` in the `k`-th palette colour. Every image depends
/// only on `(seed, class, index)`.
pub fn generate_synthetic(k: usize, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || k > PALETTE.len() {
        return Err(Error::Argument(format!("synthetic classes must be in 1..=8, got {k}")));
    }
    if size < 32 {
        return Err(Error::Argument(format!("synthetic image size must be at least 32, got {size}")));
    }
    let mut samples = Vec::with_capacity(k * n_per_class);
    for class in 0..k {
        for index in 0..n_per_class {
            samples.push(render(class, size, sample_seed(seed, class, index)));
        }
    }
    Dataset::new(samples, (0..k).map(|c| format!("class{c}")).collect())
}

fn render(class: usize, size: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = (2 + class) as f64;
    let lesions: Vec<Disc> = (0..3 + class)
        .map(|_| Disc {
            cx: rng.random_range(r..=size as f64 - 1.0 - r),
            cy: rng.random_range(r..=size as f64 - 1.0 - r),
            r,
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let inside = lesions.iter().any(|d| d.contains(x as f64, y as f64));
            let base = if inside { PALETTE[class] } else { BACKGROUND };
            for c in 0..3 {
                let v = base[c] as f64 + noise.sample(&mut rng);
                data[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample {
        image: Tensor::new(&[3, size, size], data).expect("shape matches"),
        label: class,
        source: "synthetic".into(),
        lesions,
    }
}
