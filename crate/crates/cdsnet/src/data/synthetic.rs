//! Synthetic imbalanced multispectral dataset generator.
//!
//! Each class owns a spectral signature over the 8 bands and a spatial
//! template. Three class pairs share their template and their visible-band
//! signature and differ only in the three highest-frequency bands, so models
//! that exploit the full spectrum can separate what RGB-style reductions
//! cannot. Class counts decay geometrically from `head_count` down by
//! `imbalance_ratio`.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{standard_band_order, ChipDataset, ChipSet, DatasetManifest, NORMALIZATION_DIVISOR};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Template {
    Blob,
    Bar,
    Grid,
    Ring,
}

/// Per-class recipe: mean reflectance per band, spatial template, noise and
/// pattern-scale weights.
#[derive(Clone, Debug)]
struct ClassSpec {
    signature: [f32; 8],
    template: Template,
    frequency_weight: f32,
    noise_scale: f32,
}

/// Canonical 10-class table. Pairs (0,9), (1,8), (2,7) share the first five
/// bands and the template; only bands 6-8 tell them apart.
fn class_table(num_classes: usize, noise_scale: f32, rng: &mut ChaCha8Rng) -> Vec<ClassSpec> {
    const CANON: [([f32; 8], Template, f32); 10] = [
        ([0.80, 0.70, 0.60, 0.50, 0.40, 0.85, 0.75, 0.65], Template::Blob, 1.0),
        ([0.30, 0.40, 0.55, 0.65, 0.75, 0.80, 0.85, 0.75], Template::Bar, 1.0),
        ([0.55, 0.35, 0.45, 0.30, 0.60, 0.70, 0.80, 0.90], Template::Grid, 1.0),
        ([0.70, 0.55, 0.40, 0.60, 0.35, 0.55, 0.45, 0.60], Template::Ring, 1.0),
        ([0.25, 0.30, 0.35, 0.45, 0.55, 0.65, 0.50, 0.40], Template::Blob, 0.6),
        ([0.60, 0.65, 0.70, 0.35, 0.25, 0.45, 0.60, 0.70], Template::Bar, 0.6),
        ([0.40, 0.50, 0.30, 0.70, 0.65, 0.50, 0.35, 0.55], Template::Grid, 0.6),
        ([0.55, 0.35, 0.45, 0.30, 0.60, 0.30, 0.20, 0.10], Template::Grid, 1.0),
        ([0.30, 0.40, 0.55, 0.65, 0.75, 0.20, 0.25, 0.15], Template::Bar, 1.0),
        ([0.80, 0.70, 0.60, 0.50, 0.40, 0.25, 0.15, 0.20], Template::Blob, 1.0),
    ];
    let templates = [Template::Blob, Template::Bar, Template::Grid, Template::Ring];
    (0..num_classes)
        .map(|c| {
            if c < CANON.len() {
                let (signature, template, fw) = CANON[c];
                ClassSpec { signature, template, frequency_weight: fw, noise_scale }
            } else {
                let mut signature = [0.0f32; 8];
                for s in signature.iter_mut() {
                    *s = 0.15 + 0.7 * rng.gen::<f32>();
                }
                ClassSpec {
                    signature,
                    template: templates[c % templates.len()],
                    frequency_weight: 0.5 + rng.gen::<f32>(),
                    noise_scale,
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    /// Train-pool size of the most frequent class (before the 90:10 split).
    pub head_count: usize,
    /// Ratio between the largest and smallest class counts; 1 = balanced.
    pub imbalance_ratio: f64,
    pub seed: u64,
    /// Standard deviation of the additive band-correlated noise.
    pub noise_scale: f32,
    /// Balanced test chips per class.
    pub test_per_class: usize,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, head_count: usize, imbalance_ratio: f64, seed: u64) -> Self {
        SyntheticConfig {
            num_classes,
            head_count,
            imbalance_ratio,
            seed,
            noise_scale: 0.10,
            test_per_class: (head_count / 10).clamp(20, 500),
        }
    }
}

/// Geometric-decay class counts: class c gets
/// `round(head * ratio^(-c / (num_classes - 1)))`.
pub fn class_counts(num_classes: usize, head_count: usize, ratio: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|c| {
            let expo = -(c as f64) / (num_classes as f64 - 1.0);
            (head_count as f64 * ratio.powf(expo)).round() as usize
        })
        .collect()
}

const SIDE: usize = 32;
const HW: usize = SIDE * SIDE;

fn render_template(template: Template, fw: f32, rng: &mut ChaCha8Rng) -> [f32; HW] {
    let mut t = [0.0f32; HW];
    let jit = |rng: &mut ChaCha8Rng, a: f32| (rng.gen::<f32>() * 2.0 - 1.0) * a;
    match template {
        Template::Blob => {
            let cx = 16.0 + jit(rng, 4.0);
            let cy = 16.0 + jit(rng, 4.0);
            let r = 6.0 * fw * (1.0 + jit(rng, 0.2));
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    t[y * SIDE + x] = (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
        Template::Bar => {
            let theta = std::f32::consts::FRAC_PI_4 * fw + jit(rng, 0.3);
            let (s, c) = theta.sin_cos();
            let offset = jit(rng, 6.0);
            let width = 3.0 * fw + 1.0;
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let d = (x as f32 - 16.0) * c + (y as f32 - 16.0) * s - offset;
                    t[y * SIDE + x] = (1.0 - d.abs() / width).max(0.0);
                }
            }
        }
        Template::Grid => {
            let period = 6.0 * fw + 3.0;
            let phase_x = jit(rng, std::f32::consts::PI);
            let phase_y = jit(rng, std::f32::consts::PI);
            let k = 2.0 * std::f32::consts::PI / period;
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let gx = 0.5 + 0.5 * (k * x as f32 + phase_x).sin();
                    let gy = 0.5 + 0.5 * (k * y as f32 + phase_y).sin();
                    t[y * SIDE + x] = gx * gy;
                }
            }
        }
        Template::Ring => {
            let r0 = 8.0 * fw + jit(rng, 1.5);
            let cx = 16.0 + jit(rng, 2.0);
            let cy = 16.0 + jit(rng, 2.0);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    t[y * SIDE + x] = (-(d - r0).powi(2) / (2.0 * 2.0 * 2.0)).exp();
                }
            }
        }
    }
    t
}

fn render_chip(spec: &ClassSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let t = render_template(spec.template, spec.frequency_weight, rng);
    let illum = 0.8 + 0.4 * rng.gen::<f32>();
    let mut shared = [0.0f32; HW];
    for v in shared.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let mut chip = Vec::with_capacity(8 * HW);
    for b in 0..8 {
        let sig = spec.signature[b];
        let base = 0.10 + 0.10 * sig;
        for i in 0..HW {
            let indep: f32 = StandardNormal.sample(rng);
            let noise = spec.noise_scale * (0.6 * shared[i] + 0.4 * indep);
            let v = illum * (base + 0.60 * sig * t[i]) + noise;
            chip.push(v.clamp(0.0, 1.0));
        }
    }
    chip
}

/// Generate an imbalanced dataset: per-class train pools follow the geometric
/// decay, each pool is split 90:10 into train/val, and the test split is
/// balanced. Bitwise deterministic for a given config.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<ChipDataset> {
    if config.num_classes < 2 {
        return Err(Error::Contract(format!(
            "generator needs >= 2 classes, got {}",
            config.num_classes
        )));
    }
    if config.imbalance_ratio < 1.0 {
        return Err(Error::Contract("imbalance ratio must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let specs = class_table(config.num_classes, config.noise_scale, &mut rng);
    let counts = class_counts(config.num_classes, config.head_count, config.imbalance_ratio);

    let mut train = ChipSet::default();
    let mut val = ChipSet::default();
    let mut test = ChipSet::default();
    for (c, spec) in specs.iter().enumerate() {
        let pool = counts[c];
        let val_n = ((pool as f64) * 0.1).round() as usize;
        for i in 0..pool {
            let chip = render_chip(spec, &mut rng);
            if i < val_n {
                val.push(&chip, c as u16);
            } else {
                train.push(&chip, c as u16);
            }
        }
        for _ in 0..config.test_per_class {
            let chip = render_chip(spec, &mut rng);
            test.push(&chip, c as u16);
        }
    }

    let manifest = DatasetManifest {
        class_names: (0..config.num_classes).map(|c| format!("class{c}")).collect(),
        class_counts: BTreeMap::new(),
        band_order: standard_band_order(),
        normalization_divisor: NORMALIZATION_DIVISOR,
        seed: config.seed,
        gsd_resampled_30cm: false,
    };
    let mut ds = ChipDataset { manifest, train, val, test };
    ds.rebuild_counts();
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_decay_counts() {
        let counts = class_counts(10, 5000, 60.0);
        assert_eq!(counts[0], 5000);
        assert_eq!(counts[9], 83); // 5000 / 60
        for w in counts.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn ratio_one_is_balanced() {
        let counts = class_counts(10, 200, 1.0);
        assert!(counts.iter().all(|&c| c == 200));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = SyntheticConfig { test_per_class: 5, ..SyntheticConfig::new(4, 30, 4.0, 77) };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.train.pixels, b.train.pixels);
        assert_eq!(a.val.labels, b.val.labels);
        assert_eq!(a.test.pixels, b.test.pixels);
    }

    #[test]
    fn split_fractions_per_class() {
        let cfg = SyntheticConfig { test_per_class: 5, ..SyntheticConfig::new(5, 100, 10.0, 3) };
        let ds = generate_synthetic(&cfg).unwrap();
        let pool = class_counts(5, 100, 10.0);
        let train_counts = ds.train.class_counts(5);
        let val_counts = ds.val.class_counts(5);
        for c in 0..5 {
            let expected_val = ((pool[c] as f64) * 0.1).round() as u32;
            assert_eq!(val_counts[c], expected_val);
            assert_eq!(train_counts[c] + val_counts[c], pool[c] as u32);
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(generate_synthetic(&SyntheticConfig::new(1, 10, 2.0, 0)).is_err());
        assert!(generate_synthetic(&SyntheticConfig::new(3, 10, 0.5, 0)).is_err());
    }
}
