//! Dataset pipeline: the MSC1 chip container, dataset manifest, batch
//! iteration, a synthetic imbalanced generator, and chip derivation from
//! 8-band scenes.

mod derive;
mod msc1;
mod synthetic;

pub use derive::{derive_chips, read_scene, write_scene, Annotations, DeriveConfig, SceneAnnotation, SceneBox};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encodings::BAND_LABELS_8;
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const CHIP_SIDE: usize = 32;
pub const CHIP_CHANNELS: usize = 8;
pub const NORMALIZATION_DIVISOR: f32 = 6338.0;
/// Paper cap on training chips per class.
pub const CLASS_CAP: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.msc",
            Split::Val => "val.msc",
            Split::Test => "test.msc",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// JSON manifest accompanying the MSC1 files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    /// Per-split chip counts per class, keyed by split name.
    pub class_counts: BTreeMap<String, Vec<u32>>,
    pub band_order: Vec<String>,
    pub normalization_divisor: f32,
    pub seed: u64,
    #[serde(default)]
    pub gsd_resampled_30cm: bool,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Data("manifest has no classes".into()));
        }
        if self.normalization_divisor <= 0.0 {
            return Err(Error::Data("normalization divisor must be positive".into()));
        }
        if self.band_order != BAND_LABELS_8 {
            return Err(Error::Data(format!(
                "band order {:?} does not match the expected ascending spectral order",
                self.band_order
            )));
        }
        Ok(())
    }

    pub fn counts(&self, split: Split) -> Option<&[u32]> {
        self.class_counts.get(split.key()).map(|v| v.as_slice())
    }
}

/// One split of labelled chips, stored contiguously as `[n, 8, 32, 32]`.
#[derive(Clone, Debug, Default)]
pub struct ChipSet {
    pub pixels: Vec<f32>,
    pub labels: Vec<u16>,
}

impl ChipSet {
    pub const CHIP_LEN: usize = CHIP_CHANNELS * CHIP_SIDE * CHIP_SIDE;

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, chip: &[f32], label: u16) {
        debug_assert_eq!(chip.len(), Self::CHIP_LEN);
        self.pixels.extend_from_slice(chip);
        self.labels.push(label);
    }

    pub fn chip(&self, i: usize) -> &[f32] {
        &self.pixels[i * Self::CHIP_LEN..(i + 1) * Self::CHIP_LEN]
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<u32> {
        let mut counts = vec![0u32; num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Check the per-chip invariants: values in [0,1] and labels in range.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.pixels.len() != self.labels.len() * Self::CHIP_LEN {
            return Err(Error::Data("pixel buffer does not match label count".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        if self.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("chip values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Deterministic batch stream: shuffles once per call when a seed is
    /// given, includes the final partial batch.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        if let Some(seed) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
        Batches { set: self, order, pos: 0, batch_size }
    }
}

pub struct Batches<'a> {
    set: &'a ChipSet,
    order: Vec<u32>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Array<f32>, Vec<u16>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let ids = &self.order[self.pos..end];
        self.pos = end;
        let mut pixels = Vec::with_capacity(ids.len() * ChipSet::CHIP_LEN);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            pixels.extend_from_slice(self.set.chip(i as usize));
            labels.push(self.set.labels[i as usize]);
        }
        let batch = Array::new(vec![ids.len(), CHIP_CHANNELS, CHIP_SIDE, CHIP_SIDE], pixels).expect("batch shape");
        Some((batch, labels))
    }
}

/// A complete dataset: manifest plus the three splits.
#[derive(Clone, Debug)]
pub struct ChipDataset {
    pub manifest: DatasetManifest,
    pub train: ChipSet,
    pub val: ChipSet,
    pub test: ChipSet,
}

impl ChipDataset {
    pub fn split(&self, which: Split) -> &ChipSet {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let k = self.manifest.num_classes();
        for split in [Split::Train, Split::Val, Split::Test] {
            let set = self.split(split);
            set.validate(k)?;
            if let Some(counts) = self.manifest.counts(split) {
                if counts != set.class_counts(k).as_slice() {
                    return Err(Error::Data(format!("manifest counts for {} do not match records", split.key())));
                }
            }
        }
        Ok(())
    }

    /// Write `manifest.json` plus one MSC1 file per split into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mjson = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(dir.join("manifest.json"), mjson)?;
        for split in [Split::Train, Split::Val, Split::Test] {
            msc1::write_msc1(&dir.join(split.file_name()), self.split(split))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mjson = std::fs::read(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_slice(&mjson)?;
        let mut sets = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            sets.push(msc1::read_msc1(&dir.join(split.file_name()))?);
        }
        let mut it = sets.into_iter();
        let ds = ChipDataset {
            manifest,
            train: it.next().unwrap(),
            val: it.next().unwrap(),
            test: it.next().unwrap(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub(crate) fn rebuild_counts(&mut self) {
        let k = self.manifest.num_classes();
        let mut counts = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            counts.insert(split.key().to_string(), self.split(split).class_counts(k));
        }
        self.manifest.class_counts = counts;
    }
}

pub(crate) fn standard_band_order() -> Vec<String> {
    BAND_LABELS_8.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set(n: usize) -> ChipSet {
        let mut set = ChipSet::default();
        for i in 0..n {
            let chip = vec![(i % 7) as f32 / 7.0; ChipSet::CHIP_LEN];
            set.push(&chip, (i % 3) as u16);
        }
        set
    }

    #[test]
    fn batching_arithmetic() {
        let set = tiny_set(35);
        let sizes: Vec<usize> = set.batches(16, None).map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![16, 16, 3]);
    }

    #[test]
    fn shuffle_is_deterministic_per_seed() {
        let set = tiny_set(40);
        let a: Vec<Vec<u16>> = set.batches(8, Some(9)).map(|(_, l)| l).collect();
        let b: Vec<Vec<u16>> = set.batches(8, Some(9)).map(|(_, l)| l).collect();
        let c: Vec<Vec<u16>> = set.batches(8, Some(10)).map(|(_, l)| l).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn validate_rejects_out_of_range_values() {
        let mut set = tiny_set(2);
        set.pixels[5] = 1.5;
        assert!(set.validate(3).is_err());
    }
}
