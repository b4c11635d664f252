//! Chip derivation from 8-band scene rasters with box annotations.
//!
//! Scenes use a raw container (`"MSSCENE1"` magic, u16 channels, u16 reserved,
//! u32 height, u32 width, then [C,H,W] little-endian f32 sensor values);
//! annotations are a JSON file listing scenes, their split, and boxes. GeoTIFF
//! conversion and 30 cm GSD resampling happen in external tooling; the
//! annotation file asserts the resampling with a flag.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{standard_band_order, ChipDataset, ChipSet, DatasetManifest, CHIP_SIDE, CLASS_CAP, NORMALIZATION_DIVISOR};
use crate::error::{Error, Result};

const SCENE_MAGIC: &[u8; 8] = b"MSSCENE1";

/// Raw scene raster: `values` is [channels, height, width].
pub struct Scene {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    if scene.values.len() != scene.channels * scene.height * scene.width {
        return Err(Error::dimension("write_scene", "value buffer does not match geometry".to_string()));
    }
    let mut out = Vec::with_capacity(16 + scene.values.len() * 4);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&(scene.channels as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(scene.height as u32).to_le_bytes());
    out.extend_from_slice(&(scene.width as u32).to_le_bytes());
    for &v in &scene.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 {
        return Err(Error::Format { offset: bytes.len() as u64, message: "scene shorter than header".into() });
    }
    if &bytes[0..8] != SCENE_MAGIC {
        return Err(Error::Format { offset: 0, message: "bad scene magic".into() });
    }
    let channels = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expect = 20 + channels * height * width * 4;
    if bytes.len() != expect {
        return Err(Error::Format {
            offset: bytes.len().min(expect) as u64,
            message: format!("scene payload is {} bytes, header implies {}", bytes.len(), expect),
        });
    }
    let values = bytes[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Scene { channels, height, width, values })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub label: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub file: String,
    pub split: String,
    pub gsd_resampled_30cm: bool,
    pub boxes: Vec<SceneBox>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotations {
    pub class_names: Vec<String>,
    pub scenes: Vec<SceneAnnotation>,
}

#[derive(Clone, Debug)]
pub struct DeriveConfig {
    /// Per-class cap applied to the train pool before splitting.
    pub class_cap: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DeriveConfig {
    fn default() -> Self {
        DeriveConfig { class_cap: CLASS_CAP, val_fraction: 0.1, seed: 0 }
    }
}

/// Chip side before resizing: the box's longest dimension padded by 5 px on
/// each side.
pub fn chip_side(w: i64, h: i64) -> i64 {
    w.max(h) + 10
}

/// Bilinear resample of one channel plane.
fn resize_plane(src: &[f32], h_in: usize, w_in: usize, h_out: usize, w_out: usize, dst: &mut [f32]) {
    let sy = h_in as f32 / h_out as f32;
    let sx = w_in as f32 / w_out as f32;
    for oy in 0..h_out {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h_in - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h_in - 1);
        let wy = fy - y0 as f32;
        for ox in 0..w_out {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w_in - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w_in - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * w_in + x0] * (1.0 - wx) + src[y0 * w_in + x1] * wx;
            let bot = src[y1 * w_in + x0] * (1.0 - wx) + src[y1 * w_in + x1] * wx;
            dst[oy * w_out + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
}

/// Crop, normalize by the sensor maximum, clamp to [0,1], resize to 32x32.
fn extract_chip(scene: &Scene, sx: i64, sy: i64, side: i64) -> Vec<f32> {
    let side = side as usize;
    let (sx, sy) = (sx as usize, sy as usize);
    let mut chip = vec![0.0f32; scene.channels * CHIP_SIDE * CHIP_SIDE];
    let mut crop = vec![0.0f32; side * side];
    for c in 0..scene.channels {
        let plane = &scene.values[c * scene.height * scene.width..(c + 1) * scene.height * scene.width];
        for y in 0..side {
            for x in 0..side {
                let raw = plane[(sy + y) * scene.width + (sx + x)];
                crop[y * side + x] = (raw / NORMALIZATION_DIVISOR).clamp(0.0, 1.0);
            }
        }
        resize_plane(&crop, side, side, CHIP_SIDE, CHIP_SIDE, &mut chip[c * CHIP_SIDE * CHIP_SIDE..(c + 1) * CHIP_SIDE * CHIP_SIDE]);
    }
    chip
}

/// Run the full derivation: crop square chips around each box, discard chips
/// crossing scene boundaries, cap the train pool per class, and split the
/// capped pool 90:10 stratified by class. Test-scene chips pass uncapped.
pub fn derive_chips(annotation_path: &Path, config: &DeriveConfig) -> Result<ChipDataset> {
    let ajson = std::fs::read(annotation_path)?;
    let annotations: Annotations = serde_json::from_slice(&ajson)?;
    if annotations.class_names.is_empty() {
        return Err(Error::Data("annotation file lists no classes".into()));
    }
    let class_ids: BTreeMap<&str, u16> = annotations
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i as u16))
        .collect();
    let base_dir = annotation_path.parent().unwrap_or_else(|| Path::new("."));

    // (pixels, label) pools in deterministic scene/box order
    let mut train_pool: Vec<(Vec<f32>, u16)> = Vec::new();
    let mut test_pool: Vec<(Vec<f32>, u16)> = Vec::new();
    for ann in &annotations.scenes {
        if !ann.gsd_resampled_30cm {
            return Err(Error::Data(format!(
                "scene {} is not flagged as resampled to 30 cm GSD",
                ann.file
            )));
        }
        let scene = match read_scene(&base_dir.join(&ann.file)) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("skipping scene {}: {}", ann.file, e);
                continue;
            }
        };
        if scene.channels != 8 {
            eprintln!("skipping scene {}: has {} bands, need 8", ann.file, scene.channels);
            continue;
        }
        let is_test = ann.split == "test";
        for (bi, b) in ann.boxes.iter().enumerate() {
            let label = match class_ids.get(b.label.as_str()) {
                Some(&id) => id,
                None => {
                    eprintln!("skipping box {} in {}: unknown label '{}'", bi, ann.file, b.label);
                    continue;
                }
            };
            if b.w <= 0 || b.h <= 0 {
                eprintln!("skipping box {} in {}: non-positive extent", bi, ann.file);
                continue;
            }
            let side = chip_side(b.w, b.h);
            let sx = b.x + (b.w - side) / 2;
            let sy = b.y + (b.h - side) / 2;
            if sx < 0 || sy < 0 || sx + side > scene.width as i64 || sy + side > scene.height as i64 {
                continue; // crosses the image boundary
            }
            let chip = extract_chip(&scene, sx, sy, side);
            if is_test {
                test_pool.push((chip, label));
            } else {
                train_pool.push((chip, label));
            }
        }
    }
    if train_pool.is_empty() && test_pool.is_empty() {
        return Err(Error::Data("derivation produced no chips".into()));
    }

    // Cap per class and split, stratified, with a seeded shuffle.
    let k = annotations.class_names.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, (_, label)) in train_pool.iter().enumerate() {
        by_class[*label as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = ChipSet::default();
    let mut val = ChipSet::default();
    for ids in by_class.iter_mut() {
        ids.shuffle(&mut rng);
        ids.truncate(config.class_cap);
        let val_n = (ids.len() as f64 * config.val_fraction).round() as usize;
        for (j, &i) in ids.iter().enumerate() {
            let (chip, label) = &train_pool[i];
            if j < val_n {
                val.push(chip, *label);
            } else {
                train.push(chip, *label);
            }
        }
    }
    let mut test = ChipSet::default();
    for (chip, label) in &test_pool {
        test.push(chip, *label);
    }

    let manifest = DatasetManifest {
        class_names: annotations.class_names.clone(),
        class_counts: BTreeMap::new(),
        band_order: standard_band_order(),
        normalization_divisor: NORMALIZATION_DIVISOR,
        seed: config.seed,
        gsd_resampled_30cm: true,
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
    fn chip_side_pads_longest_dimension() {
        assert_eq!(chip_side(20, 14), 30);
        assert_eq!(chip_side(3, 9), 19);
    }

    #[test]
    fn resize_preserves_constant_planes() {
        let src = vec![0.37f32; 10 * 10];
        let mut dst = vec![0.0f32; CHIP_SIDE * CHIP_SIDE];
        resize_plane(&src, 10, 10, CHIP_SIDE, CHIP_SIDE, &mut dst);
        assert!(dst.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn normalization_maps_sensor_max_to_one() {
        let scene = Scene {
            channels: 8,
            height: 40,
            width: 40,
            values: vec![NORMALIZATION_DIVISOR; 8 * 40 * 40],
        };
        let chip = extract_chip(&scene, 0, 0, 30);
        assert!(chip.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn values_above_max_clamp_to_one() {
        let scene = Scene {
            channels: 8,
            height: 40,
            width: 40,
            values: vec![2.0 * NORMALIZATION_DIVISOR; 8 * 40 * 40],
        };
        let chip = extract_chip(&scene, 2, 2, 20);
        assert!(chip.iter().all(|&v| v == 1.0));
    }
}
