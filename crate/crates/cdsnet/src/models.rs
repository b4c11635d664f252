//! Architecture builders, forward plumbing, and the checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complex::{ComplexVar};
use crate::encodings;
use crate::error::{Error, Result};
use crate::layers::{BufStore, Feat, FwdCtx, Layer, LayerMode, ParamStore};
use crate::tensor::{Array, NodeId, Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "cds-large")]
    CdsLarge,
    #[serde(rename = "cds-small")]
    CdsSmall,
    #[serde(rename = "baseline-cnn")]
    BaselineCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stem {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "conv1x1")]
    Conv1x1,
    #[serde(rename = "8band")]
    EightBand,
    #[serde(rename = "deep-8band")]
    Deep8Band,
    #[serde(rename = "average")]
    Average,
    #[serde(rename = "binned-average")]
    BinnedAverage,
}

impl std::str::FromStr for Stem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Stem::None),
            "conv1x1" => Ok(Stem::Conv1x1),
            "8band" => Ok(Stem::EightBand),
            "deep-8band" => Ok(Stem::Deep8Band),
            "average" => Ok(Stem::Average),
            "binned-average" => Ok(Stem::BinnedAverage),
            other => Err(Error::Config(format!(
                "unknown stem '{other}' (expected none|conv1x1|8band|deep-8band|average|binned-average)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Complex input channels for CDS models (7 after sliding-encoding 8
    /// bands); real input channels for baselines (8).
    pub input_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_stem")]
    pub stem: Stem,
    /// Channel-width multiplier relative to the large model; cds-small only.
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
}

fn default_stem() -> Stem {
    Stem::None
}

fn default_width() -> f64 {
    0.125
}

impl ModelConfig {
    pub fn cds_large() -> Self {
        ModelConfig {
            architecture: Architecture::CdsLarge,
            input_channels: 7,
            num_classes: 10,
            stem: Stem::None,
            width_multiplier: 1.0,
        }
    }

    pub fn cds_small() -> Self {
        ModelConfig {
            architecture: Architecture::CdsSmall,
            input_channels: 7,
            num_classes: 10,
            stem: Stem::None,
            width_multiplier: default_width(),
        }
    }

    pub fn baseline(stem: Stem) -> Self {
        ModelConfig {
            architecture: Architecture::BaselineCnn,
            input_channels: 8,
            num_classes: 10,
            stem,
            width_multiplier: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("input_channels and num_classes must be positive".into()));
        }
        match self.architecture {
            Architecture::CdsLarge | Architecture::CdsSmall => {
                if self.stem != Stem::None {
                    return Err(Error::Config(
                        "cds architectures take the sliding-encoded complex input; stems do not apply".into(),
                    ));
                }
                if self.width_multiplier <= 0.0 {
                    return Err(Error::Config("width_multiplier must be positive".into()));
                }
            }
            Architecture::BaselineCnn => {
                if self.input_channels != 8 && self.stem != Stem::None {
                    return Err(Error::Config("baseline stems expect 8-band input".into()));
                }
            }
        }
        Ok(())
    }
}

/// An ordered layer list with its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct ModelGraph<T> {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub params: ParamStore<T>,
    pub bufs: BufStore<T>,
}

/// Spatial window of the final pool in the CDS stack: collapses the 4x4 map
/// left from a 32x32 input to 1x1.
const FINAL_POOL: usize = 4;

fn build_cds_stack<T: Scalar>(
    ps: &mut ParamStore<T>,
    bufs: &mut BufStore<T>,
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    classes: usize,
    base: usize,
    rb2_groups: usize,
) -> Vec<Layer> {
    let (w1, w2, w3, w4) = (base, 2 * base, 4 * base, 8 * base);
    let resblock = |ps: &mut ParamStore<T>, bufs: &mut BufStore<T>, rng: &mut ChaCha8Rng, name: &str, ch: usize, groups: usize| {
        Layer::ResBlock {
            branch: vec![
                Layer::econv(ps, rng, &format!("{name}.econv1"), ch, ch, 3, groups, 1, 1),
                Layer::complex_batch_norm(ps, bufs, &format!("{name}.cbn1"), ch),
                Layer::CRelu,
                Layer::econv(ps, rng, &format!("{name}.econv2"), ch, ch, 3, groups, 1, 1),
                Layer::complex_batch_norm(ps, bufs, &format!("{name}.cbn2"), ch),
            ],
        }
    };
    vec![
        Layer::econv(ps, rng, "econv1", in_ch, w1, 3, 1, 1, 1),
        Layer::conjugate(ps, rng, "conj1", w1),
        Layer::econv(ps, rng, "econv2", w1, w1, 3, 2, 1, 1),
        Layer::complex_batch_norm(ps, bufs, "cbn1", w1),
        Layer::CRelu,
        Layer::econv(ps, rng, "econv3", w1, w2, 3, 2, 1, 1),
        Layer::complex_batch_norm(ps, bufs, "cbn2", w2),
        Layer::CRelu,
        Layer::EqMaxPool { window: 2 },
        resblock(ps, bufs, rng, "block1", w2, 2),
        Layer::econv(ps, rng, "econv4", w2, w3, 3, 4, 1, 1),
        Layer::complex_batch_norm(ps, bufs, "cbn3", w3),
        Layer::CRelu,
        Layer::EqMaxPool { window: 2 },
        Layer::econv(ps, rng, "econv5", w3, w4, 3, 2, 1, 1),
        Layer::complex_batch_norm(ps, bufs, "cbn4", w4),
        Layer::CRelu,
        Layer::EqMaxPool { window: 2 },
        resblock(ps, bufs, rng, "block2", w4, rb2_groups),
        Layer::EqMaxPool { window: FINAL_POOL },
        Layer::head(ps, rng, "head", w4, classes),
    ]
}

fn build_baseline_stack<T: Scalar>(
    ps: &mut ParamStore<T>,
    bufs: &mut BufStore<T>,
    rng: &mut ChaCha8Rng,
    config: &ModelConfig,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    // (trunk input channels, spatial extent entering the trunk for 32x32 chips)
    let (mut ch, mut spatial) = match config.stem {
        Stem::None => (config.input_channels, 32),
        Stem::Conv1x1 => {
            layers.push(Layer::conv2d_real(ps, rng, "stem", 8, 3, 1, 1, 1, 0, true));
            (3, 32)
        }
        Stem::EightBand => {
            layers.push(Layer::conv2d_real(ps, rng, "stem", 8, 64, 7, 1, 2, 3, false));
            layers.push(Layer::batch_norm_real(ps, bufs, "stem.bn", 64));
            layers.push(Layer::ReluReal);
            (64, 16)
        }
        Stem::Deep8Band => {
            layers.push(Layer::conv2d_real(ps, rng, "stem.conv1", 8, 32, 3, 1, 2, 1, false));
            layers.push(Layer::batch_norm_real(ps, bufs, "stem.bn1", 32));
            layers.push(Layer::ReluReal);
            layers.push(Layer::conv2d_real(ps, rng, "stem.conv2", 32, 32, 3, 1, 2, 1, false));
            layers.push(Layer::batch_norm_real(ps, bufs, "stem.bn2", 32));
            layers.push(Layer::ReluReal);
            layers.push(Layer::conv2d_real(ps, rng, "stem.conv3", 32, 64, 3, 1, 2, 1, false));
            (64, 4)
        }
        Stem::Average | Stem::BinnedAverage => (3, 32), // reduction happens in input prep
    };
    for (i, &width) in [64usize, 128, 256, 512].iter().enumerate() {
        let name = format!("stage{}", i + 1);
        layers.push(Layer::conv2d_real(ps, rng, &format!("{name}.conv"), ch, width, 3, 1, 1, 1, false));
        layers.push(Layer::batch_norm_real(ps, bufs, &format!("{name}.bn"), width));
        layers.push(Layer::ReluReal);
        ch = width;
        if i < 3 && spatial >= 2 && spatial % 2 == 0 {
            layers.push(Layer::MaxPoolReal { window: 2 });
            spatial /= 2;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Flatten);
    layers.push(Layer::fc_real(ps, rng, "fc", 512, config.num_classes));
    Ok(layers)
}

impl<T: Scalar> ModelGraph<T> {
    /// Build a model with deterministic, seed-controlled initialization.
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut ps = ParamStore::new();
        let mut bufs = BufStore::new();
        let layers = match config.architecture {
            Architecture::CdsLarge => {
                // Second residual block runs depthwise: with the table's
                // groups=4 its two 512-channel convolutions alone would more
                // than double the reported 1.75M parameter budget.
                let base = 64;
                build_cds_stack(&mut ps, &mut bufs, &mut rng, config.input_channels, config.num_classes, base, 8 * base)
            }
            Architecture::CdsSmall => {
                let base = ((64.0 * config.width_multiplier).round() as usize).max(4);
                let base = if base % 2 == 1 { base + 1 } else { base };
                build_cds_stack(&mut ps, &mut bufs, &mut rng, config.input_channels, config.num_classes, base, 4)
            }
            Architecture::BaselineCnn => build_baseline_stack(&mut ps, &mut bufs, &mut rng, config)?,
        };
        Ok(ModelGraph { config: config.clone(), layers, params: ps, bufs })
    }

    /// Total trainable real scalars (each complex weight counts as two).
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Insert every parameter as a tape leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Encode a raw band stack into this model's input feature.
    pub fn prepare_input(&self, tape: &mut Tape<T>, batch: &Array<T>) -> Result<Feat> {
        match self.config.architecture {
            Architecture::CdsLarge | Architecture::CdsSmall => {
                let (re, im) = encodings::sliding_encode(batch)?;
                if re.shape()[1] != self.config.input_channels {
                    return Err(Error::Data(format!(
                        "model expects {} complex channels, encoding produced {}",
                        self.config.input_channels,
                        re.shape()[1]
                    )));
                }
                let re = tape.constant(re);
                let im = tape.constant(im);
                Ok(Feat::Complex(ComplexVar::new(re, im)))
            }
            Architecture::BaselineCnn => {
                let prepared = match self.config.stem {
                    Stem::Average => encodings::reduce_average(batch)?,
                    Stem::BinnedAverage => encodings::reduce_binned(batch)?,
                    _ => batch.clone(),
                };
                Ok(Feat::Real(tape.constant(prepared)))
            }
        }
    }

    /// Run the layer stack on a prepared input feature.
    pub fn forward_feat(&mut self, tape: &mut Tape<T>, bound: &[NodeId], input: Feat, mode: LayerMode) -> Result<NodeId> {
        let ModelGraph { layers, bufs, .. } = self;
        let mut ctx = FwdCtx { tape, bound, bufs, mode };
        let mut feat = input;
        for layer in layers.iter() {
            feat = layer.forward(&mut ctx, feat)?;
        }
        feat.expect_real()
    }

    /// Full forward from a raw band stack to logits.
    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &[NodeId], batch: &Array<T>, mode: LayerMode) -> Result<NodeId> {
        let input = self.prepare_input(tape, batch)?;
        self.forward_feat(tape, bound, input, mode)
    }

    /// Inference helper: fresh tape, frozen parameters.
    pub fn predict(&mut self, batch: &Array<T>, mode: LayerMode) -> Result<Array<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &bound, batch, mode)?;
        Ok(tape.value(logits).clone())
    }

    /// Per-layer (kind, out-shape) trace for a given batch; shapes are
    /// `[C,H,W]` for feature maps and `[K]` for the final logits.
    pub fn shape_trace(&mut self, batch: &Array<T>, mode: LayerMode) -> Result<Vec<(String, Vec<usize>)>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let input = self.prepare_input(&mut tape, batch)?;
        let mut rows = Vec::new();
        let ModelGraph { layers, bufs, .. } = self;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, bufs, mode };
        let mut feat = input;
        for layer in layers.iter() {
            feat = layer.forward(&mut ctx, feat)?;
            let shape = match feat {
                Feat::Real(id) => ctx.tape.shape(id)[1..].to_vec(),
                Feat::Complex(v) => ctx.tape.shape(v.re)[1..].to_vec(),
            };
            rows.push((layer_kind(layer).to_string(), shape));
        }
        Ok(rows)
    }
}

pub fn layer_kind(layer: &Layer) -> &'static str {
    match layer {
        Layer::Econv { .. } => "Econv",
        Layer::Conjugate { .. } => "Conjugate",
        Layer::ComplexBatchNorm { .. } => "ComplexBatchNorm",
        Layer::CRelu => "CReLU",
        Layer::EqMaxPool { .. } => "EqMaxPool",
        Layer::ResBlock { .. } => "ResBlock",
        Layer::Head { .. } => "FullyConnected",
        Layer::Conv2dReal { .. } => "Conv2d",
        Layer::BatchNormReal { .. } => "BatchNorm",
        Layer::ReluReal => "ReLU",
        Layer::MaxPoolReal { .. } => "MaxPool",
        Layer::GlobalAvgPool => "GlobalAvgPool",
        Layer::Flatten => "Flatten",
        Layer::FcReal { .. } => "FullyConnected",
    }
}

// ---- checkpoint container ----------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"CDSCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    params: Vec<TensorEntry>,
    bufs: Vec<TensorEntry>,
}

/// Write model config, parameter names and little-endian f32 payloads.
/// Each array is prefixed with its element count as an integrity check.
pub fn save_checkpoint<T: Scalar>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
        bufs: model
            .bufs
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(mjson.len() + 64);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&mjson);
    for p in model.params.iter().chain(model.bufs.iter()) {
        out.extend_from_slice(&(p.value.numel() as u32).to_le_bytes());
        for &v in p.value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuild the model named by the embedded config and fill in its tensors.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelGraph<T>> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format {
                offset: *pos as u64,
                message: format!("truncated checkpoint: wanted {} bytes, {} remain", n, bytes.len() - *pos),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format { offset: 0, message: "bad checkpoint magic".into() });
    }
    let mlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(take(&mut pos, mlen)?)?;
    let mut model: ModelGraph<T> = ModelGraph::build(&manifest.config, 0)?;

    if manifest.params.len() != model.params.len() || manifest.bufs.len() != model.bufs.len() {
        return Err(Error::Format {
            offset: pos as u64,
            message: "checkpoint tensor list does not match the architecture".into(),
        });
    }
    let mut read_into = |pos: &mut usize, entry: &TensorEntry, value: &mut Array<T>, name: &str| -> Result<()> {
        if entry.name != name || entry.shape != value.shape() {
            return Err(Error::Format {
                offset: *pos as u64,
                message: format!(
                    "tensor mismatch: checkpoint has {} {:?}, model expects {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    value.shape()
                ),
            });
        }
        let count = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        if count != value.numel() {
            return Err(Error::Format {
                offset: *pos as u64,
                message: format!("length check failed for {}: payload {}, expected {}", name, count, value.numel()),
            });
        }
        let raw = take(pos, 4 * count)?;
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            value.data_mut()[i] = T::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Ok(())
    };
    for i in 0..manifest.params.len() {
        let entry = &manifest.params[i];
        let name = model.params.get(crate::layers::ParamId(i)).name.clone();
        let mut value = model.params.get(crate::layers::ParamId(i)).value.clone();
        read_into(&mut pos, entry, &mut value, &name)?;
        model.params.get_mut(crate::layers::ParamId(i)).value = value;
    }
    for i in 0..manifest.bufs.len() {
        let entry = &manifest.bufs[i];
        let name = model.bufs.get(crate::layers::BufId(i)).name.clone();
        let mut value = model.bufs.get(crate::layers::BufId(i)).value.clone();
        read_into(&mut pos, entry, &mut value, &name)?;
        model.bufs.get_mut(crate::layers::BufId(i)).value = value;
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - pos),
        });
    }
    Ok(model)
}

// Keep Read/Write imported lexically close to the container code; byte slices
// are handled directly above.
#[allow(unused_imports)]
use std::io::{BufRead as _};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_parameter_count_example() {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _fc = Layer::fc_real(&mut ps, &mut rng, "fc", 1024, 10);
        assert_eq!(ps.scalar_count(), 10_250);
    }

    #[test]
    fn grouped_econv_parameter_count_example() {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _e = Layer::econv(&mut ps, &mut rng, "e", 64, 128, 3, 2, 1, 1);
        assert_eq!(ps.scalar_count(), 2 * (128 * 32 * 3 * 3));
    }

    #[test]
    fn cds_large_parameter_count_near_paper_value() {
        let model: ModelGraph<f32> = ModelGraph::build(&ModelConfig::cds_large(), 7).unwrap();
        let count = model.parameter_count() as f64;
        let target = 1.75e6;
        assert!(
            (count - target).abs() / target <= 0.10,
            "CDS-Large has {} real parameters, expected within 10% of 1.75M",
            count
        );
    }

    #[test]
    fn cds_small_parameter_count_near_target() {
        let model: ModelGraph<f32> = ModelGraph::build(&ModelConfig::cds_small(), 7).unwrap();
        let count = model.parameter_count();
        assert!(
            (30_000..120_000).contains(&count),
            "cds-small should be in the tens of thousands of parameters, got {count}"
        );
    }

    #[test]
    fn baseline_variants_emit_ten_logits() {
        for stem in [Stem::Conv1x1, Stem::EightBand, Stem::Deep8Band, Stem::Average, Stem::BinnedAverage] {
            let mut model: ModelGraph<f32> = ModelGraph::build(&ModelConfig::baseline(stem), 3).unwrap();
            let batch = Array::full(&[2, 8, 32, 32], 0.25);
            let logits = model.predict(&batch, LayerMode::batch_eval()).unwrap();
            assert_eq!(logits.shape(), &[2, 10], "stem {:?}", stem);
        }
    }

    #[test]
    fn average_stem_is_permutation_invariant() {
        let mut model: ModelGraph<f32> = ModelGraph::build(&ModelConfig::baseline(Stem::Average), 11).unwrap();
        let mut data = Vec::new();
        for b in 0..8 {
            data.extend(std::iter::repeat((b as f32) * 0.1).take(32 * 32));
        }
        let batch = Array::new(vec![1, 8, 32, 32], data.clone()).unwrap();
        // reverse the band order
        let mut rev = Vec::new();
        for b in (0..8).rev() {
            rev.extend_from_slice(&data[b * 1024..(b + 1) * 1024]);
        }
        let batch_rev = Array::new(vec![1, 8, 32, 32], rev).unwrap();
        let a = model.predict(&batch, LayerMode::batch_eval()).unwrap();
        let b = model.predict(&batch_rev, LayerMode::batch_eval()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cds_rejects_stem_combination() {
        let mut cfg = ModelConfig::cds_large();
        cfg.stem = Stem::Average;
        assert!(ModelGraph::<f32>::build(&cfg, 0).is_err());
    }
}
