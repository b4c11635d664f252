//! AdamW optimization, augmentation, and the step-based training loop with
//! periodic validation and best-checkpoint retention.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ChipDataset, ChipSet, CHIP_CHANNELS, CHIP_SIDE};
use crate::error::{Error, Result};
use crate::layers::LayerMode;
use crate::metrics::{class_accuracy, instance_accuracy, predict_classes};
use crate::models::ModelGraph;
use crate::tensor::{Array, Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augmentation {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "flips-crops")]
    FlipsCrops,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub total_batches: u64,
    pub validate_every: u64,
    pub augmentation: Augmentation,
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_precision() -> Precision {
    Precision::F32
}

impl Default for TrainConfig {
    /// The paper's protocol: AdamW, batch 16, lr 1e-4, weight decay 1e-2,
    /// 15000 batches, validation every 200 steps.
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            total_batches: 15_000,
            validate_every: 200,
            augmentation: Augmentation::None,
            seed: 42,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_batches == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch size, total batches and validate-every must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay: the decay term is applied directly to
/// the parameters, never through the moments.
pub struct AdamW<T> {
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: impl Iterator<Item = Vec<usize>>) -> Self {
        let shapes: Vec<Vec<usize>> = shapes.collect();
        AdamW {
            m: shapes.iter().map(|s| Array::zeros(s)).collect(),
            v: shapes.iter().map(|s| Array::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `grads[i] = None` skips parameter i.
    /// A non-finite gradient aborts with the parameter's name.
    pub fn step(
        &mut self,
        params: &mut crate::layers::ParamStore<T>,
        grads: &[Option<&Array<T>>],
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (nb1, nb2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let (ibc1, ibc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr_t, wd_t, eps_t) = (T::from_f64(lr), T::from_f64(wd), T::from_f64(self.eps));

        for (i, param) in params.values_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: self.step,
                    message: format!("NaN gradient for parameter '{}'", param.name),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((theta, &gv), (mv, vv)) in param.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mv = b1 * *mv + nb1 * gv;
                *vv = b2 * *vv + nb2 * gv * gv;
                let m_hat = *mv * ibc1;
                let v_hat = *vv * ibc2;
                *theta = *theta - lr_t * (m_hat / (v_hat.sqrt() + eps_t) + wd_t * *theta);
            }
        }
        Ok(())
    }
}

/// Apply the augmentation policy to a `[B,8,32,32]` batch in place.
/// `flips-crops`: independent horizontal/vertical flips (p = 0.5 each) and a
/// random crop after 4-pixel zero padding.
pub fn augment(batch: &mut Array<f32>, policy: Augmentation, rng: &mut ChaCha8Rng) {
    if policy == Augmentation::None {
        return;
    }
    const PAD: usize = 4;
    let shape = batch.shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = batch.data_mut();
    let plane = h * w;
    let mut padded = vec![0.0f32; (h + 2 * PAD) * (w + 2 * PAD)];
    for n in 0..b {
        let hflip = rng.gen::<f32>() < 0.5;
        let vflip = rng.gen::<f32>() < 0.5;
        let dy = rng.gen_range(0..=2 * PAD);
        let dx = rng.gen_range(0..=2 * PAD);
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let src = &mut data[base..base + plane];
            if hflip {
                for row in src.chunks_exact_mut(w) {
                    row.reverse();
                }
            }
            if vflip {
                for y in 0..h / 2 {
                    for x in 0..w {
                        src.swap(y * w + x, (h - 1 - y) * w + x);
                    }
                }
            }
            padded.fill(0.0);
            let pw = w + 2 * PAD;
            for y in 0..h {
                padded[(y + PAD) * pw + PAD..(y + PAD) * pw + PAD + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
            for y in 0..h {
                for x in 0..w {
                    src[y * w + x] = padded[(y + dy) * pw + (x + dx)];
                }
            }
        }
    }
}

/// One JSONL record per optimization step, one per validation event.
#[derive(Serialize)]
struct StepRecord {
    step: u64,
    loss: f64,
}

#[derive(Serialize)]
struct ValRecord {
    step: u64,
    val_i_acc: f64,
    val_c_acc: f64,
    is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_val_i_acc: f64,
    pub best_val_c_acc: f64,
    pub best_step: u64,
    pub validation_events: u64,
    pub final_loss: f64,
}

/// Flat `[n*k]` logits for a whole split, evaluated in batches.
pub fn collect_logits<T: Scalar>(
    model: &mut ModelGraph<T>,
    set: &ChipSet,
    batch_size: usize,
    mode: LayerMode,
) -> Result<(Vec<f32>, Vec<u16>)> {
    let mut logits = Vec::with_capacity(set.len() * model.config.num_classes);
    let mut labels = Vec::with_capacity(set.len());
    for (batch, batch_labels) in set.batches(batch_size, None) {
        let cast: Array<T> = batch.cast();
        let out = model.predict(&cast, mode)?;
        logits.extend(out.data().iter().map(|&v| v.to_f64() as f32));
        labels.extend(batch_labels);
    }
    Ok((logits, labels))
}

fn validate_accuracy<T: Scalar>(model: &mut ModelGraph<T>, set: &ChipSet) -> Result<(f64, f64)> {
    let k = model.config.num_classes;
    let (logits, labels) = collect_logits(model, set, 64, LayerMode::eval())?;
    let preds = predict_classes(&logits, k, None)?;
    Ok((instance_accuracy(&preds, &labels)?, class_accuracy(&preds, &labels, k)?))
}

/// Run exactly `total_batches` AdamW steps, validating on instance accuracy
/// every `validate_every` steps in running-stats eval mode, and return the
/// best-validation snapshot (ties keep the earliest).
pub fn train<T: Scalar>(
    model: &mut ModelGraph<T>,
    dataset: &ChipDataset,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(ModelGraph<T>, TrainOutcome)> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if dataset.val.is_empty() {
        return Err(Error::Data("val split is empty".into()));
    }

    let mut opt = AdamW::new(model.params.iter().map(|p| p.value.shape().to_vec()));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEECE66D);
    let mut best: Option<(ModelGraph<T>, f64, f64, u64)> = None;
    let mut step: u64 = 0;
    let mut epoch: u64 = 0;
    let mut final_loss = f64::NAN;
    let mut validation_events = 0u64;

    'outer: loop {
        let epoch_seed = config.seed.wrapping_add(epoch.wrapping_mul(0x9E3779B97F4A7C15));
        for (mut batch, labels) in dataset.train.batches(config.batch_size, Some(epoch_seed)) {
            step += 1;
            augment(&mut batch, config.augmentation, &mut aug_rng);
            let cast: Array<T> = batch.cast();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let logits = model.forward(&mut tape, &bound, &cast, LayerMode::train())?;
            let logp = tape.log_softmax(logits)?;
            let loss = tape.nll_mean(logp, &labels)?;
            let loss_v = tape.value(loss).data()[0].to_f64();
            if !loss_v.is_finite() {
                return Err(Error::Numerical { step, message: format!("loss diverged to {loss_v}") });
            }
            final_loss = loss_v;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &StepRecord { step, loss: loss_v })?;
                writeln!(w)?;
            }
            tape.backward(loss)?;
            let grads: Vec<Option<&Array<T>>> = bound.iter().map(|&id| tape.grad(id)).collect();
            opt.step(&mut model.params, &grads, config.learning_rate, config.weight_decay)?;

            if step % config.validate_every == 0 {
                let (i_acc, c_acc) = validate_accuracy(model, &dataset.val)?;
                validation_events += 1;
                let is_best = best.as_ref().map_or(true, |(_, bi, _, _)| i_acc > *bi);
                if is_best {
                    best = Some((model.clone(), i_acc, c_acc, step));
                }
                if let Some(w) = log.as_deref_mut() {
                    serde_json::to_writer(&mut *w, &ValRecord { step, val_i_acc: i_acc, val_c_acc: c_acc, is_best })?;
                    writeln!(w)?;
                }
            }
            if step >= config.total_batches {
                break 'outer;
            }
        }
        epoch += 1;
    }

    let (best_model, best_i, best_c, best_step) = match best {
        Some(b) => b,
        // No validation event fired (total_batches < validate_every): fall
        // back to the final state.
        None => (model.clone(), f64::NAN, f64::NAN, step),
    };
    Ok((
        best_model,
        TrainOutcome {
            best_val_i_acc: best_i,
            best_val_c_acc: best_c,
            best_step,
            validation_events,
            final_loss,
        },
    ))
}

pub fn chip_batch_shape(batch: usize) -> [usize; 4] {
    [batch, CHIP_CHANNELS, CHIP_SIDE, CHIP_SIDE]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamStore;

    #[test]
    fn zero_grad_weight_decay_is_pure_shrink() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        ps.register("w", Array::from_f64_slice(&[2], &[1.0, -2.0]).unwrap());
        let mut opt = AdamW::new(ps.iter().map(|p| p.value.shape().to_vec()));
        let g = Array::zeros(&[2]);
        let (lr, wd) = (0.1, 0.5);
        opt.step(&mut ps, &[Some(&g)], lr, wd).unwrap();
        let expect = [1.0 * (1.0 - lr * wd), -2.0 * (1.0 - lr * wd)];
        let got = ps.get(crate::layers::ParamId(0)).value.data();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        ps.register("w", Array::scalar(5.0));
        let mut opt = AdamW::new(ps.iter().map(|p| p.value.shape().to_vec()));
        let g = Array::scalar(0.75);
        let lr = 1e-3;
        let mut prev = 5.0;
        let mut last_delta = 0.0;
        for _ in 0..500 {
            opt.step(&mut ps, &[Some(&g)], lr, 0.0).unwrap();
            let cur = ps.get(crate::layers::ParamId(0)).value.data()[0];
            last_delta = prev - cur;
            prev = cur;
        }
        // steady state of Adam under constant gradient: step size ~ lr
        assert!((last_delta - lr).abs() < lr * 0.01, "delta {last_delta}");
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut ps: ParamStore<f64> = ParamStore::new();
        ps.register("enc.w", Array::scalar(1.0));
        let mut opt = AdamW::new(ps.iter().map(|p| p.value.shape().to_vec()));
        let g = Array::scalar(f64::NAN);
        let err = opt.step(&mut ps, &[Some(&g)], 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("enc.w"), "got {err}");
    }

    #[test]
    fn augment_none_is_identity() {
        let mut batch = Array::new(vec![1, 8, 32, 32], (0..8 * 1024).map(|i| i as f32).collect()).unwrap();
        let original = batch.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        augment(&mut batch, Augmentation::None, &mut rng);
        assert_eq!(batch, original);
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let mut batch = Array::new(vec![1, 2, 4, 4], (0..32).map(|i| i as f32).collect()).unwrap();
        let original = batch.clone();
        let flip = |b: &mut Array<f32>| {
            for plane in b.data_mut().chunks_exact_mut(16) {
                for row in plane.chunks_exact_mut(4) {
                    row.reverse();
                }
            }
        };
        flip(&mut batch);
        flip(&mut batch);
        assert_eq!(batch, original);
    }

    #[test]
    fn augment_preserves_shape() {
        let mut batch = Array::full(&[3, 8, 32, 32], 0.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        augment(&mut batch, Augmentation::FlipsCrops, &mut rng);
        assert_eq!(batch.shape(), &[3, 8, 32, 32]);
    }
}
