//! Layer zoo: co-domain-symmetric complex layers and the real-valued layers
//! used by baseline CNNs.
//!
//! Complex parameters are stored as separate re/im arrays, so checkpoint
//! payloads and parameter counts see plain real tensors (a complex weight
//! contributes two of them).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::complex::{complex_add, complex_conv2d, conj_mul, magnitude_sq, ComplexVar};
use crate::error::{Error, Result};
use crate::tensor::{Array, NodeId, Scalar, Tape};

/// Normalization epsilon inside `sqrt(sigma^2 + eps)`. Small enough that
/// batch-stats scale invariance holds to 1e-5 even at |s| = 0.1.
pub const EPS_BN: f64 = 1e-8;

/// Default EMA momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatMode {
    BatchStats,
    RunningStats,
}

/// Governs normalization statistics. Running statistics update only when
/// `training` and `stat == BatchStats`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMode {
    pub stat: StatMode,
    pub training: bool,
}

impl LayerMode {
    pub fn train() -> Self {
        LayerMode { stat: StatMode::BatchStats, training: true }
    }

    pub fn eval() -> Self {
        LayerMode { stat: StatMode::RunningStats, training: false }
    }

    pub fn batch_eval() -> Self {
        LayerMode { stat: StatMode::BatchStats, training: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Array<T>,
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        self.entries.push(Param { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    /// Total real scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }
}

/// Non-trainable state (running statistics).
#[derive(Clone, Debug, Default)]
pub struct BufStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> BufStore<T> {
    pub fn new() -> Self {
        BufStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array<T>) -> BufId {
        self.entries.push(Param { name: name.into(), value });
        BufId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn get(&self, id: BufId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: BufId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }
}

/// A feature map travelling through a model: real for baselines, complex for
/// CDS networks.
#[derive(Clone, Copy, Debug)]
pub enum Feat {
    Real(NodeId),
    Complex(ComplexVar),
}

impl Feat {
    pub fn expect_real(self) -> Result<NodeId> {
        match self {
            Feat::Real(id) => Ok(id),
            Feat::Complex(_) => Err(Error::Contract("expected a real feature map, got complex".into())),
        }
    }

    pub fn expect_complex(self) -> Result<ComplexVar> {
        match self {
            Feat::Complex(v) => Ok(v),
            Feat::Real(_) => Err(Error::Contract("expected a complex feature map, got real".into())),
        }
    }
}

/// Everything a layer needs during one forward pass.
pub struct FwdCtx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    /// Tape nodes for every parameter, indexed by `ParamId`.
    pub bound: &'a [NodeId],
    pub bufs: &'a mut BufStore<T>,
    pub mode: LayerMode,
}

#[derive(Clone, Debug)]
pub enum Layer {
    /// Complex-scale equivariant convolution; never has a bias.
    Econv {
        w_re: ParamId,
        w_im: ParamId,
        groups: usize,
        stride: usize,
        padding: usize,
    },
    /// x (x) conj(Econv_1x1(x)): converts complex scaling s into |s|^2.
    Conjugate { w_re: ParamId, w_im: ParamId },
    /// Radial normalization by root-mean-square magnitude with a positive
    /// per-channel gain (stored as its logarithm).
    ComplexBatchNorm {
        log_gain: ParamId,
        running_msq: BufId,
        momentum: f64,
        eps: f64,
    },
    /// Component-wise ReLU on re and im.
    CRelu,
    /// Select the element of maximum magnitude per window (re and im from the
    /// same position).
    EqMaxPool { window: usize },
    /// x + branch(x) with an identity skip.
    ResBlock { branch: Vec<Layer> },
    /// Concatenate re/im into a real vector and apply an affine map.
    Head { w: ParamId, b: ParamId },
    Conv2dReal {
        w: ParamId,
        b: Option<ParamId>,
        groups: usize,
        stride: usize,
        padding: usize,
    },
    BatchNormReal {
        gamma: ParamId,
        beta: ParamId,
        run_mean: BufId,
        run_var: BufId,
        momentum: f64,
        eps: f64,
    },
    ReluReal,
    MaxPoolReal { window: usize },
    GlobalAvgPool,
    /// [N,C,H,W] -> [N, C*H*W].
    Flatten,
    FcReal { w: ParamId, b: ParamId },
}

fn uniform_array<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Array::new(shape.to_vec(), data).expect("sampled shape")
}

impl Layer {
    /// Complex conv weights: re and im each uniform with bound 1/sqrt(2*fan_in),
    /// the 2 accounting for the two real components per complex weight.
    pub fn econv<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Layer {
        let fan_in = (in_ch / groups) * k * k;
        let bound = 1.0 / (2.0 * fan_in as f64).sqrt();
        let shape = [out_ch, in_ch / groups, k, k];
        let w_re = ps.register(format!("{name}.w_re"), uniform_array(rng, &shape, bound));
        let w_im = ps.register(format!("{name}.w_im"), uniform_array(rng, &shape, bound));
        Layer::Econv { w_re, w_im, groups, stride, padding }
    }

    pub fn conjugate<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Layer {
        let bound = 1.0 / (2.0 * channels as f64).sqrt();
        let shape = [channels, channels, 1, 1];
        let w_re = ps.register(format!("{name}.w_re"), uniform_array(rng, &shape, bound));
        let w_im = ps.register(format!("{name}.w_im"), uniform_array(rng, &shape, bound));
        Layer::Conjugate { w_re, w_im }
    }

    pub fn complex_batch_norm<T: Scalar>(ps: &mut ParamStore<T>, bufs: &mut BufStore<T>, name: &str, channels: usize) -> Layer {
        let log_gain = ps.register(format!("{name}.log_gain"), Array::zeros(&[channels]));
        let running_msq = bufs.register(format!("{name}.running_msq"), Array::full(&[channels], T::one()));
        Layer::ComplexBatchNorm { log_gain, running_msq, momentum: BN_MOMENTUM, eps: EPS_BN }
    }

    pub fn head<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize, classes: usize) -> Layer {
        let fan_in = 2 * channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ps.register(format!("{name}.w"), uniform_array(rng, &[fan_in, classes], bound));
        let b = ps.register(format!("{name}.b"), Array::zeros(&[classes]));
        Layer::Head { w, b }
    }

    pub fn conv2d_real<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Layer {
        let fan_in = (in_ch / groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ps.register(format!("{name}.w"), uniform_array(rng, &[out_ch, in_ch / groups, k, k], bound));
        let b = bias.then(|| ps.register(format!("{name}.b"), Array::zeros(&[out_ch])));
        Layer::Conv2dReal { w, b, groups, stride, padding }
    }

    pub fn batch_norm_real<T: Scalar>(ps: &mut ParamStore<T>, bufs: &mut BufStore<T>, name: &str, channels: usize) -> Layer {
        let gamma = ps.register(format!("{name}.gamma"), Array::full(&[channels], T::one()));
        let beta = ps.register(format!("{name}.beta"), Array::zeros(&[channels]));
        let run_mean = bufs.register(format!("{name}.running_mean"), Array::zeros(&[channels]));
        let run_var = bufs.register(format!("{name}.running_var"), Array::full(&[channels], T::one()));
        Layer::BatchNormReal { gamma, beta, run_mean, run_var, momentum: BN_MOMENTUM, eps: 1e-5 }
    }

    pub fn fc_real<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, out: usize) -> Layer {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ps.register(format!("{name}.w"), uniform_array(rng, &[fan_in, out], bound));
        let b = ps.register(format!("{name}.b"), Array::zeros(&[out]));
        Layer::FcReal { w, b }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut FwdCtx<'_, T>, input: Feat) -> Result<Feat> {
        match self {
            Layer::Econv { w_re, w_im, groups, stride, padding } => {
                let x = input.expect_complex()?;
                let w = ComplexVar::new(ctx.bound[w_re.0], ctx.bound[w_im.0]);
                let y = complex_conv2d(ctx.tape, x, w, *groups, *stride, *padding)?;
                Ok(Feat::Complex(y))
            }
            Layer::Conjugate { w_re, w_im } => {
                let x = input.expect_complex()?;
                let w = ComplexVar::new(ctx.bound[w_re.0], ctx.bound[w_im.0]);
                let paired = complex_conv2d(ctx.tape, x, w, 1, 1, 0)?;
                let y = conj_mul(ctx.tape, x, paired)?;
                Ok(Feat::Complex(y))
            }
            Layer::ComplexBatchNorm { log_gain, running_msq, momentum, eps } => {
                let x = input.expect_complex()?;
                let msq = magnitude_sq(ctx.tape, x)?;
                let channels = ctx.tape.shape(msq)[1];
                let sigma2 = match ctx.mode.stat {
                    StatMode::BatchStats => {
                        let s = ctx.tape.channel_mean(msq)?;
                        if ctx.mode.training {
                            let batch = ctx.tape.value(s).clone();
                            let run = ctx.bufs.get_mut(*running_msq);
                            let m = T::from_f64(*momentum);
                            for (r, &b) in run.value.data_mut().iter_mut().zip(batch.data()) {
                                *r = (T::one() - m) * *r + m * b;
                            }
                        }
                        s
                    }
                    StatMode::RunningStats => {
                        let run = ctx.bufs.get(*running_msq).value.clone();
                        if run.numel() != channels {
                            return Err(Error::dimension(
                                "complex_batch_norm",
                                format!("running stats for {} channels, input has {}", run.numel(), channels),
                            ));
                        }
                        ctx.tape.constant(run)
                    }
                };
                let shifted = ctx.tape.add_scalar(sigma2, *eps);
                let denom = ctx.tape.sqrt(shifted);
                let ones = ctx.tape.constant(Array::full(&[channels], T::one()));
                let inv = ctx.tape.div(ones, denom)?;
                let gain = ctx.tape.exp(ctx.bound[log_gain.0]);
                let scale = ctx.tape.mul(gain, inv)?;
                let re = ctx.tape.channel_mul(x.re, scale)?;
                let im = ctx.tape.channel_mul(x.im, scale)?;
                Ok(Feat::Complex(ComplexVar::new(re, im)))
            }
            Layer::CRelu => {
                let x = input.expect_complex()?;
                let re = ctx.tape.relu(x.re);
                let im = ctx.tape.relu(x.im);
                Ok(Feat::Complex(ComplexVar::new(re, im)))
            }
            Layer::EqMaxPool { window } => {
                let x = input.expect_complex()?;
                let msq = magnitude_sq(ctx.tape, x)?;
                let (out_shape, idx) = ctx.tape.pool_argmax_of(msq, *window)?;
                let re = ctx.tape.gather_spatial(x.re, idx.clone(), &out_shape)?;
                let im = ctx.tape.gather_spatial(x.im, idx, &out_shape)?;
                Ok(Feat::Complex(ComplexVar::new(re, im)))
            }
            Layer::ResBlock { branch } => {
                let x = input.expect_complex()?;
                let mut cur = Feat::Complex(x);
                for layer in branch {
                    cur = layer.forward(ctx, cur)?;
                }
                let b = cur.expect_complex()?;
                if ctx.tape.shape(x.re) != ctx.tape.shape(b.re) {
                    return Err(Error::dimension(
                        "resblock",
                        format!(
                            "branch output {:?} must match input {:?}",
                            ctx.tape.shape(b.re),
                            ctx.tape.shape(x.re)
                        ),
                    ));
                }
                Ok(Feat::Complex(complex_add(ctx.tape, x, b)?))
            }
            Layer::Head { w, b } => {
                let x = input.expect_complex()?;
                let s = ctx.tape.shape(x.re).to_vec();
                if s.len() != 4 || s[2] != 1 || s[3] != 1 {
                    return Err(Error::dimension("head", format!("expected [N,C,1,1], got {:?}", s)));
                }
                let cat = ctx.tape.concat_channels(&[x.re, x.im])?;
                let flat = ctx.tape.reshape(cat, &[s[0], 2 * s[1]])?;
                let proj = ctx.tape.matmul(flat, ctx.bound[w.0])?;
                let out = ctx.tape.add(proj, ctx.bound[b.0])?;
                Ok(Feat::Real(out))
            }
            Layer::Conv2dReal { w, b, groups, stride, padding } => {
                let x = input.expect_real()?;
                let mut y = ctx.tape.conv2d(x, ctx.bound[w.0], *groups, *stride, *padding)?;
                if let Some(b) = b {
                    y = ctx.tape.channel_add(y, ctx.bound[b.0])?;
                }
                Ok(Feat::Real(y))
            }
            Layer::BatchNormReal { gamma, beta, run_mean, run_var, momentum, eps } => {
                let x = input.expect_real()?;
                let channels = ctx.tape.shape(x)[1];
                let (mu, var) = match ctx.mode.stat {
                    StatMode::BatchStats => {
                        let mu = ctx.tape.channel_mean(x)?;
                        let x2 = ctx.tape.mul(x, x)?;
                        let ex2 = ctx.tape.channel_mean(x2)?;
                        let mu2 = ctx.tape.mul(mu, mu)?;
                        let var = ctx.tape.sub(ex2, mu2)?;
                        if ctx.mode.training {
                            let m = T::from_f64(*momentum);
                            let mu_v = ctx.tape.value(mu).clone();
                            let var_v = ctx.tape.value(var).clone();
                            let rm = ctx.bufs.get_mut(*run_mean);
                            for (r, &v) in rm.value.data_mut().iter_mut().zip(mu_v.data()) {
                                *r = (T::one() - m) * *r + m * v;
                            }
                            let rv = ctx.bufs.get_mut(*run_var);
                            for (r, &v) in rv.value.data_mut().iter_mut().zip(var_v.data()) {
                                *r = (T::one() - m) * *r + m * v;
                            }
                        }
                        (mu, var)
                    }
                    StatMode::RunningStats => {
                        let mu = ctx.tape.constant(ctx.bufs.get(*run_mean).value.clone());
                        let var = ctx.tape.constant(ctx.bufs.get(*run_var).value.clone());
                        (mu, var)
                    }
                };
                let neg_mu = ctx.tape.neg(mu);
                let centered = ctx.tape.channel_add(x, neg_mu)?;
                let shifted = ctx.tape.add_scalar(var, *eps);
                let denom = ctx.tape.sqrt(shifted);
                let ones = ctx.tape.constant(Array::full(&[channels], T::one()));
                let inv = ctx.tape.div(ones, denom)?;
                let scale = ctx.tape.mul(ctx.bound[gamma.0], inv)?;
                let scaled = ctx.tape.channel_mul(centered, scale)?;
                let out = ctx.tape.channel_add(scaled, ctx.bound[beta.0])?;
                Ok(Feat::Real(out))
            }
            Layer::ReluReal => {
                let x = input.expect_real()?;
                Ok(Feat::Real(ctx.tape.relu(x)))
            }
            Layer::MaxPoolReal { window } => {
                let x = input.expect_real()?;
                Ok(Feat::Real(ctx.tape.maxpool2d(x, *window)?))
            }
            Layer::GlobalAvgPool => {
                let x = input.expect_real()?;
                Ok(Feat::Real(ctx.tape.spatial_mean(x)?))
            }
            Layer::Flatten => {
                let x = input.expect_real()?;
                let s = ctx.tape.shape(x).to_vec();
                let flat: usize = s[1..].iter().product();
                Ok(Feat::Real(ctx.tape.reshape(x, &[s[0], flat])?))
            }
            Layer::FcReal { w, b } => {
                let x = input.expect_real()?;
                let proj = ctx.tape.matmul(x, ctx.bound[w.0])?;
                Ok(Feat::Real(ctx.tape.add(proj, ctx.bound[b.0])?))
            }
        }
    }

    /// Child layers (resblock branch), for walks over a whole model.
    pub fn children(&self) -> &[Layer] {
        match self {
            Layer::ResBlock { branch } => branch,
            _ => &[],
        }
    }
}
