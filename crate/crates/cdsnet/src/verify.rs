//! Property suites: symmetry laws, finite-difference gradient checks, and
//! format round-trips. The CLI `verify` subcommand and the acceptance tests
//! both run these.
//!
//! The finite-difference oracle only ever evaluates forward passes, so it is
//! independent of the backward implementation it checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::complex::{complex_add, complex_conv2d, complex_scale, conj_mul, magnitude, ComplexScalar, ComplexVar};
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::encodings;
use crate::error::{Error, Result};
use crate::layers::{BufStore, Feat, FwdCtx, Layer, LayerMode, ParamStore};
use crate::models::{save_checkpoint, load_checkpoint, ModelConfig, ModelGraph};
use crate::tensor::{Array, NodeId, Scalar, Tape};

/// Relative L2 distance: ||a - b|| / max(||b||, floor).
pub fn rel_l2<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        diff += d * d;
        norm += y.to_f64() * y.to_f64();
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

#[derive(Clone, Debug)]
pub struct LawReport {
    pub law: String,
    pub trials: usize,
    pub worst: f64,
    pub tol: f64,
    pub pass: bool,
    pub seed: u64,
}

impl LawReport {
    fn new(law: &str, trials: usize, worst: f64, tol: f64, seed: u64) -> Self {
        LawReport { law: law.to_string(), trials, worst, tol, pass: worst <= tol, seed }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<42} worst rel {:>9.3e} (tol {:.1e}, {} trials, seed {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.law,
            self.worst,
            self.tol,
            self.trials,
            self.seed
        )
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    /// Test hook: add a constant bias after the equivariant convolution to
    /// confirm the suite detects the broken law.
    pub inject_econv_bias: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { trials: 200, seed: 0xCD5, inject_econv_bias: None }
    }
}

fn randn<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v * std)
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("randn shape")
}

/// Complex scalar with |s| log-uniform in [0.1, 10] and uniform phase.
fn random_scale(rng: &mut ChaCha8Rng) -> ComplexScalar {
    let r = 10f64.powf(rng.gen::<f64>() * 2.0 - 1.0);
    let theta = rng.gen::<f64>() * std::f64::consts::TAU;
    ComplexScalar::from_polar(r, theta)
}

fn leaf_complex<T: Scalar>(tape: &mut Tape<T>, re: &Array<T>, im: &Array<T>) -> ComplexVar {
    let r = tape.constant(re.clone());
    let i = tape.constant(im.clone());
    ComplexVar::new(r, i)
}

// ---------------------------------------------------------------------------
// symmetry laws
// ---------------------------------------------------------------------------

fn econv_equivariance(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x01);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let layer = Layer::econv(&mut ps, &mut rng, "e", 4, 6, 3, 2, 1, 1);
        let s = random_scale(&mut rng);
        let xr: Array<f32> = randn(&mut rng, &[2, 4, 6, 6], 1.0);
        let xi: Array<f32> = randn(&mut rng, &[2, 4, 6, 6], 1.0);

        let mut run = |scale_first: bool| -> Result<(Vec<f32>, Vec<f32>)> {
            let mut tape = Tape::new();
            let bound: Vec<NodeId> = ps.iter().map(|p| tape.constant(p.value.clone())).collect();
            let mut bufs = BufStore::new();
            let x = leaf_complex(&mut tape, &xr, &xi);
            let x = if scale_first { complex_scale(&mut tape, x, s)? } else { x };
            let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, bufs: &mut bufs, mode: LayerMode::batch_eval() };
            let y = layer.forward(&mut ctx, Feat::Complex(x))?.expect_complex()?;
            let mut y = y;
            if let Some(bias) = opts.inject_econv_bias {
                let shape = tape.shape(y.re).to_vec();
                let b = tape.constant(Array::full(&shape, bias as f32));
                let re = tape.add(y.re, b)?;
                y = ComplexVar::new(re, y.im);
            }
            let y = if scale_first { y } else { complex_scale(&mut tape, y, s)? };
            Ok((tape.value(y.re).data().to_vec(), tape.value(y.im).data().to_vec()))
        };
        let (lr, li) = run(true)?;
        let (rr, ri) = run(false)?;
        worst = worst.max(rel_l2(&lr, &rr)).max(rel_l2(&li, &ri));
    }
    Ok(LawReport::new("econv equivariance f(s*x) = s*f(x)", opts.trials, worst, 1e-5, opts.seed))
}

fn complex_conv_additivity(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x02);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let wr: Array<f32> = randn(&mut rng, &[4, 3, 3, 3], 0.3);
        let wi: Array<f32> = randn(&mut rng, &[4, 3, 3, 3], 0.3);
        let xs: Vec<Array<f32>> = (0..4).map(|_| randn(&mut rng, &[1, 3, 5, 5], 1.0)).collect();

        let mut tape = Tape::new();
        let w = leaf_complex(&mut tape, &wr, &wi);
        let x = leaf_complex(&mut tape, &xs[0], &xs[1]);
        let y = leaf_complex(&mut tape, &xs[2], &xs[3]);
        let sum = complex_add(&mut tape, x, y)?;
        let f_sum = complex_conv2d(&mut tape, sum, w, 1, 1, 1)?;
        let fx = complex_conv2d(&mut tape, x, w, 1, 1, 1)?;
        let fy = complex_conv2d(&mut tape, y, w, 1, 1, 1)?;
        let sum_f = complex_add(&mut tape, fx, fy)?;
        worst = worst
            .max(rel_l2(tape.value(f_sum.re).data(), tape.value(sum_f.re).data()))
            .max(rel_l2(tape.value(f_sum.im).data(), tape.value(sum_f.im).data()));
    }
    Ok(LawReport::new("complex conv additivity f(x+y) = f(x)+f(y)", opts.trials, worst, 1e-5, opts.seed))
}

fn conv_linearity(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x03);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let w: Array<f32> = randn(&mut rng, &[3, 2, 3, 3], 0.5);
        let x: Array<f32> = randn(&mut rng, &[2, 2, 6, 6], 1.0);
        let y: Array<f32> = randn(&mut rng, &[2, 2, 6, 6], 1.0);
        let a = rng.gen::<f64>() * 4.0 - 2.0;
        let b = rng.gen::<f64>() * 4.0 - 2.0;

        let mut tape = Tape::<f32>::new();
        let xw = tape.constant(x);
        let yw = tape.constant(y);
        let ww = tape.constant(w);
        let ax = tape.scale(xw, a);
        let by = tape.scale(yw, b);
        let mix = tape.add(ax, by)?;
        let lhs = tape.conv2d(mix, ww, 1, 1, 1)?;
        let cx = tape.conv2d(xw, ww, 1, 1, 1)?;
        let cy = tape.conv2d(yw, ww, 1, 1, 1)?;
        let acx = tape.scale(cx, a);
        let bcy = tape.scale(cy, b);
        let rhs = tape.add(acx, bcy)?;
        worst = worst.max(rel_l2(tape.value(lhs).data(), tape.value(rhs).data()));
    }
    Ok(LawReport::new("conv2d linearity in the input", opts.trials, worst, 1e-5, opts.seed))
}

fn conjugate_scale_law(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x04);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let layer = Layer::conjugate(&mut ps, &mut rng, "c", 5);
        let s = random_scale(&mut rng);
        let xr: Array<f32> = randn(&mut rng, &[2, 5, 4, 4], 1.0);
        let xi: Array<f32> = randn(&mut rng, &[2, 5, 4, 4], 1.0);

        let mut tape = Tape::new();
        let bound: Vec<NodeId> = ps.iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut bufs = BufStore::new();
        let x = leaf_complex(&mut tape, &xr, &xi);
        let sx = complex_scale(&mut tape, x, s)?;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, bufs: &mut bufs, mode: LayerMode::batch_eval() };
        let f_sx = layer.forward(&mut ctx, Feat::Complex(sx))?.expect_complex()?;
        let f_x = layer.forward(&mut ctx, Feat::Complex(x))?.expect_complex()?;
        let drop = ctx; // release the mutable borrow of tape
        drop.tape.len();
        let mag = ComplexScalar::new(s.abs_sq(), 0.0);
        let scaled = complex_scale(&mut tape, f_x, mag)?;
        worst = worst
            .max(rel_l2(tape.value(f_sx.re).data(), tape.value(scaled.re).data()))
            .max(rel_l2(tape.value(f_sx.im).data(), tape.value(scaled.im).data()));
    }
    Ok(LawReport::new("conjugate layer law f(s*x) = |s|^2 f(x)", opts.trials, worst, 1e-5, opts.seed))
}

fn conjugate_phase_invariance(opts: &VerifyOptions) -> Result<LawReport> {
    let trials = opts.trials.min(60);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x05);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let layer = Layer::conjugate(&mut ps, &mut rng, "c", 4);
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let s = ComplexScalar::from_polar(1.0, theta);
        let xr: Array<f32> = randn(&mut rng, &[1, 4, 4, 4], 1.0);
        let xi: Array<f32> = randn(&mut rng, &[1, 4, 4, 4], 1.0);

        let mut tape = Tape::new();
        let bound: Vec<NodeId> = ps.iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut bufs = BufStore::new();
        let x = leaf_complex(&mut tape, &xr, &xi);
        let sx = complex_scale(&mut tape, x, s)?;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, bufs: &mut bufs, mode: LayerMode::batch_eval() };
        let f_sx = layer.forward(&mut ctx, Feat::Complex(sx))?.expect_complex()?;
        let f_x = layer.forward(&mut ctx, Feat::Complex(x))?.expect_complex()?;
        // compare phases where the magnitude is well away from the origin
        let re_a = tape.value(f_sx.re).data().to_vec();
        let im_a = tape.value(f_sx.im).data().to_vec();
        let re_b = tape.value(f_x.re).data().to_vec();
        let im_b = tape.value(f_x.im).data().to_vec();
        for i in 0..re_a.len() {
            let mag_b = (re_b[i] as f64).hypot(im_b[i] as f64);
            if mag_b < 1e-2 {
                continue;
            }
            let pa = (im_a[i] as f64).atan2(re_a[i] as f64);
            let pb = (im_b[i] as f64).atan2(re_b[i] as f64);
            let mut d = pa - pb;
            while d > std::f64::consts::PI {
                d -= std::f64::consts::TAU;
            }
            while d < -std::f64::consts::PI {
                d += std::f64::consts::TAU;
            }
            worst = worst.max(d.abs());
        }
    }
    Ok(LawReport::new("conjugate output phase ignores global rotation", trials, worst, 1e-3, opts.seed))
}

fn conj_mul_scale_law(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x06);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let s = random_scale(&mut rng);
        let arrays: Vec<Array<f32>> = (0..4).map(|_| randn(&mut rng, &[2, 3, 4, 4], 1.0)).collect();
        let mut tape = Tape::new();
        let x = leaf_complex(&mut tape, &arrays[0], &arrays[1]);
        let y = leaf_complex(&mut tape, &arrays[2], &arrays[3]);
        let sx = complex_scale(&mut tape, x, s)?;
        let sy = complex_scale(&mut tape, y, s)?;
        let lhs = conj_mul(&mut tape, sx, sy)?;
        let base = conj_mul(&mut tape, x, y)?;
        let rhs = complex_scale(&mut tape, base, ComplexScalar::new(s.abs_sq(), 0.0))?;
        worst = worst
            .max(rel_l2(tape.value(lhs.re).data(), tape.value(rhs.re).data()))
            .max(rel_l2(tape.value(lhs.im).data(), tape.value(rhs.im).data()));
    }
    Ok(LawReport::new("conj_mul(s*x, s*y) = |s|^2 conj_mul(x, y)", opts.trials, worst, 1e-5, opts.seed))
}

fn crelu_positive_homogeneity(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x07);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let alpha = 10f64.powf(rng.gen::<f64>() * 2.0 - 1.0);
        let xr: Array<f32> = randn(&mut rng, &[2, 3, 4, 4], 1.0);
        let xi: Array<f32> = randn(&mut rng, &[2, 3, 4, 4], 1.0);
        let mut tape = Tape::new();
        let x = leaf_complex(&mut tape, &xr, &xi);
        let layer = Layer::CRelu;
        let mut bufs = BufStore::new();
        let ax = complex_scale(&mut tape, x, ComplexScalar::new(alpha, 0.0))?;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &[], bufs: &mut bufs, mode: LayerMode::batch_eval() };
        let f_ax = layer.forward(&mut ctx, Feat::Complex(ax))?.expect_complex()?;
        let f_x = layer.forward(&mut ctx, Feat::Complex(x))?.expect_complex()?;
        let a_fx = complex_scale(&mut tape, f_x, ComplexScalar::new(alpha, 0.0))?;
        worst = worst
            .max(rel_l2(tape.value(f_ax.re).data(), tape.value(a_fx.re).data()))
            .max(rel_l2(tape.value(f_ax.im).data(), tape.value(a_fx.im).data()));
    }
    Ok(LawReport::new("crelu positive homogeneity", opts.trials, worst, 1e-5, opts.seed))
}

fn cbn_laws(opts: &VerifyOptions) -> Result<(LawReport, LawReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x08);
    let mut worst_scale = 0.0f64;
    let mut worst_phase = 0.0f64;
    for _ in 0..opts.trials {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let mut bufs = BufStore::new();
        let layer = Layer::complex_batch_norm(&mut ps, &mut bufs, "bn", 4);
        // random positive gains
        if let Layer::ComplexBatchNorm { log_gain, .. } = layer {
            let g: Array<f32> = randn(&mut rng, &[4], 0.3);
            ps.get_mut(log_gain).value = g;
        }
        let alpha = 10f64.powf(rng.gen::<f64>() * 2.0 - 1.0);
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let xr: Array<f32> = randn(&mut rng, &[3, 4, 5, 5], 1.0);
        let xi: Array<f32> = randn(&mut rng, &[3, 4, 5, 5], 1.0);

        let mut tape = Tape::new();
        let bound: Vec<NodeId> = ps.iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = leaf_complex(&mut tape, &xr, &xi);
        let ax = complex_scale(&mut tape, x, ComplexScalar::new(alpha, 0.0))?;
        let rx = complex_scale(&mut tape, x, ComplexScalar::from_polar(1.0, theta))?;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, bufs: &mut bufs, mode: LayerMode::batch_eval() };
        let f_x = layer.forward(&mut ctx, Feat::Complex(x))?.expect_complex()?;
        let f_ax = layer.forward(&mut ctx, Feat::Complex(ax))?.expect_complex()?;
        let f_rx = layer.forward(&mut ctx, Feat::Complex(rx))?.expect_complex()?;
        worst_scale = worst_scale
            .max(rel_l2(tape.value(f_ax.re).data(), tape.value(f_x.re).data()))
            .max(rel_l2(tape.value(f_ax.im).data(), tape.value(f_x.im).data()));
        let rot_fx = complex_scale(&mut tape, f_x, ComplexScalar::from_polar(1.0, theta))?;
        worst_phase = worst_phase
            .max(rel_l2(tape.value(f_rx.re).data(), tape.value(rot_fx.re).data()))
            .max(rel_l2(tape.value(f_rx.im).data(), tape.value(rot_fx.im).data()));
    }
    Ok((
        LawReport::new("cbn batch-stats scale invariance", opts.trials, worst_scale, 1e-5, opts.seed),
        LawReport::new("cbn phase equivariance", opts.trials, worst_phase, 1e-5, opts.seed),
    ))
}

fn eq_maxpool_equivariance(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x09);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let s = random_scale(&mut rng);
        let xr: Array<f32> = randn(&mut rng, &[2, 3, 4, 4], 1.0);
        let xi: Array<f32> = randn(&mut rng, &[2, 3, 4, 4], 1.0);
        let layer = Layer::EqMaxPool { window: 2 };
        let mut tape = Tape::new();
        let mut bufs = BufStore::new();
        let x = leaf_complex(&mut tape, &xr, &xi);
        let sx = complex_scale(&mut tape, x, s)?;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &[], bufs: &mut bufs, mode: LayerMode::batch_eval() };
        let f_sx = layer.forward(&mut ctx, Feat::Complex(sx))?.expect_complex()?;
        let f_x = layer.forward(&mut ctx, Feat::Complex(x))?.expect_complex()?;
        let s_fx = complex_scale(&mut tape, f_x, s)?;
        worst = worst
            .max(rel_l2(tape.value(f_sx.re).data(), tape.value(s_fx.re).data()))
            .max(rel_l2(tape.value(f_sx.im).data(), tape.value(s_fx.im).data()));
    }
    Ok(LawReport::new("eq_maxpool equivariance f(s*x) = s*f(x)", opts.trials, worst, 1e-5, opts.seed))
}

fn magnitude_scale_law(opts: &VerifyOptions) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0A);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let s = random_scale(&mut rng);
        let xr: Array<f32> = randn(&mut rng, &[1, 2, 4, 4], 1.0);
        let xi: Array<f32> = randn(&mut rng, &[1, 2, 4, 4], 1.0);
        let mut tape = Tape::new();
        let x = leaf_complex(&mut tape, &xr, &xi);
        let sx = complex_scale(&mut tape, x, s)?;
        let m_sx = magnitude(&mut tape, sx)?;
        let m_x = magnitude(&mut tape, x)?;
        let scaled = tape.scale(m_x, s.abs());
        worst = worst.max(rel_l2(tape.value(m_sx).data(), tape.value(scaled).data()));
    }
    Ok(LawReport::new("magnitude(s*x) = |s| magnitude(x)", opts.trials, worst, 1e-4, opts.seed))
}

/// End-to-end co-domain invariance of CDS-Large in batch-stats mode:
/// logits(s*x) = logits(x) for the whole batch scaled uniformly.
pub fn end_to_end_invariance(trials: usize, seed: u64) -> Result<LawReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0B);
    let mut model: ModelGraph<f32> = ModelGraph::build(&ModelConfig::cds_large(), seed)?;
    let batch: Array<f32> = {
        let mut a: Array<f32> = randn(&mut rng, &[2, 8, 32, 32], 0.25);
        for v in a.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        a
    };
    let (re, im) = encodings::sliding_encode(&batch)?;
    let base = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = leaf_complex(&mut tape, &re, &im);
        let logits = model.forward_feat(&mut tape, &bound, Feat::Complex(x), LayerMode::batch_eval())?;
        tape.value(logits).data().to_vec()
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let s = random_scale(&mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = leaf_complex(&mut tape, &re, &im);
        let sx = complex_scale(&mut tape, x, s)?;
        let logits = model.forward_feat(&mut tape, &bound, Feat::Complex(sx), LayerMode::batch_eval())?;
        worst = worst.max(rel_l2(tape.value(logits).data(), &base));
    }
    Ok(LawReport::new("end-to-end CDS-Large invariance (batch stats)", trials, worst, 1e-3, seed))
}

pub fn equivariance_suite(opts: &VerifyOptions) -> Result<Vec<LawReport>> {
    let (cbn_scale, cbn_phase) = cbn_laws(opts)?;
    Ok(vec![
        econv_equivariance(opts)?,
        complex_conv_additivity(opts)?,
        conv_linearity(opts)?,
        conjugate_scale_law(opts)?,
        conjugate_phase_invariance(opts)?,
        conj_mul_scale_law(opts)?,
        crelu_positive_homogeneity(opts)?,
        cbn_scale,
        cbn_phase,
        eq_maxpool_equivariance(opts)?,
        magnitude_scale_law(opts)?,
        end_to_end_invariance(50, opts.seed)?,
    ])
}

// ---------------------------------------------------------------------------
// finite-difference gradient checks
// ---------------------------------------------------------------------------

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

/// Compare analytic gradients against central finite differences for a
/// scalar-valued graph builder. Returns the worst relative L2 error over the
/// input tensors.
pub fn gradcheck<F>(inputs: &[Array<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("gradcheck needs a scalar loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Array<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| tape.grad(id).cloned().unwrap_or_else(|| Array::zeros(inputs[i].shape())))
        .collect();

    // forward-only numeric pass
    let eval = |perturbed: &[Array<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|a| t.leaf(a.clone(), false)).collect();
        let out = build(&mut t, &ids)?;
        Ok(t.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Array::zeros(input.shape());
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_EPS;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_EPS;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * FD_EPS);
        }
        worst = worst.max(rel_l2(analytic[i].data(), numeric.data()));
    }
    Ok(worst)
}

/// Scalar-projection loss: sum(out * fixed_random_weights). Exposes every
/// output element's gradient path without biasing any of them.
fn projected_loss(tape: &mut Tape<f64>, out: NodeId, proj_seed: u64) -> Result<NodeId> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let proj: Array<f64> = randn(&mut rng, &shape, 1.0);
    let p = tape.constant(proj);
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

struct GradCase {
    name: &'static str,
    worst: f64,
}

fn run_layer_gradcheck(
    name: &'static str,
    instances: usize,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> Result<(Vec<Array<f64>>, Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>)>,
) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (inputs, build) = make(&mut rng)?;
        worst = worst.max(gradcheck(&inputs, |t, ids| build(t, ids))?);
    }
    Ok(GradCase { name, worst })
}

/// A layer wrapped for gradcheck: leaf order is [x_re, x_im, params...].
fn layer_case(
    layer: Layer,
    bufs: BufStore<f64>,
    x_shape: Vec<usize>,
    n_params: usize,
    mode: LayerMode,
    rng: &mut ChaCha8Rng,
    param_values: Vec<Array<f64>>,
) -> (Vec<Array<f64>>, Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>) {
    let mut inputs: Vec<Array<f64>> = vec![randn(rng, &x_shape, 1.0), randn(rng, &x_shape, 1.0)];
    inputs.extend(param_values);
    let proj_seed = rng.gen::<u64>();
    let build = move |t: &mut Tape<f64>, ids: &[NodeId]| -> Result<NodeId> {
        let x = ComplexVar::new(ids[0], ids[1]);
        let bound = &ids[2..2 + n_params];
        let mut local_bufs = bufs.clone();
        let mut ctx = FwdCtx { tape: t, bound, bufs: &mut local_bufs, mode };
        let out = layer.forward(&mut ctx, Feat::Complex(x))?.expect_complex()?;
        let re_loss = projected_loss(t, out.re, proj_seed)?;
        let im_loss = projected_loss(t, out.im, proj_seed ^ 0xFF)?;
        t.add(re_loss, im_loss)
    };
    (inputs, Box::new(build))
}

fn param_arrays<TS: Scalar>(ps: &ParamStore<TS>) -> Vec<Array<f64>> {
    ps.iter().map(|p| p.value.cast::<f64>()).collect()
}

pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<LawReport>> {
    let mut cases: Vec<GradCase> = Vec::new();

    // elementwise / reductions / shape ops
    cases.push(run_layer_gradcheck("grad: add/sub/mul/div chain", instances, seed ^ 0x21, |rng| {
        let a: Array<f64> = randn(rng, &[3, 4], 1.0);
        let b: Array<f64> = randn(rng, &[3, 4], 1.0).map(|v| v.abs() + 0.7);
        let c: Array<f64> = randn(rng, &[4], 1.0);
        let proj = rng.gen::<u64>();
        Ok((vec![a, b, c], Box::new(move |t, ids| {
            let s = t.add(ids[0], ids[2])?; // batch broadcast
            let m = t.mul(s, ids[1])?;
            let d = t.div(m, ids[1])?;
            let z = t.sub(d, ids[0])?;
            projected_loss(t, z, proj)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: relu/exp/log/sqrt/neg", instances, seed ^ 0x22, |rng| {
        let a: Array<f64> = randn(rng, &[24], 1.0).map(|v| if v.abs() < 1e-2 { v + 0.5 } else { v });
        let proj = rng.gen::<u64>();
        Ok((vec![a], Box::new(move |t, ids| {
            let r = t.relu(ids[0]);
            let shifted = t.add_scalar(r, 0.5);
            let lg = t.log(shifted);
            let sq = t.mul(ids[0], ids[0])?;
            let sqp = t.add_scalar(sq, 0.1);
            let rt = t.sqrt(sqp);
            let e = t.exp(lg);
            let n = t.neg(e);
            let s = t.add(rt, n)?;
            projected_loss(t, s, proj)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: sum/mean/max reductions", instances, seed ^ 0x23, |rng| {
        let a: Array<f64> = randn(rng, &[4, 5], 1.0);
        Ok((vec![a], Box::new(move |t, ids| {
            let s = t.sum(ids[0]);
            let m = t.mean(ids[0]);
            let mx = t.max(ids[0])?;
            let sm = t.add(s, m)?;
            t.add(sm, mx)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: reshape/concat/slice channels", instances, seed ^ 0x24, |rng| {
        let a: Array<f64> = randn(rng, &[2, 3, 2, 2], 1.0);
        let b: Array<f64> = randn(rng, &[2, 2, 2, 2], 1.0);
        let proj = rng.gen::<u64>();
        Ok((vec![a, b], Box::new(move |t, ids| {
            let cat = t.concat_channels(&[ids[0], ids[1]])?;
            let sl = t.slice_channels(cat, 1, 3)?;
            let flat = t.reshape(sl, &[2, 12])?;
            projected_loss(t, flat, proj)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: matmul with bias row", instances, seed ^ 0x25, |rng| {
        let x: Array<f64> = randn(rng, &[3, 5], 1.0);
        let w: Array<f64> = randn(rng, &[5, 4], 1.0);
        let b: Array<f64> = randn(rng, &[4], 1.0);
        let proj = rng.gen::<u64>();
        Ok((vec![x, w, b], Box::new(move |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            let z = t.add(y, ids[2])?;
            projected_loss(t, z, proj)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: conv2d grouped/strided/padded", instances, seed ^ 0x26, |rng| {
        let variants = [(1usize, 1usize, 1usize, 4usize, 6usize), (2, 1, 1, 4, 6), (1, 2, 0, 3, 7), (2, 2, 1, 4, 8)];
        let (groups, stride, padding, c, hw) = variants[rng.gen_range(0..variants.len())];
        let o = 4;
        let x: Array<f64> = randn(rng, &[2, c, hw, hw], 1.0);
        let w: Array<f64> = randn(rng, &[o, c / groups, 3, 3], 0.5);
        let proj = rng.gen::<u64>();
        Ok((vec![x, w], Box::new(move |t, ids| {
            let y = t.conv2d(ids[0], ids[1], groups, stride, padding)?;
            projected_loss(t, y, proj)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: maxpool2d", instances, seed ^ 0x27, |rng| {
        let x: Array<f64> = randn(rng, &[2, 3, 4, 4], 1.0);
        let proj = rng.gen::<u64>();
        Ok((vec![x], Box::new(move |t, ids| {
            let y = t.maxpool2d(ids[0], 2)?;
            projected_loss(t, y, proj)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: channel mul/add/mean, spatial mean", instances, seed ^ 0x28, |rng| {
        let x: Array<f64> = randn(rng, &[2, 3, 3, 3], 1.0);
        let v: Array<f64> = randn(rng, &[3], 1.0);
        let proj = rng.gen::<u64>();
        Ok((vec![x, v], Box::new(move |t, ids| {
            let m = t.channel_mul(ids[0], ids[1])?;
            let a = t.channel_add(m, ids[1])?;
            let cm = t.channel_mean(a)?;
            let sm = t.spatial_mean(a)?;
            let l1 = projected_loss(t, cm, proj)?;
            let l2 = projected_loss(t, sm, proj ^ 1)?;
            t.add(l1, l2)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: softmax cross-entropy loss", instances, seed ^ 0x29, |rng| {
        let x: Array<f64> = randn(rng, &[4, 6], 2.0);
        let labels: Vec<u16> = (0..4).map(|_| rng.gen_range(0..6) as u16).collect();
        Ok((vec![x], Box::new(move |t, ids| {
            let lp = t.log_softmax(ids[0])?;
            t.nll_mean(lp, &labels)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: atan2 phase", instances, seed ^ 0x2A, |rng| {
        let re: Array<f64> = randn(rng, &[12], 1.0).map(|v| v + 2.0 * v.signum());
        let im: Array<f64> = randn(rng, &[12], 1.0);
        let proj = rng.gen::<u64>();
        Ok((vec![im, re], Box::new(move |t, ids| {
            let p = t.atan2(ids[0], ids[1])?;
            projected_loss(t, p, proj)
        })))
    })?);

    cases.push(run_layer_gradcheck("grad: 3-layer MLP", instances, seed ^ 0x2B, |rng| {
        let x: Array<f64> = randn(rng, &[3, 6], 1.0);
        let w1: Array<f64> = randn(rng, &[6, 8], 0.5);
        let w2: Array<f64> = randn(rng, &[8, 8], 0.5);
        let w3: Array<f64> = randn(rng, &[8, 4], 0.5);
        let labels: Vec<u16> = (0..3).map(|_| rng.gen_range(0..4) as u16).collect();
        Ok((vec![x, w1, w2, w3], Box::new(move |t, ids| {
            let h1 = t.matmul(ids[0], ids[1])?;
            let a1 = t.relu(h1);
            let h2 = t.matmul(a1, ids[2])?;
            let a2 = t.relu(h2);
            let h3 = t.matmul(a2, ids[3])?;
            let lp = t.log_softmax(h3)?;
            t.nll_mean(lp, &labels)
        })))
    })?);

    // complex ops
    cases.push(run_layer_gradcheck("grad: complex scale/conj_mul/magnitude/phase", instances, seed ^ 0x2C, |rng| {
        let xr: Array<f64> = randn(rng, &[10], 1.0).map(|v| v + 0.5 * v.signum());
        let xi: Array<f64> = randn(rng, &[10], 1.0).map(|v| v + 0.5 * v.signum());
        let yr: Array<f64> = randn(rng, &[10], 1.0);
        let yi: Array<f64> = randn(rng, &[10], 1.0);
        let s = random_scale(rng);
        let proj = rng.gen::<u64>();
        Ok((vec![xr, xi, yr, yi], Box::new(move |t, ids| {
            let x = ComplexVar::new(ids[0], ids[1]);
            let y = ComplexVar::new(ids[2], ids[3]);
            let sx = complex_scale(t, x, s)?;
            let cm = conj_mul(t, sx, y)?;
            let m = magnitude(t, cm)?;
            let p = crate::complex::phase(t, x)?;
            let l1 = projected_loss(t, m, proj)?;
            let l2 = projected_loss(t, p, proj ^ 3)?;
            let l3 = projected_loss(t, cm.re, proj ^ 7)?;
            let a = t.add(l1, l2)?;
            t.add(a, l3)
        })))
    })?);

    // complex layers
    let mk_layer_case = |name: &'static str,
                         seed_off: u64,
                         ctor: Box<dyn Fn(&mut ParamStore<f64>, &mut BufStore<f64>, &mut ChaCha8Rng) -> Layer>,
                         x_shape: Vec<usize>,
                         mode: LayerMode| {
        run_layer_gradcheck(name, instances, seed ^ seed_off, move |rng| {
            let mut ps = ParamStore::new();
            let mut bufs = BufStore::new();
            let layer = ctor(&mut ps, &mut bufs, rng);
            let values = param_arrays(&ps);
            let n = values.len();
            Ok(layer_case(layer, bufs, x_shape.clone(), n, mode, rng, values))
        })
    };

    cases.push(mk_layer_case(
        "grad: econv layer",
        0x31,
        Box::new(|ps, _b, rng| Layer::econv(ps, rng, "e", 4, 4, 3, 2, 1, 1)),
        vec![2, 4, 4, 4],
        LayerMode::batch_eval(),
    )?);
    cases.push(mk_layer_case(
        "grad: conjugate layer",
        0x32,
        Box::new(|ps, _b, rng| Layer::conjugate(ps, rng, "c", 3)),
        vec![2, 3, 3, 3],
        LayerMode::batch_eval(),
    )?);
    cases.push(mk_layer_case(
        "grad: complex batch norm (batch stats)",
        0x33,
        Box::new(|ps, bufs, _rng| Layer::complex_batch_norm(ps, bufs, "bn", 3)),
        vec![2, 3, 3, 3],
        LayerMode::batch_eval(),
    )?);
    cases.push(mk_layer_case(
        "grad: complex batch norm (running stats)",
        0x34,
        Box::new(|ps, bufs, _rng| Layer::complex_batch_norm(ps, bufs, "bn", 3)),
        vec![2, 3, 3, 3],
        LayerMode::eval(),
    )?);
    cases.push(mk_layer_case("grad: crelu", 0x35, Box::new(|_p, _b, _r| Layer::CRelu), vec![2, 3, 4, 4], LayerMode::batch_eval())?);
    cases.push(mk_layer_case(
        "grad: eq_maxpool",
        0x36,
        Box::new(|_p, _b, _r| Layer::EqMaxPool { window: 2 }),
        vec![2, 3, 4, 4],
        LayerMode::batch_eval(),
    )?);
    cases.push(mk_layer_case(
        "grad: resblock",
        0x37,
        Box::new(|ps, bufs, rng| Layer::ResBlock {
            branch: vec![
                Layer::econv(ps, rng, "b.e1", 4, 4, 3, 2, 1, 1),
                Layer::complex_batch_norm(ps, bufs, "b.bn1", 4),
                Layer::CRelu,
                Layer::econv(ps, rng, "b.e2", 4, 4, 3, 2, 1, 1),
                Layer::complex_batch_norm(ps, bufs, "b.bn2", 4),
            ],
        }),
        vec![2, 4, 4, 4],
        LayerMode::batch_eval(),
    )?);
    cases.push(mk_layer_case(
        "grad: head (re/im concat + affine)",
        0x38,
        Box::new(|ps, rng_b, rng| {
            let _ = rng_b;
            Layer::head(ps, rng, "h", 6, 5)
        }),
        vec![3, 6, 1, 1],
        LayerMode::batch_eval(),
    )?);

    // real layers for the baselines
    cases.push(run_layer_gradcheck("grad: real conv + bias + bn + fc", instances, seed ^ 0x39, |rng| {
        let mut ps: ParamStore<f64> = ParamStore::new();
        let mut bufs = BufStore::new();
        let conv = Layer::conv2d_real(&mut ps, rng, "c", 3, 4, 3, 1, 1, 1, true);
        let bn = Layer::batch_norm_real(&mut ps, &mut bufs, "bn", 4);
        let fc = Layer::fc_real(&mut ps, rng, "fc", 4, 3);
        let values = param_arrays(&ps);
        let n = values.len();
        let mut inputs: Vec<Array<f64>> = vec![randn(rng, &[2, 3, 4, 4], 1.0)];
        inputs.extend(values);
        let labels: Vec<u16> = (0..2).map(|_| rng.gen_range(0..3) as u16).collect();
        Ok((inputs, Box::new(move |t, ids| {
            let bound = &ids[1..1 + n];
            let mut local_bufs = bufs.clone();
            let mut ctx = FwdCtx { tape: t, bound, bufs: &mut local_bufs, mode: LayerMode::batch_eval() };
            let mut feat = Feat::Real(ids[0]);
            feat = conv.forward(&mut ctx, feat)?;
            feat = bn.forward(&mut ctx, feat)?;
            feat = Layer::ReluReal.forward(&mut ctx, feat)?;
            feat = Layer::MaxPoolReal { window: 2 }.forward(&mut ctx, feat)?;
            feat = Layer::GlobalAvgPool.forward(&mut ctx, feat)?;
            feat = Layer::Flatten.forward(&mut ctx, feat)?;
            feat = fc.forward(&mut ctx, feat)?;
            let logits = feat.expect_real()?;
            let lp = t.log_softmax(logits)?;
            t.nll_mean(lp, &labels)
        })))
    })?);

    Ok(cases
        .into_iter()
        .map(|c| LawReport::new(c.name, instances, c.worst, FD_TOL, seed))
        .collect())
}

// ---------------------------------------------------------------------------
// format round-trips
// ---------------------------------------------------------------------------

pub fn format_suite(seed: u64) -> Result<Vec<LawReport>> {
    let dir = std::env::temp_dir().join(format!("cdsnet-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();

    // dataset container round trip
    let cfg = SyntheticConfig { test_per_class: 4, ..SyntheticConfig::new(3, 12, 3.0, seed) };
    let ds = generate_synthetic(&cfg)?;
    ds.save(&dir)?;
    let back = crate::data::ChipDataset::load(&dir)?;
    let msc_ok = back.train.pixels == ds.train.pixels
        && back.val.labels == ds.val.labels
        && back.test.pixels == ds.test.pixels
        && back.manifest.class_names == ds.manifest.class_names;
    reports.push(LawReport::new("msc1 + manifest round trip", 1, if msc_ok { 0.0 } else { 1.0 }, 0.0, seed));

    // checkpoint round trip: forward output must be bitwise identical
    let mut model: ModelGraph<f32> = ModelGraph::build(&ModelConfig::cds_small(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe: Array<f32> = {
        let mut a: Array<f32> = randn(&mut rng, &[1, 8, 32, 32], 0.2);
        for v in a.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        a
    };
    let before = model.predict(&probe, LayerMode::eval())?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let mut loaded: ModelGraph<f32> = load_checkpoint(&ckpt)?;
    let after = loaded.predict(&probe, LayerMode::eval())?;
    let ckpt_ok = before.data() == after.data();
    reports.push(LawReport::new("checkpoint round trip (bitwise forward)", 1, if ckpt_ok { 0.0 } else { 1.0 }, 0.0, seed));

    // sliding encoding round trip + shared band
    let bands: Array<f32> = randn(&mut rng, &[2, 8, 4, 4], 1.0);
    let (re, im) = encodings::sliding_encode(&bands)?;
    let restored = encodings::sliding_decode(&re, &im)?;
    let enc_ok = restored == bands;
    reports.push(LawReport::new("sliding encoding reconstruction", 1, if enc_ok { 0.0 } else { 1.0 }, 0.0, seed));

    let _ = std::fs::remove_dir_all(&dir);
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Equivariance,
    Gradients,
    Formats,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equivariance" => Ok(Suite::Equivariance),
            "gradients" => Ok(Suite::Gradients),
            "formats" => Ok(Suite::Formats),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown suite '{other}'"))),
        }
    }
}

/// Run the requested suites and return the reports.
pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<LawReport>> {
    let mut reports = Vec::new();
    if matches!(suite, Suite::Equivariance | Suite::All) {
        reports.extend(equivariance_suite(opts)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        reports.extend(gradient_suite(20, opts.seed)?);
    }
    if matches!(suite, Suite::Formats | Suite::All) {
        reports.extend(format_suite(opts.seed)?);
    }
    Ok(reports)
}
