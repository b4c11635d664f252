//! Complex tensors as pairs of real tape nodes.
//!
//! Gradients are gradients of the underlying real computation (the C = R^2
//! view), so every complex op is checkable by real finite differences.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Scalar, Tape};

/// Epsilon inside `magnitude`'s square root; keeps the gradient finite at the
/// origin where |.| is non-differentiable.
pub const EPS_MAG: f64 = 1e-12;

/// A complex scalar with finite components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexScalar {
    pub re: f64,
    pub im: f64,
}

impl ComplexScalar {
    pub fn new(re: f64, im: f64) -> Self {
        ComplexScalar { re, im }
    }

    pub fn abs_sq(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> f64 {
        self.abs_sq().sqrt()
    }

    pub fn mul(self, other: ComplexScalar) -> ComplexScalar {
        ComplexScalar {
            re: self.re * other.re - self.im * other.im,
            im: self.re * other.im + self.im * other.re,
        }
    }

    pub fn from_polar(r: f64, theta: f64) -> Self {
        ComplexScalar { re: r * theta.cos(), im: r * theta.sin() }
    }
}

/// Complex tensor: a pair of same-shape real nodes on one tape.
#[derive(Clone, Copy, Debug)]
pub struct ComplexVar {
    pub re: NodeId,
    pub im: NodeId,
}

impl ComplexVar {
    pub fn new(re: NodeId, im: NodeId) -> Self {
        ComplexVar { re, im }
    }
}

fn check_same_shape<T: Scalar>(tape: &Tape<T>, op: &str, x: ComplexVar) -> Result<()> {
    if tape.shape(x.re) != tape.shape(x.im) {
        return Err(Error::dimension(
            op,
            format!("re shape {:?} != im shape {:?}", tape.shape(x.re), tape.shape(x.im)),
        ));
    }
    Ok(())
}

/// `s * x` for a complex scalar `s`: the co-domain group action.
pub fn complex_scale<T: Scalar>(tape: &mut Tape<T>, x: ComplexVar, s: ComplexScalar) -> Result<ComplexVar> {
    check_same_shape(tape, "complex_scale", x)?;
    let ar = tape.scale(x.re, s.re);
    let bi = tape.scale(x.im, s.im);
    let re = tape.sub(ar, bi)?;
    let ai = tape.scale(x.im, s.re);
    let br = tape.scale(x.re, s.im);
    let im = tape.add(ai, br)?;
    Ok(ComplexVar { re, im })
}

pub fn complex_add<T: Scalar>(tape: &mut Tape<T>, x: ComplexVar, y: ComplexVar) -> Result<ComplexVar> {
    Ok(ComplexVar {
        re: tape.add(x.re, y.re)?,
        im: tape.add(x.im, y.im)?,
    })
}

/// Complex convolution from four real convolutions. No bias: any additive
/// term breaks `f(s.x) = s.f(x)`.
pub fn complex_conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: ComplexVar,
    w: ComplexVar,
    groups: usize,
    stride: usize,
    padding: usize,
) -> Result<ComplexVar> {
    check_same_shape(tape, "complex_conv2d", x)?;
    let rr = tape.conv2d(x.re, w.re, groups, stride, padding)?;
    let ii = tape.conv2d(x.im, w.im, groups, stride, padding)?;
    let re = tape.sub(rr, ii)?;
    let ri = tape.conv2d(x.re, w.im, groups, stride, padding)?;
    let ir = tape.conv2d(x.im, w.re, groups, stride, padding)?;
    let im = tape.add(ri, ir)?;
    Ok(ComplexVar { re, im })
}

/// Elementwise `x * conj(y)`.
pub fn conj_mul<T: Scalar>(tape: &mut Tape<T>, x: ComplexVar, y: ComplexVar) -> Result<ComplexVar> {
    check_same_shape(tape, "conj_mul", x)?;
    if tape.shape(x.re) != tape.shape(y.re) {
        return Err(Error::dimension(
            "conj_mul",
            format!("x shape {:?} != y shape {:?}", tape.shape(x.re), tape.shape(y.re)),
        ));
    }
    let rr = tape.mul(x.re, y.re)?;
    let ii = tape.mul(x.im, y.im)?;
    let re = tape.add(rr, ii)?;
    let ir = tape.mul(x.im, y.re)?;
    let ri = tape.mul(x.re, y.im)?;
    let im = tape.sub(ir, ri)?;
    Ok(ComplexVar { re, im })
}

/// `sqrt(re^2 + im^2 + EPS_MAG)`, differentiable everywhere.
pub fn magnitude<T: Scalar>(tape: &mut Tape<T>, x: ComplexVar) -> Result<NodeId> {
    check_same_shape(tape, "magnitude", x)?;
    let msq = magnitude_sq(tape, x)?;
    let shifted = tape.add_scalar(msq, EPS_MAG);
    Ok(tape.sqrt(shifted))
}

/// `re^2 + im^2` without the epsilon; exact by construction.
pub fn magnitude_sq<T: Scalar>(tape: &mut Tape<T>, x: ComplexVar) -> Result<NodeId> {
    let rr = tape.mul(x.re, x.re)?;
    let ii = tape.mul(x.im, x.im)?;
    tape.add(rr, ii)
}

/// `atan2(im, re)`; zero at the origin by the atan2 convention.
pub fn phase<T: Scalar>(tape: &mut Tape<T>, x: ComplexVar) -> Result<NodeId> {
    check_same_shape(tape, "phase", x)?;
    tape.atan2(x.im, x.re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Array;

    fn leaf_pair(tape: &mut Tape<f64>, re: &[f64], im: &[f64]) -> ComplexVar {
        let n = re.len();
        let r = tape.leaf(Array::from_f64_slice(&[n], re).unwrap(), false);
        let i = tape.leaf(Array::from_f64_slice(&[n], im).unwrap(), false);
        ComplexVar::new(r, i)
    }

    #[test]
    fn scale_by_one_is_identity() {
        let mut t = Tape::new();
        let x = leaf_pair(&mut t, &[1.5, -0.5], &[0.25, 2.0]);
        let y = complex_scale(&mut t, x, ComplexScalar::new(1.0, 0.0)).unwrap();
        assert_eq!(t.value(y.re).data(), t.value(x.re).data());
        assert_eq!(t.value(y.im).data(), t.value(x.im).data());
    }

    #[test]
    fn scale_by_i_rotates_ninety_degrees() {
        let mut t = Tape::new();
        let x = leaf_pair(&mut t, &[1.0], &[0.0]);
        let y = complex_scale(&mut t, x, ComplexScalar::new(0.0, 1.0)).unwrap();
        assert_eq!(t.value(y.re).data(), &[0.0]);
        assert_eq!(t.value(y.im).data(), &[1.0]);
    }

    #[test]
    fn conj_mul_of_self_kills_phase() {
        let mut t = Tape::new();
        let x = leaf_pair(&mut t, &[3.0, -1.0], &[4.0, 2.0]);
        let y = conj_mul(&mut t, x, x).unwrap();
        assert_eq!(t.value(y.re).data(), &[25.0, 5.0]);
        assert_eq!(t.value(y.im).data(), &[0.0, 0.0]);
    }

    #[test]
    fn conj_mul_hand_case() {
        // (1+i) * conj(1-i) = (1+i)(1+i) = 2i
        let mut t = Tape::new();
        let x = leaf_pair(&mut t, &[1.0], &[1.0]);
        let y = leaf_pair(&mut t, &[1.0], &[-1.0]);
        let z = conj_mul(&mut t, x, y).unwrap();
        assert_eq!(t.value(z.re).data(), &[0.0]);
        assert_eq!(t.value(z.im).data(), &[2.0]);
    }

    #[test]
    fn magnitude_and_phase_of_3_4() {
        let mut t = Tape::new();
        let x = leaf_pair(&mut t, &[3.0], &[4.0]);
        let m = magnitude(&mut t, x).unwrap();
        let p = phase(&mut t, x).unwrap();
        assert!((t.value(m).data()[0] - 5.0).abs() < 1e-9);
        assert!((t.value(p).data()[0] - 4.0f64.atan2(3.0)).abs() < 1e-12);
    }

    #[test]
    fn magnitude_at_origin_is_sqrt_eps_and_phase_zero() {
        let mut t = Tape::new();
        let x = leaf_pair(&mut t, &[0.0], &[0.0]);
        let m = magnitude(&mut t, x).unwrap();
        let p = phase(&mut t, x).unwrap();
        assert!((t.value(m).data()[0] - EPS_MAG.sqrt()).abs() < 1e-15);
        assert_eq!(t.value(p).data()[0], 0.0);
    }

    #[test]
    fn conv_with_imaginary_unit_kernel_multiplies_by_i() {
        let mut t = Tape::new();
        let re = t.leaf(Array::from_f64_slice(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let im = t.leaf(Array::from_f64_slice(&[1, 1, 2, 2], &[0.5, -1.0, 0.0, 2.5]).unwrap(), false);
        let x = ComplexVar::new(re, im);
        let wr = t.leaf(Array::from_f64_slice(&[1, 1, 1, 1], &[0.0]).unwrap(), false);
        let wi = t.leaf(Array::from_f64_slice(&[1, 1, 1, 1], &[1.0]).unwrap(), false);
        let y = complex_conv2d(&mut t, x, ComplexVar::new(wr, wi), 1, 1, 0).unwrap();
        let neg_im: Vec<f64> = t.value(im).data().iter().map(|&v| -v).collect();
        assert_eq!(t.value(y.re).data(), &neg_im[..]);
        assert_eq!(t.value(y.im).data(), t.value(re).data());
    }

    #[test]
    fn real_embedded_conv_reduces_to_real_conv2d() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..9).map(|i| (i as f64) * 0.5 - 2.0).collect();
        let xr = t.leaf(Array::from_f64_slice(&[1, 1, 3, 3], &data).unwrap(), false);
        let xi = t.leaf(Array::zeros(&[1, 1, 3, 3]), false);
        let wr = t.leaf(Array::from_f64_slice(&[1, 1, 3, 3], &[0.1; 9]).unwrap(), false);
        let wi = t.leaf(Array::zeros(&[1, 1, 3, 3]), false);
        let y = complex_conv2d(&mut t, ComplexVar::new(xr, xi), ComplexVar::new(wr, wi), 1, 1, 1).unwrap();
        let reference = t.conv2d(xr, wr, 1, 1, 1).unwrap();
        assert_eq!(t.value(y.re).data(), t.value(reference).data());
        assert!(t.value(y.im).data().iter().all(|&v| v == 0.0));
    }
}
