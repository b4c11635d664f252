//! Channel encodings: the sliding complex encoding for CDS models and the
//! fixed channel reductions used by real-valued baselines.
//!
//! All functions are pure array transforms on `[N, m, H, W]` stacks with
//! bands in ascending spectral-frequency order.

use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar};

/// Standard 8-band order, ascending spectral frequency.
pub const BAND_LABELS_8: [&str; 8] = [
    "Coastal Blue",
    "Blue",
    "Green",
    "Yellow",
    "Red",
    "Red Edge",
    "Near-IR1",
    "Near-IR2",
];

fn dims(op: &str, bands: &Array<impl Scalar>) -> Result<(usize, usize, usize)> {
    let s = bands.shape();
    if s.len() != 4 {
        return Err(Error::dimension(op, format!("expected [N,m,H,W], got {:?}", s)));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Pair adjacent bands into complex channels: channel k = band_k + i*band_{k+1},
/// turning m real bands into m-1 complex channels.
pub fn sliding_encode<T: Scalar>(bands: &Array<T>) -> Result<(Array<T>, Array<T>)> {
    let (n, m, hw) = dims("sliding_encode", bands)?;
    if m < 2 {
        return Err(Error::Contract(format!("sliding encoding needs >= 2 bands, got {}", m)));
    }
    let src = bands.data();
    let mut re = Vec::with_capacity(n * (m - 1) * hw);
    let mut im = Vec::with_capacity(n * (m - 1) * hw);
    for nn in 0..n {
        let base = nn * m * hw;
        re.extend_from_slice(&src[base..base + (m - 1) * hw]);
        im.extend_from_slice(&src[base + hw..base + m * hw]);
    }
    let shape = {
        let s = bands.shape();
        vec![n, m - 1, s[2], s[3]]
    };
    Ok((Array::new(shape.clone(), re)?, Array::new(shape, im)?))
}

/// Inverse of `sliding_encode`: real parts of channels 1..m-1 plus the
/// imaginary part of the last channel reconstruct the original bands exactly.
pub fn sliding_decode<T: Scalar>(re: &Array<T>, im: &Array<T>) -> Result<Array<T>> {
    let (n, c, hw) = dims("sliding_decode", re)?;
    if re.shape() != im.shape() {
        return Err(Error::dimension(
            "sliding_decode",
            format!("re shape {:?} != im shape {:?}", re.shape(), im.shape()),
        ));
    }
    let m = c + 1;
    let mut out = Vec::with_capacity(n * m * hw);
    for nn in 0..n {
        let base = nn * c * hw;
        out.extend_from_slice(&re.data()[base..base + c * hw]);
        out.extend_from_slice(&im.data()[base + (c - 1) * hw..base + c * hw]);
    }
    let s = re.shape();
    Array::new(vec![n, m, s[2], s[3]], out)
}

fn require_8(op: &str, m: usize) -> Result<()> {
    if m != 8 {
        return Err(Error::Contract(format!("{} requires 8 bands, got {}", op, m)));
    }
    Ok(())
}

/// Average all 8 bands into one channel, duplicated to 3.
pub fn reduce_average<T: Scalar>(bands: &Array<T>) -> Result<Array<T>> {
    let (n, m, hw) = dims("reduce_average", bands)?;
    require_8("reduce_average", m)?;
    let src = bands.data();
    let inv = T::from_f64(1.0 / 8.0);
    let mut out = Vec::with_capacity(n * 3 * hw);
    for nn in 0..n {
        let base = nn * m * hw;
        let mut mean = vec![T::zero(); hw];
        for b in 0..m {
            for (acc, &v) in mean.iter_mut().zip(&src[base + b * hw..base + (b + 1) * hw]) {
                *acc += v;
            }
        }
        for v in mean.iter_mut() {
            *v *= inv;
        }
        for _ in 0..3 {
            out.extend_from_slice(&mean);
        }
    }
    let s = bands.shape();
    Array::new(vec![n, 3, s[2], s[3]], out)
}

/// Spectral bins: mean of bands 1-3, 4-6, and 7-8 (1-based).
pub fn reduce_binned<T: Scalar>(bands: &Array<T>) -> Result<Array<T>> {
    let (n, m, hw) = dims("reduce_binned", bands)?;
    require_8("reduce_binned", m)?;
    const BINS: [(usize, usize); 3] = [(0, 3), (3, 6), (6, 8)];
    let src = bands.data();
    let mut out = Vec::with_capacity(n * 3 * hw);
    for nn in 0..n {
        let base = nn * m * hw;
        for &(lo, hi) in &BINS {
            let inv = T::from_f64(1.0 / (hi - lo) as f64);
            let mut mean = vec![T::zero(); hw];
            for b in lo..hi {
                for (acc, &v) in mean.iter_mut().zip(&src[base + b * hw..base + (b + 1) * hw]) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v *= inv;
            }
            out.extend_from_slice(&mean);
        }
    }
    let s = bands.shape();
    Array::new(vec![n, 3, s[2], s[3]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(n: usize, m: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Array<f64> {
        let mut data = Vec::with_capacity(n * m * h * w);
        for nn in 0..n {
            for b in 0..m {
                for _ in 0..h * w {
                    data.push(f(nn, b));
                }
            }
        }
        Array::new(vec![n, m, h, w], data).unwrap()
    }

    #[test]
    fn eight_bands_become_seven_complex_channels() {
        let img = stack(2, 8, 4, 4, |_, b| b as f64);
        let (re, im) = sliding_encode(&img).unwrap();
        assert_eq!(re.shape(), &[2, 7, 4, 4]);
        assert_eq!(im.shape(), &[2, 7, 4, 4]);
    }

    #[test]
    fn single_pixel_three_bands() {
        let img = Array::from_f64_slice(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]).unwrap();
        let (re, im) = sliding_encode(&img).unwrap();
        assert_eq!(re.data(), &[1.0, 2.0]);
        assert_eq!(im.data(), &[2.0, 3.0]);
    }

    #[test]
    fn constant_image_encodes_to_diagonal_phase() {
        let img = stack(1, 8, 2, 2, |_, _| 0.7);
        let (re, im) = sliding_encode(&img).unwrap();
        assert!(re.data().iter().all(|&v| v == 0.7));
        assert!(im.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn shared_band_consistency_and_round_trip() {
        let mut data = Vec::new();
        for i in 0..(8 * 9) {
            data.push((i as f64 * 0.37).sin() * 0.5 + 0.5);
        }
        let img = Array::new(vec![1, 8, 3, 3], data).unwrap();
        let (re, im) = sliding_encode(&img).unwrap();
        let hw = 9;
        for k in 0..6 {
            assert_eq!(
                &im.data()[k * hw..(k + 1) * hw],
                &re.data()[(k + 1) * hw..(k + 2) * hw],
                "im(channel {k}) must equal re(channel {})",
                k + 1
            );
        }
        let back = sliding_decode(&re, &im).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn too_few_bands_rejected() {
        let img = stack(1, 1, 2, 2, |_, _| 1.0);
        assert!(sliding_encode(&img).is_err());
    }

    #[test]
    fn average_of_alternating_channels_is_half() {
        let img = stack(1, 8, 2, 2, |_, b| (b % 2) as f64);
        let out = reduce_average(&img).unwrap();
        assert_eq!(out.shape(), &[1, 3, 2, 2]);
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn average_duplicates_its_channel() {
        let img = stack(1, 8, 2, 2, |_, b| b as f64 * 0.1);
        let out = reduce_average(&img).unwrap();
        let hw = 4;
        assert_eq!(&out.data()[0..hw], &out.data()[hw..2 * hw]);
        assert_eq!(&out.data()[0..hw], &out.data()[2 * hw..3 * hw]);
    }

    #[test]
    fn binned_means_per_bin() {
        let vals = [3.0, 3.0, 3.0, 6.0, 6.0, 6.0, 8.0, 8.0];
        let img = stack(1, 8, 2, 2, |_, b| vals[b]);
        let out = reduce_binned(&img).unwrap();
        let hw = 4;
        assert!(out.data()[0..hw].iter().all(|&v| v == 3.0));
        assert!(out.data()[hw..2 * hw].iter().all(|&v| v == 6.0));
        assert!(out.data()[2 * hw..3 * hw].iter().all(|&v| v == 8.0));
    }

    #[test]
    fn bins_are_independent() {
        let base = stack(1, 8, 2, 2, |_, b| b as f64 * 0.1);
        let mut perturbed = base.clone();
        for v in perturbed.data_mut()[0..3 * 4].iter_mut() {
            *v += 5.0; // bump bin 1 bands only
        }
        let a = reduce_binned(&base).unwrap();
        let b = reduce_binned(&perturbed).unwrap();
        assert_eq!(&a.data()[4..12], &b.data()[4..12]);
        assert_ne!(&a.data()[0..4], &b.data()[0..4]);
    }

    #[test]
    fn reductions_are_linear() {
        let img = stack(1, 8, 2, 2, |_, b| (b as f64 + 1.0) * 0.05);
        let scaled = img.map(|v| v * 3.0);
        for f in [reduce_average, reduce_binned] {
            let a = f(&img).unwrap().map(|v| v * 3.0);
            let b = f(&scaled).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let img = stack(1, 5, 2, 2, |_, _| 0.5);
        assert!(reduce_average(&img).is_err());
        assert!(reduce_binned(&img).is_err());
    }
}
