//! Inner loops for convolution, pooling and matmul.
//!
//! All kernels are single-threaded and accumulate in a fixed order, so results
//! are bit-identical for identical inputs.

use super::array::{Array, Scalar};

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_extent(in_extent: usize, k: usize, stride: usize, padding: usize) -> usize {
        (in_extent + 2 * padding - k) / stride + 1
    }
}

/// Valid output-column range for a kernel column `kw`: every `ow` in
/// `lo..hi` maps to an in-bounds input column `ow*stride + kw - padding`.
#[inline]
fn ow_range(geom: &ConvGeom, kw: usize) -> (usize, usize) {
    let (s, p, w, ow) = (geom.stride, geom.padding, geom.w, geom.ow);
    let lo = if kw >= p { 0 } else { (p - kw + s - 1) / s };
    let hi_in = w + p - kw; // exclusive bound on ow*s + 1
    let hi = if hi_in == 0 { 0 } else { ((hi_in - 1) / s + 1).min(ow) };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward<T: Scalar>(input: &Array<T>, weight: &Array<T>, geom: &ConvGeom) -> Array<T> {
    let mut out = Array::zeros(&[geom.n, geom.c_out, geom.oh, geom.ow]);
    let inp = input.data();
    let wts = weight.data();
    let o = out.data_mut();
    let cg = geom.c_in / geom.groups;
    let og = geom.c_out / geom.groups;
    let (k, s, p) = (geom.k, geom.stride, geom.padding);

    for n in 0..geom.n {
        for g in 0..geom.groups {
            for oco in 0..og {
                let oc = g * og + oco;
                let out_base = (n * geom.c_out + oc) * geom.oh * geom.ow;
                for icl in 0..cg {
                    let ic = g * cg + icl;
                    let in_base = (n * geom.c_in + ic) * geom.h * geom.w;
                    let w_base = (oc * cg + icl) * k * k;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wts[w_base + kh * k + kw];
                            let (lo, hi) = ow_range(geom, kw);
                            if lo >= hi {
                                continue;
                            }
                            for oh in 0..geom.oh {
                                let ih = (oh * s + kh).wrapping_sub(p);
                                if ih >= geom.h {
                                    continue;
                                }
                                let iw0 = lo * s + kw - p;
                                let orow = &mut o[out_base + oh * geom.ow + lo..out_base + oh * geom.ow + hi];
                                if s == 1 {
                                    let irow = &inp[in_base + ih * geom.w + iw0..in_base + ih * geom.w + iw0 + (hi - lo)];
                                    for (ov, &iv) in orow.iter_mut().zip(irow) {
                                        *ov = *ov + wv * iv;
                                    }
                                } else {
                                    for (j, ov) in orow.iter_mut().enumerate() {
                                        *ov = *ov + wv * inp[in_base + ih * geom.w + iw0 + j * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Scalar>(dout: &Array<T>, weight: &Array<T>, geom: &ConvGeom) -> Array<T> {
    let mut din = Array::zeros(&[geom.n, geom.c_in, geom.h, geom.w]);
    let d = din.data_mut();
    let wts = weight.data();
    let go = dout.data();
    let cg = geom.c_in / geom.groups;
    let og = geom.c_out / geom.groups;
    let (k, s, p) = (geom.k, geom.stride, geom.padding);

    for n in 0..geom.n {
        for g in 0..geom.groups {
            for icl in 0..cg {
                let ic = g * cg + icl;
                let in_base = (n * geom.c_in + ic) * geom.h * geom.w;
                for oco in 0..og {
                    let oc = g * og + oco;
                    let out_base = (n * geom.c_out + oc) * geom.oh * geom.ow;
                    let w_base = (oc * cg + icl) * k * k;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wts[w_base + kh * k + kw];
                            let (lo, hi) = ow_range(geom, kw);
                            if lo >= hi {
                                continue;
                            }
                            for oh in 0..geom.oh {
                                let ih = (oh * s + kh).wrapping_sub(p);
                                if ih >= geom.h {
                                    continue;
                                }
                                let iw0 = lo * s + kw - p;
                                let grow = &go[out_base + oh * geom.ow + lo..out_base + oh * geom.ow + hi];
                                if s == 1 {
                                    let drow = &mut d[in_base + ih * geom.w + iw0..in_base + ih * geom.w + iw0 + (hi - lo)];
                                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                                        *dv = *dv + wv * gv;
                                    }
                                } else {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        let idx = in_base + ih * geom.w + iw0 + j * s;
                                        d[idx] = d[idx] + wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

pub(crate) fn conv2d_backward_weight<T: Scalar>(dout: &Array<T>, input: &Array<T>, geom: &ConvGeom) -> Array<T> {
    let cg = geom.c_in / geom.groups;
    let og = geom.c_out / geom.groups;
    let (k, s, p) = (geom.k, geom.stride, geom.padding);
    let mut dw = Array::zeros(&[geom.c_out, cg, k, k]);
    let d = dw.data_mut();
    let inp = input.data();
    let go = dout.data();

    for n in 0..geom.n {
        for g in 0..geom.groups {
            for oco in 0..og {
                let oc = g * og + oco;
                let out_base = (n * geom.c_out + oc) * geom.oh * geom.ow;
                for icl in 0..cg {
                    let ic = g * cg + icl;
                    let in_base = (n * geom.c_in + ic) * geom.h * geom.w;
                    for kh in 0..k {
                        for kw in 0..k {
                            let (lo, hi) = ow_range(geom, kw);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oh in 0..geom.oh {
                                let ih = (oh * s + kh).wrapping_sub(p);
                                if ih >= geom.h {
                                    continue;
                                }
                                let iw0 = lo * s + kw - p;
                                let grow = &go[out_base + oh * geom.ow + lo..out_base + oh * geom.ow + hi];
                                if s == 1 {
                                    let irow = &inp[in_base + ih * geom.w + iw0..in_base + ih * geom.w + iw0 + (hi - lo)];
                                    for (&gv, &iv) in grow.iter().zip(irow) {
                                        acc = acc + gv * iv;
                                    }
                                } else {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        acc = acc + gv * inp[in_base + ih * geom.w + iw0 + j * s];
                                    }
                                }
                            }
                            let idx = (oc * cg + icl) * k * k + kh * k + kw;
                            d[idx] = d[idx] + acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Per-window argmax of `score` over non-overlapping `window`-sized tiles.
/// Returns flat indices into `score` (first index wins ties).
pub(crate) fn pool_argmax<T: Scalar>(score: &Array<T>, window: usize) -> (Vec<usize>, Vec<u32>) {
    let shp = score.shape();
    let (n, c, h, w) = (shp[0], shp[1], shp[2], shp[3]);
    let (oh, ow) = (h / window, w / window);
    let s = score.data();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (oy * window) * w + ox * window;
                    let mut best_v = s[best];
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = base + (oy * window + ky) * w + (ox * window + kx);
                            if s[i] > best_v {
                                best_v = s[i];
                                best = i;
                            }
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
    }
    (vec![n, c, oh, ow], idx)
}

pub(crate) fn gather<T: Scalar>(input: &Array<T>, indices: &[u32], out_shape: &[usize]) -> Array<T> {
    let src = input.data();
    let data = indices.iter().map(|&i| src[i as usize]).collect();
    Array::new(out_shape.to_vec(), data).expect("gather shape")
}

pub(crate) fn scatter_add<T: Scalar>(dout: &Array<T>, indices: &[u32], into: &mut Array<T>) {
    let d = into.data_mut();
    for (&i, &g) in indices.iter().zip(dout.data()) {
        d[i as usize] = d[i as usize] + g;
    }
}

/// `a [n,k] * b [k,m] -> [n,m]`.
pub(crate) fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = Array::zeros(&[n, m]);
    let o = out.data_mut();
    let av = a.data();
    let bv = b.data();
    for i in 0..n {
        let orow = &mut o[i * m..(i + 1) * m];
        for kk in 0..k {
            let s = av[i * k + kk];
            let brow = &bv[kk * m..(kk + 1) * m];
            for (ov, &bvv) in orow.iter_mut().zip(brow) {
                *ov = *ov + s * bvv;
            }
        }
    }
    out
}

/// dA = dC * B^T.
pub(crate) fn matmul_da<T: Scalar>(dc: &Array<T>, b: &Array<T>) -> Array<T> {
    let (n, m) = (dc.shape()[0], dc.shape()[1]);
    let k = b.shape()[0];
    let mut da = Array::zeros(&[n, k]);
    let d = da.data_mut();
    let dcv = dc.data();
    let bv = b.data();
    for i in 0..n {
        let dcrow = &dcv[i * m..(i + 1) * m];
        for kk in 0..k {
            let brow = &bv[kk * m..(kk + 1) * m];
            let mut acc = T::zero();
            for (&g, &bvv) in dcrow.iter().zip(brow) {
                acc = acc + g * bvv;
            }
            d[i * k + kk] = acc;
        }
    }
    da
}

/// dB = A^T * dC.
pub(crate) fn matmul_db<T: Scalar>(dc: &Array<T>, a: &Array<T>) -> Array<T> {
    let (n, m) = (dc.shape()[0], dc.shape()[1]);
    let k = a.shape()[1];
    let mut db = Array::zeros(&[k, m]);
    let d = db.data_mut();
    let dcv = dc.data();
    let av = a.data();
    for i in 0..n {
        let dcrow = &dcv[i * m..(i + 1) * m];
        for kk in 0..k {
            let s = av[i * k + kk];
            let drow = &mut d[kk * m..(kk + 1) * m];
            for (dv, &g) in drow.iter_mut().zip(dcrow) {
                *dv = *dv + s * g;
            }
        }
    }
    db
}
