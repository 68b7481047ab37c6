//! Direct convolution kernels: im2col plus axpy/dot matrix products, with a
//! materialization-free fast path for depthwise and 1x1 convolutions.
//!
//! All loops are sequential with a fixed accumulation order (dots reduce in
//! a fixed 16-lane split), so results are bit-reproducible for a given build.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if span < k {
        return Err(Error::invalid(format!(
            "kernel {} exceeds padded extent {}",
            k, span
        )));
    }
    Ok((span - k) / stride + 1)
}

impl ConvDims {
    pub fn resolve(
        x_shape: (usize, usize, usize, usize),
        w_shape: (usize, usize, usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<ConvDims> {
        let (n, c_in, h, w) = x_shape;
        let (c_out, c_w, kh, kw) = w_shape;
        if kh != kw {
            return Err(Error::shape(format!("kernel must be square, got {}x{}", kh, kw)));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::shape(format!(
                "channels ({} in, {} out) not divisible by groups {}",
                c_in, c_out, groups
            )));
        }
        if c_w != c_in / groups {
            return Err(Error::shape(format!(
                "weight expects {} input channels per group, input has {} ({} groups)",
                c_w,
                c_in / groups,
                groups
            )));
        }
        let oh = out_extent(h, kh, stride, padding)?;
        let ow = out_extent(w, kw, stride, padding)?;
        Ok(ConvDims {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            groups,
            oh,
            ow,
        })
    }

    fn k_dim(&self) -> usize {
        (self.c_in / self.groups) * self.k * self.k
    }

    fn is_unit(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in && self.stride == 1 && self.k > 1
    }

    /// Valid output-column range for kernel column `kj` at stride 1, plus
    /// the first input column it reads.
    fn ox_range(&self, kj: usize) -> Option<(usize, usize, usize)> {
        let pad = self.padding as isize;
        let lo = (pad - kj as isize).max(0) as usize;
        let hi_signed = (self.w as isize - 1 + pad - kj as isize).min(self.ow as isize - 1);
        if hi_signed < lo as isize {
            return None;
        }
        let hi = hi_signed as usize;
        let ix_lo = (lo as isize + kj as isize - pad) as usize;
        Some((lo, hi, ix_lo))
    }
}

/// Writes the im2col matrix (`k_dim` rows by `oh*ow` columns) of one sample's
/// channel block into `cols`. `x` is the block of `cpg` contiguous channels.
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, cols: &mut [S]) {
    let cpg = d.c_in / d.groups;
    let n_pix = d.oh * d.ow;
    for v in cols.iter_mut() {
        *v = S::zero();
    }
    for c in 0..cpg {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst_row = &mut cols[row * n_pix..(row + 1) * n_pix];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    let dst = &mut dst_row[oy * d.ow..(oy + 1) * d.ow];
                    if d.stride == 1 {
                        if let Some((ox_lo, ox_hi, ix_lo)) = d.ox_range(kj) {
                            dst[ox_lo..=ox_hi]
                                .copy_from_slice(&src_row[ix_lo..ix_lo + (ox_hi - ox_lo + 1)]);
                        }
                    } else {
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of an im2col matrix back into the image block it came from.
fn col2im_add<S: Scalar>(cols: &[S], d: &ConvDims, x_grad: &mut [S]) {
    let cpg = d.c_in / d.groups;
    let n_pix = d.oh * d.ow;
    for c in 0..cpg {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src_row = &cols[row * n_pix..(row + 1) * n_pix];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut x_grad[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        if let Some((ox_lo, ox_hi, ix_lo)) = d.ox_range(kj) {
                            let src = &src_row[oy * d.ow + ox_lo..oy * d.ow + ox_hi + 1];
                            let dst = &mut dst_row[ix_lo..ix_lo + src.len()];
                            for (dv, &sv) in dst.iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    } else {
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst_row[ix as usize] += src_row[oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<S: Scalar>(acc: &mut [S], a: S, row: &[S]) {
    for (y, b) in acc.iter_mut().zip(row.iter()) {
        *y += a * *b;
    }
}

/// Dot product reduced over 16 independent lanes (fixed order, SIMD-friendly).
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 16;
    let n = a.len().min(b.len());
    let chunks = n / LANES;
    let mut acc = [S::zero(); LANES];
    for i in 0..chunks {
        let ab = &a[i * LANES..(i + 1) * LANES];
        let bb = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] += ab[l] * bb[l];
        }
    }
    let mut s = S::zero();
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn sum<S: Scalar>(a: &[S]) -> S {
    const LANES: usize = 16;
    let chunks = a.len() / LANES;
    let mut acc = [S::zero(); LANES];
    for i in 0..chunks {
        let ab = &a[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] += ab[l];
        }
    }
    let mut s = S::zero();
    for l in 0..LANES {
        s += acc[l];
    }
    for v in &a[chunks * LANES..] {
        s += *v;
    }
    s
}

/// `out = W @ cols` over one group, blocking output channels in fours so a
/// cols row streams from memory once per block.
fn matmul_rows<S: Scalar>(out: &mut [S], weight: &[S], cols: &[S], opg: usize, k_dim: usize, n_pix: usize) {
    let mut ob = 0;
    while ob < opg {
        let nb = (opg - ob).min(4);
        for r in 0..k_dim {
            let col_row = &cols[r * n_pix..(r + 1) * n_pix];
            for j in 0..nb {
                let o = ob + j;
                axpy(&mut out[o * n_pix..(o + 1) * n_pix], weight[o * k_dim + r], col_row);
            }
        }
        ob += nb;
    }
}

/// Depthwise (one channel per group) stride-1 forward without im2col.
fn depthwise_forward<S: Scalar>(x: &[S], weight: &[S], bias: Option<&[S]>, d: &ConvDims, out: &mut [S]) {
    for b in 0..d.n {
        for c in 0..d.c_in {
            let x_plane = &x[(b * d.c_in + c) * d.h * d.w..(b * d.c_in + c + 1) * d.h * d.w];
            let out_plane =
                &mut out[(b * d.c_out + c) * d.oh * d.ow..(b * d.c_out + c + 1) * d.oh * d.ow];
            if let Some(bias) = bias {
                for v in out_plane.iter_mut() {
                    *v = bias[c];
                }
            }
            for ki in 0..d.k {
                for kj in 0..d.k {
                    let wv = weight[(c * d.k + ki) * d.k + kj];
                    let Some((ox_lo, ox_hi, ix_lo)) = d.ox_range(kj) else {
                        continue;
                    };
                    let len = ox_hi - ox_lo + 1;
                    for oy in 0..d.oh {
                        let iy = (oy + ki) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &x_plane[iy as usize * d.w + ix_lo..iy as usize * d.w + ix_lo + len];
                        axpy(&mut out_plane[oy * d.ow + ox_lo..oy * d.ow + ox_lo + len], wv, src);
                    }
                }
            }
        }
    }
}

fn depthwise_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dy: &[S],
    d: &ConvDims,
    dx: &mut [S],
    dw: &mut [S],
    db: Option<&mut Vec<S>>,
) {
    for b in 0..d.n {
        for c in 0..d.c_in {
            let x_plane = &x[(b * d.c_in + c) * d.h * d.w..(b * d.c_in + c + 1) * d.h * d.w];
            let dy_plane = &dy[(b * d.c_out + c) * d.oh * d.ow..(b * d.c_out + c + 1) * d.oh * d.ow];
            let dx_plane =
                &mut dx[(b * d.c_in + c) * d.h * d.w..(b * d.c_in + c + 1) * d.h * d.w];
            for ki in 0..d.k {
                for kj in 0..d.k {
                    let widx = (c * d.k + ki) * d.k + kj;
                    let wv = weight[widx];
                    let Some((ox_lo, ox_hi, ix_lo)) = d.ox_range(kj) else {
                        continue;
                    };
                    let len = ox_hi - ox_lo + 1;
                    let mut wacc = S::zero();
                    for oy in 0..d.oh {
                        let iy = (oy + ki) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let dy_row = &dy_plane[oy * d.ow + ox_lo..oy * d.ow + ox_lo + len];
                        // input gradient: dy spread back through the kernel tap
                        axpy(&mut dx_plane[iy * d.w + ix_lo..iy * d.w + ix_lo + len], wv, dy_row);
                        // weight gradient: correlation of dy with the input window
                        wacc += dot(dy_row, &x_plane[iy * d.w + ix_lo..iy * d.w + ix_lo + len]);
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
    if let Some(db) = db {
        for b in 0..d.n {
            for c in 0..d.c_out {
                db[c] += sum(&dy[(b * d.c_out + c) * d.oh * d.ow..(b * d.c_out + c + 1) * d.oh * d.ow]);
            }
        }
    }
}

/// Cross-correlation forward pass. `bias` has one entry per output channel.
pub(crate) fn forward<S: Scalar>(
    x: &[S],
    weight: &[S],
    bias: Option<&[S]>,
    d: &ConvDims,
) -> Vec<S> {
    let n_pix = d.oh * d.ow;
    let mut out = vec![S::zero(); d.n * d.c_out * n_pix];
    if d.is_depthwise() {
        depthwise_forward(x, weight, bias, d, &mut out);
        return out;
    }
    let cpg = d.c_in / d.groups;
    let opg = d.c_out / d.groups;
    let k_dim = d.k_dim();
    let mut cols = if d.is_unit() { Vec::new() } else { vec![S::zero(); k_dim * n_pix] };

    for b in 0..d.n {
        let x_sample = &x[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w];
        for g in 0..d.groups {
            let x_block = &x_sample[g * cpg * d.h * d.w..(g + 1) * cpg * d.h * d.w];
            let cols_ref: &[S] = if d.is_unit() {
                x_block
            } else {
                im2col(x_block, d, &mut cols);
                &cols
            };
            let out_base = (b * d.c_out + g * opg) * n_pix;
            matmul_rows(
                &mut out[out_base..out_base + opg * n_pix],
                &weight[g * opg * k_dim..(g + 1) * opg * k_dim],
                cols_ref,
                opg,
                k_dim,
                n_pix,
            );
            if let Some(bias) = bias {
                for o in 0..opg {
                    let bv = bias[g * opg + o];
                    for y in out[out_base + o * n_pix..out_base + (o + 1) * n_pix].iter_mut() {
                        *y += bv;
                    }
                }
            }
        }
    }
    out
}

/// Gradients for input, weight, and (optionally) bias given the output
/// gradient `dy`. The im2col matrix is rebuilt rather than cached.
pub(crate) fn backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dy: &[S],
    has_bias: bool,
    d: &ConvDims,
) -> (Vec<S>, Vec<S>, Option<Vec<S>>) {
    let n_pix = d.oh * d.ow;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); weight.len()];
    let mut db = if has_bias { Some(vec![S::zero(); d.c_out]) } else { None };
    if d.is_depthwise() {
        depthwise_backward(x, weight, dy, d, &mut dx, &mut dw, db.as_mut());
        return (dx, dw, db);
    }
    let cpg = d.c_in / d.groups;
    let opg = d.c_out / d.groups;
    let k_dim = d.k_dim();
    let mut cols = if d.is_unit() { Vec::new() } else { vec![S::zero(); k_dim * n_pix] };
    let mut dcols = if d.is_unit() { Vec::new() } else { vec![S::zero(); k_dim * n_pix] };

    for b in 0..d.n {
        let x_sample = &x[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w];
        for g in 0..d.groups {
            let x_block = &x_sample[g * cpg * d.h * d.w..(g + 1) * cpg * d.h * d.w];
            let cols_ref: &[S] = if d.is_unit() {
                x_block
            } else {
                im2col(x_block, d, &mut cols);
                &cols
            };
            if let Some(db) = db.as_mut() {
                for o in 0..opg {
                    let oc = g * opg + o;
                    db[oc] +=
                        sum(&dy[(b * d.c_out + oc) * n_pix..(b * d.c_out + oc + 1) * n_pix]);
                }
            }
            // One blocked sweep computes both dW[o][r] = dot(dY[o], cols[r])
            // and dCols[r] = sum_o W[o][r] * dY[o]; a cols/dcols row pair
            // streams from memory once per block of 4 output channels.
            let dx_block_range = b * d.c_in * d.h * d.w + g * cpg * d.h * d.w
                ..b * d.c_in * d.h * d.w + (g + 1) * cpg * d.h * d.w;
            let target: &mut [S] = if d.is_unit() {
                &mut dx[dx_block_range]
            } else {
                for v in dcols.iter_mut() {
                    *v = S::zero();
                }
                &mut dcols
            };
            let mut ob = 0;
            while ob < opg {
                let nb = (opg - ob).min(4);
                for r in 0..k_dim {
                    let col_row = &cols_ref[r * n_pix..(r + 1) * n_pix];
                    let t_row = r * n_pix;
                    for j in 0..nb {
                        let oc = g * opg + ob + j;
                        let dy_row =
                            &dy[(b * d.c_out + oc) * n_pix..(b * d.c_out + oc + 1) * n_pix];
                        dw[oc * k_dim + r] += dot(dy_row, col_row);
                        axpy(&mut target[t_row..t_row + n_pix], weight[oc * k_dim + r], dy_row);
                    }
                }
                ob += nb;
            }
            if !d.is_unit() {
                col2im_add(&dcols, d, &mut dx[b * d.c_in * d.h * d.w + g * cpg * d.h * d.w
                    ..b * d.c_in * d.h * d.w + (g + 1) * cpg * d.h * d.w]);
            }
        }
    }
    (dx, dw, db)
}
