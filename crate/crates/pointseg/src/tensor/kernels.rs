//! Forward kernels and their hand-derived backward passes.
//!
//! All kernels are pure functions over immutable tensors and are bitwise
//! deterministic: accumulation orders are fixed, and the only parallelism
//! splits output blocks that are computed independently. Convolution
//! accumulates in `f32` (tolerances in the tests account for it); scalar
//! reductions use Kahan compensation to keep finite-difference checks
//! meaningful at 32-bit precision.

use rayon::prelude::*;

use super::{ConvSpec, Tensor};
use crate::error::{Error, Result};

/// Work threshold (multiply-accumulates) below which convolution stays on
/// the calling thread; tiny kernels are called in tight test loops where
/// fork-join overhead dominates.
const PAR_MIN_MACS: usize = 1 << 22;

#[inline]
fn axpy(dst: &mut [f32], a: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Kahan-compensated sum; keeps reduction error near one ulp so that
/// numerical checks against the scalar loss stay tight.
pub(crate) fn kahan_sum(values: impl Iterator<Item = f32>) -> f32 {
    let mut acc = 0.0f32;
    let mut comp = 0.0f32;
    for v in values {
        let y = v - comp;
        let t = acc + y;
        comp = (t - acc) - y;
        acc = t;
    }
    acc
}

fn check_feature_channels(op: &'static str, x: &Tensor, expect: usize) -> Result<(usize, usize)> {
    let (h, w, c) = x.dims3()?;
    if c != expect {
        return Err(Error::shape(
            op,
            format!("input has {c} channels, spec expects {expect}"),
        ));
    }
    Ok((h, w))
}

fn check_weight(op: &'static str, w: &Tensor, expect: [usize; 4]) -> Result<()> {
    if w.shape() != expect {
        return Err(Error::shape(
            op,
            format!("weight shape {:?}, spec expects {:?}", w.shape(), expect),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, b: &Tensor, expect: usize) -> Result<()> {
    if b.shape() != [expect] {
        return Err(Error::shape(
            op,
            format!("bias shape {:?}, spec expects [{expect}]", b.shape()),
        ));
    }
    Ok(())
}

/// Gathers the receptive field of each output pixel in `rows` into a
/// `[rows * ow, kh * kw * cin]` patch matrix, zero-filling padded taps.
#[allow(clippy::too_many_arguments)]
fn im2col(
    xd: &[f32],
    (h, w, cin): (usize, usize, usize),
    spec: &ConvSpec,
    (ph, pw): (usize, usize),
    row0: usize,
    rows: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let k_len = kh * kw * cin;
    for r in 0..rows {
        let oh_i = row0 + r;
        for ow_i in 0..ow {
            let dst = &mut cols[(r * ow + ow_i) * k_len..][..k_len];
            let mut off = 0;
            for kh_i in 0..kh {
                let ih = (oh_i * sh + kh_i * dh) as isize - ph as isize;
                let row_ok = ih >= 0 && (ih as usize) < h;
                for kw_i in 0..kw {
                    let iw = (ow_i * sw + kw_i * dw) as isize - pw as isize;
                    if row_ok && iw >= 0 && (iw as usize) < w {
                        let src = (ih as usize * w + iw as usize) * cin;
                        dst[off..off + cin].copy_from_slice(&xd[src..src + cin]);
                    } else {
                        dst[off..off + cin].fill(0.0);
                    }
                    off += cin;
                }
            }
        }
    }
}

/// 2D convolution. Input `[h, w, in]`, weights `[kh, kw, in, out]`, bias
/// `[out]`. Accumulation order per output element is bias, then taps in
/// `(kh, kw, cin)` order.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, wd) = check_feature_channels("conv2d", x, spec.in_channels)?;
    check_weight("conv2d", w, spec.weight_shape())?;
    check_bias("conv2d", b, spec.out_channels)?;

    let (oh, ow) = spec.out_extent(h, wd)?;
    let (ph, pw) = spec.pad_begin(h, wd)?;
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let k_len = spec.kernel.0 * spec.kernel.1 * cin;
    let direct = spec.kernel == (1, 1) && spec.stride == (1, 1);

    let xd = x.data();
    let wd_flat = w.data();
    let bd = b.data();

    // Patch matrices are built per block of output rows to cap memory.
    let rows_per_block = ((1usize << 18) / (ow * k_len).max(1)).clamp(1, oh);
    let block_len = rows_per_block * ow * cout;
    let mut out = vec![0.0f32; oh * ow * cout];

    let fill = |(bi, out_block): (usize, &mut [f32])| {
        let row0 = bi * rows_per_block;
        let rows = rows_per_block.min(oh - row0);
        let mut cols_buf = Vec::new();
        let cols: &[f32] = if direct {
            &xd[row0 * ow * cin..(row0 + rows) * ow * cin]
        } else {
            cols_buf.resize(rows * ow * k_len, 0.0);
            im2col(
                xd,
                (h, wd, cin),
                spec,
                (ph, pw),
                row0,
                rows,
                ow,
                &mut cols_buf,
            );
            &cols_buf
        };
        for px in 0..rows * ow {
            let orow = &mut out_block[px * cout..(px + 1) * cout];
            orow.copy_from_slice(bd);
            let arow = &cols[px * k_len..(px + 1) * k_len];
            for (k, &a) in arow.iter().enumerate() {
                axpy(orow, a, &wd_flat[k * cout..(k + 1) * cout]);
            }
        }
    };

    let macs = oh * ow * cout * k_len;
    if macs >= PAR_MIN_MACS && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(block_len).enumerate().for_each(fill);
    } else {
        out.chunks_mut(block_len).enumerate().for_each(fill);
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Gradient of `conv2d` with respect to input, weights, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, wd) = check_feature_channels("conv2d_backward", x, spec.in_channels)?;
    let (oh, ow) = spec.out_extent(h, wd)?;
    let (gh, gw) = check_feature_channels("conv2d_backward", dy, spec.out_channels)?;
    if (gh, gw) != (oh, ow) {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream extent {gh}x{gw}, expected {oh}x{ow}"),
        ));
    }
    let dx = deconv_gather(dy, w, spec, (h, wd), None)?;
    let dw = conv_dw(x, dy, spec)?;
    let db = channel_sums(dy);
    Ok((dx, dw, db))
}

/// dL/dw for a convolution: correlates input patches with upstream grads.
fn conv_dw(x: &Tensor, dy: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (h, wd, cin) = x.dims3()?;
    let (oh, ow, cout) = dy.dims3()?;
    let (ph, pw) = spec.pad_begin(h, wd)?;
    let k_len = spec.kernel.0 * spec.kernel.1 * cin;
    let xd = x.data();
    let dyd = dy.data();
    let mut dw = vec![0.0f32; k_len * cout];
    let rows_per_block = ((1usize << 18) / (ow * k_len).max(1)).clamp(1, oh);
    let mut cols = vec![0.0f32; rows_per_block * ow * k_len];
    let mut row0 = 0;
    while row0 < oh {
        let rows = rows_per_block.min(oh - row0);
        im2col(xd, (h, wd, cin), spec, (ph, pw), row0, rows, ow, &mut cols);
        for px in 0..rows * ow {
            let arow = &cols[px * k_len..(px + 1) * k_len];
            let grow = &dyd[(row0 * ow + px) * cout..][..cout];
            for (k, &a) in arow.iter().enumerate() {
                axpy(&mut dw[k * cout..(k + 1) * cout], a, grow);
            }
        }
        row0 += rows;
    }
    Tensor::new(spec.weight_shape().to_vec(), dw)
}

/// Per-channel sums over all pixels (dL/db of conv-family ops).
fn channel_sums(dy: &Tensor) -> Tensor {
    let (h, w, c) = dy.dims3().expect("channel_sums: rank-3");
    let dyd = dy.data();
    let mut acc = vec![0.0f32; c];
    let mut comp = vec![0.0f32; c];
    for px in 0..h * w {
        for ci in 0..c {
            let y = dyd[px * c + ci] - comp[ci];
            let t = acc[ci] + y;
            comp[ci] = (t - acc[ci]) - y;
            acc[ci] = t;
        }
    }
    Tensor::new(vec![c], acc).expect("channel_sums shape")
}

/// Scatter core shared by transposed convolution and the conv input
/// gradient: computes the exact adjoint of `conv2d` with weights `w`
/// (`[kh, kw, ca, cb]`, conv reading `ca -> cb`), mapping a `cb`-channel
/// map back to a `ca`-channel map of extent `out_hw`.
fn deconv_gather(
    u: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    out_hw: (usize, usize),
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (uh, uw, cb) = u.dims3()?;
    let (kh, kw, ca, wb) = w.dims4()?;
    if wb != cb {
        return Err(Error::shape(
            "deconv2d",
            format!("weight trailing extent {wb}, input has {cb} channels"),
        ));
    }
    if (kh, kw) != spec.kernel {
        return Err(Error::shape(
            "deconv2d",
            format!("weight kernel {kh}x{kw}, spec kernel {:?}", spec.kernel),
        ));
    }
    let (vh, vw) = out_hw;
    let expect_u = spec.out_extent(vh, vw)?;
    if expect_u != (uh, uw) {
        return Err(Error::shape(
            "deconv2d",
            format!(
                "input extent {uh}x{uw} does not adjoint an output of {vh}x{vw} (needs {}x{})",
                expect_u.0, expect_u.1
            ),
        ));
    }
    let (ph, pw) = spec.pad_begin(vh, vw)?;
    let (sh, sw) = spec.stride;
    let (dh, dw_) = spec.dilation;

    // Transposed weight copy [kh, kw, cb, ca] so the inner loop is a
    // contiguous axpy over output channels.
    let wd = w.data();
    let mut wt = vec![0.0f32; wd.len()];
    for k in 0..kh * kw {
        for a in 0..ca {
            for b_i in 0..cb {
                wt[(k * cb + b_i) * ca + a] = wd[(k * ca + a) * cb + b_i];
            }
        }
    }

    let ud = u.data();
    let mut v = vec![0.0f32; vh * vw * ca];
    if let Some(b) = bias {
        check_bias("deconv2d", b, ca)?;
        for px in 0..vh * vw {
            v[px * ca..(px + 1) * ca].copy_from_slice(b.data());
        }
    }

    let mut kh_hits: Vec<(usize, usize)> = Vec::with_capacity(kh);
    for ih in 0..vh {
        kh_hits.clear();
        for kh_i in 0..kh {
            let num = ih as isize + ph as isize - (kh_i * dh) as isize;
            if num >= 0 && (num as usize).is_multiple_of(sh) {
                let oh = num as usize / sh;
                if oh < uh {
                    kh_hits.push((kh_i, oh));
                }
            }
        }
        for iw in 0..vw {
            let vrow = &mut v[(ih * vw + iw) * ca..][..ca];
            for &(kh_i, oh) in &kh_hits {
                for kw_i in 0..kw {
                    let num = iw as isize + pw as isize - (kw_i * dw_) as isize;
                    if num < 0 || !(num as usize).is_multiple_of(sw) {
                        continue;
                    }
                    let ow = num as usize / sw;
                    if ow >= uw {
                        continue;
                    }
                    let urow = &ud[(oh * uw + ow) * cb..][..cb];
                    let wslab = &wt[(kh_i * kw + kw_i) * cb * ca..];
                    for (b_i, &uv) in urow.iter().enumerate() {
                        axpy(vrow, uv, &wslab[b_i * ca..(b_i + 1) * ca]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![vh, vw, ca], v)
}

/// Transposed convolution. Input `[h, w, in]`, weights `[kh, kw, out, in]`,
/// bias `[out]`. Under SAME padding the output extent is exactly
/// `stride * input extent`; the op is the adjoint of `conv2d` with the same
/// weight tensor, so the gradient of `deconv2d` is a `conv2d` forward.
pub fn deconv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    if spec.stride.0 != 1 || !(spec.stride.1 == 1 || spec.stride.1 == 2) {
        return Err(Error::shape(
            "deconv2d",
            format!("stride {:?} unsupported; needs (1, 1) or (1, 2)", spec.stride),
        ));
    }
    let (h, wd) = check_feature_channels("deconv2d", x, spec.in_channels)?;
    check_weight("deconv2d", w, spec.deconv_weight_shape())?;
    let out_hw = spec.deconv_out_extent(h, wd)?;
    // The adjoint conv reads the weight as [kh, kw, ca=out, cb=in].
    deconv_gather(x, w, &spec.adjoint(), out_hw, Some(b))
}

impl ConvSpec {
    /// The convolution this spec's transposed convolution is adjoint to:
    /// same geometry, channel roles swapped.
    pub fn adjoint(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            ..*self
        }
    }
}

/// Gradient of `deconv2d`: dx is a plain convolution of the upstream
/// gradient with the same weights.
pub fn deconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, wd) = check_feature_channels("deconv2d_backward", x, spec.in_channels)?;
    let out_hw = spec.deconv_out_extent(h, wd)?;
    let (gh, gw) = check_feature_channels("deconv2d_backward", dy, spec.out_channels)?;
    if (gh, gw) != out_hw {
        return Err(Error::shape(
            "deconv2d_backward",
            format!(
                "upstream extent {gh}x{gw}, expected {}x{}",
                out_hw.0, out_hw.1
            ),
        ));
    }
    let zero_b = Tensor::zeros(vec![spec.in_channels]);
    let dx = conv2d(dy, w, &zero_b, &spec.adjoint())?;
    let dw = conv_dw(dy, x, &spec.adjoint())?;
    let db = channel_sums(dy);
    Ok((dx, dw, db))
}

/// Max pooling with SAME padding. Returns the pooled map and, per output
/// element, the linear index of the winning input element; ties go to the
/// lowest linear index.
pub fn maxpool2d_with_argmax(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<u32>)> {
    if kernel.0 < 1 || kernel.1 < 1 || stride.0 < 1 || stride.1 < 1 {
        return Err(Error::shape(
            "maxpool2d",
            format!("kernel {kernel:?} / stride {stride:?} must be at least 1"),
        ));
    }
    let (h, w, c) = x.dims3()?;
    let oh = h.div_ceil(stride.0);
    let ow = w.div_ceil(stride.1);
    let ph = ((oh - 1) * stride.0 + kernel.0).saturating_sub(h) / 2;
    let pw = ((ow - 1) * stride.1 + kernel.1).saturating_sub(w) / 2;
    let xd = x.data();
    let mut out = vec![0.0f32; oh * ow * c];
    let mut argmax = vec![0u32; oh * ow * c];
    for oh_i in 0..oh {
        for ow_i in 0..ow {
            for ci in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = u32::MAX;
                for kh_i in 0..kernel.0 {
                    let ih = (oh_i * stride.0 + kh_i) as isize - ph as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for kw_i in 0..kernel.1 {
                        let iw = (ow_i * stride.1 + kw_i) as isize - pw as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        let idx = (ih as usize * w + iw as usize) * c + ci;
                        // Strict > keeps the first (lowest-index) winner on ties.
                        if xd[idx] > best || best_idx == u32::MAX {
                            best = xd[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                debug_assert_ne!(best_idx, u32::MAX, "pool window entirely out of bounds");
                let o = (oh_i * ow + ow_i) * c + ci;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, argmax))
}

pub fn maxpool2d(x: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    maxpool2d_with_argmax(x, kernel, stride).map(|(t, _)| t)
}

/// Routes each upstream gradient element to the input element that won the
/// corresponding pool window.
pub fn maxpool2d_backward(in_shape: &[usize], argmax: &[u32], dy: &Tensor) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("argmax has {} entries, upstream {}", argmax.len(), dy.len()),
        ));
    }
    let len: usize = in_shape.iter().product();
    let mut dx = vec![0.0f32; len];
    for (g, &idx) in dy.data().iter().zip(argmax) {
        dx[idx as usize] += g;
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Per-channel mean over all pixels; output `[1, 1, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let xd = x.data();
    let mut acc = vec![0.0f32; c];
    let mut comp = vec![0.0f32; c];
    for px in 0..h * w {
        for ci in 0..c {
            let y = xd[px * c + ci] - comp[ci];
            let t = acc[ci] + y;
            comp[ci] = (t - acc[ci]) - y;
            acc[ci] = t;
        }
    }
    let n = (h * w) as f32;
    for a in &mut acc {
        *a /= n;
    }
    Tensor::new(vec![1, 1, c], acc)
}

/// Gradient of `global_avg_pool`: spreads each channel gradient uniformly.
pub fn global_avg_pool_backward(in_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    if dy.shape() != [1, 1, c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("upstream shape {:?}, expected [1, 1, {c}]", dy.shape()),
        ));
    }
    let n = (h * w) as f32;
    let dyd = dy.data();
    let mut dx = vec![0.0f32; h * w * c];
    for px in 0..h * w {
        for ci in 0..c {
            dx[px * c + ci] = dyd[ci] / n;
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Fully connected layer on a `[1, 1, c]` vector: weights `[c, k]`, bias
/// `[k]`, output `[1, 1, k]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, wd, c) = x.dims3()?;
    if (h, wd) != (1, 1) {
        return Err(Error::shape(
            "dense",
            format!("input extent {h}x{wd}, expected 1x1"),
        ));
    }
    let (wc, k) = w.dims2()?;
    if wc != c {
        return Err(Error::shape(
            "dense",
            format!("weight rows {wc}, input has {c} channels"),
        ));
    }
    check_bias("dense", b, k)?;
    let mut out = b.data().to_vec();
    for (ci, &xv) in x.data().iter().enumerate() {
        axpy(&mut out, xv, &w.data()[ci * k..(ci + 1) * k]);
    }
    Tensor::new(vec![1, 1, k], out)
}

/// Gradient of `dense`.
pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, k) = w.dims2()?;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f32; c];
    let mut dw = vec![0.0f32; c * k];
    for ci in 0..c {
        let wrow = &w.data()[ci * k..(ci + 1) * k];
        let mut s = 0.0f32;
        for ki in 0..k {
            s += dyd[ki] * wrow[ki];
            dw[ci * k + ki] = xd[ci] * dyd[ki];
        }
        dx[ci] = s;
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c, k], dw)?,
        Tensor::new(vec![k], dyd.to_vec())?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("sigmoid preserves shape")
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("operand shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Multiplies every pixel of `x` by a per-channel gate `[1, 1, c]`.
#[allow(clippy::needless_range_loop)]
pub fn scale_channels(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if gate.shape() != [1, 1, c] {
        return Err(Error::shape(
            "scale_channels",
            format!("gate shape {:?}, expected [1, 1, {c}]", gate.shape()),
        ));
    }
    let gd = gate.data();
    let mut out = Vec::with_capacity(h * w * c);
    for px in 0..h * w {
        for ci in 0..c {
            out.push(x.data()[px * c + ci] * gd[ci]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Stacks same-extent feature maps along the channel axis.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::shape("concat_channels", "no inputs".to_string()));
    }
    let (h, w, _) = xs[0].dims3()?;
    let mut cs = Vec::with_capacity(xs.len());
    for x in xs {
        let (xh, xw, xc) = x.dims3()?;
        if (xh, xw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("extent {xh}x{xw} differs from {h}x{w}"),
            ));
        }
        cs.push(xc);
    }
    let c_total: usize = cs.iter().sum();
    let mut out = Vec::with_capacity(h * w * c_total);
    for px in 0..h * w {
        for (x, &xc) in xs.iter().zip(&cs) {
            out.extend_from_slice(&x.data()[px * xc..(px + 1) * xc]);
        }
    }
    Tensor::new(vec![h, w, c_total], out)
}

/// Splits an upstream gradient of a channel concat back into the parts.
pub fn concat_channels_backward(parts: &[usize], dy: &Tensor) -> Result<Vec<Tensor>> {
    let (h, w, c) = dy.dims3()?;
    let sum: usize = parts.iter().sum();
    if sum != c {
        return Err(Error::shape(
            "concat_channels_backward",
            format!("parts sum to {sum}, upstream has {c} channels"),
        ));
    }
    let dyd = dy.data();
    let mut outs: Vec<Vec<f32>> = parts
        .iter()
        .map(|&p| Vec::with_capacity(h * w * p))
        .collect();
    for px in 0..h * w {
        let mut off = 0;
        for (o, &p) in outs.iter_mut().zip(parts) {
            o.extend_from_slice(&dyd[px * c + off..px * c + off + p]);
            off += p;
        }
    }
    outs.into_iter()
        .zip(parts)
        .map(|(o, &p)| Tensor::new(vec![h, w, p], o))
        .collect()
}

/// Numerically stable per-pixel softmax over the channel axis (c >= 2).
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if c < 2 {
        return Err(Error::shape(
            "softmax_channels",
            format!("channel count {c}, need at least 2"),
        ));
    }
    let xd = x.data();
    let mut out = vec![0.0f32; h * w * c];
    for px in 0..h * w {
        let row = &xd[px * c..(px + 1) * c];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out[px * c..(px + 1) * c];
        let mut sum = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Gradient of `softmax_channels` given its own output `y`:
/// `dz = y * (dy - sum_c(dy * y))` per pixel.
pub fn softmax_channels_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (h, w, c) = y.dims3()?;
    let yd = y.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f32; h * w * c];
    for px in 0..h * w {
        let base = px * c;
        let mut dot = 0.0f32;
        for ci in 0..c {
            dot += dyd[base + ci] * yd[base + ci];
        }
        for ci in 0..c {
            dx[base + ci] = yd[base + ci] * (dyd[base + ci] - dot);
        }
    }
    Tensor::new(vec![h, w, c], dx)
}

pub const NLL_EPSILON: f32 = 1e-8;

/// Weighted mean over all pixels of `-weight[label] * ln(p[label] + eps)`.
pub fn weighted_nll_mean(probs: &Tensor, labels: &[u8], weights: &[f32]) -> Result<f32> {
    let (h, w, c) = probs.dims3()?;
    if labels.len() != h * w {
        return Err(Error::shape(
            "loss",
            format!("{} labels for {}x{} pixels", labels.len(), h, w),
        ));
    }
    if weights.len() != c {
        return Err(Error::shape(
            "loss",
            format!("{} class weights for {c} classes", weights.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::shape(
            "loss",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let pd = probs.data();
    let total = kahan_sum(labels.iter().enumerate().map(|(px, &l)| {
        let p = pd[px * c + l as usize];
        -weights[l as usize] * (p + NLL_EPSILON).ln()
    }));
    Ok(total / (h * w) as f32)
}

/// Gradient of `weighted_nll_mean` with respect to the probabilities.
pub fn weighted_nll_mean_backward(
    probs: &Tensor,
    labels: &[u8],
    weights: &[f32],
    upstream: f32,
) -> Result<Tensor> {
    let (h, w, c) = probs.dims3()?;
    let pd = probs.data();
    let n = (h * w) as f32;
    let mut dp = vec![0.0f32; h * w * c];
    for (px, &l) in labels.iter().enumerate() {
        let li = l as usize;
        let p = pd[px * c + li];
        dp[px * c + li] = -upstream * weights[li] / (n * (p + NLL_EPSILON));
    }
    Tensor::new(vec![h, w, c], dp)
}

/// Kahan-compensated sum of all elements; scalar output.
pub fn sum_all(x: &Tensor) -> f32 {
    kahan_sum(x.data().iter().copied())
}
