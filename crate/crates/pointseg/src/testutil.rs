//! Independent reference implementations and a finite-difference gradient
//! checker, shared by the unit and acceptance suites.
//!
//! Everything here is deliberately naive: plain nested loops with `f64`
//! accumulation, no code shared with the optimized kernels, so the two
//! paths can arbitrate each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvSpec, Padding, Tensor};

/// Deterministic pseudo-random tensor with entries uniform in `[-scale, scale]`.
pub fn seeded_tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("seeded_tensor: valid shape")
}

fn pad_begin(spec: &ConvSpec, h: usize, w: usize) -> (usize, usize) {
    match spec.padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let (ekh, ekw) = (
                (spec.kernel.0 - 1) * spec.dilation.0 + 1,
                (spec.kernel.1 - 1) * spec.dilation.1 + 1,
            );
            let oh = h.div_ceil(spec.stride.0);
            let ow = w.div_ceil(spec.stride.1);
            let th = ((oh - 1) * spec.stride.0 + ekh).saturating_sub(h);
            let tw = ((ow - 1) * spec.stride.1 + ekw).saturating_sub(w);
            (th / 2, tw / 2)
        }
    }
}

/// Naive convolution: nested loops, `f64` accumulation.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let (h, wd, cin) = x.dims3().unwrap();
    let (oh, ow) = spec.out_extent(h, wd).unwrap();
    let (ph, pw) = pad_begin(spec, h, wd);
    let cout = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let mut out = vec![0.0f32; oh * ow * cout];
    for oh_i in 0..oh {
        for ow_i in 0..ow {
            for co in 0..cout {
                let mut acc = b.data()[co] as f64;
                for kh_i in 0..kh {
                    let ih = (oh_i * spec.stride.0 + kh_i * spec.dilation.0) as isize
                        - ph as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for kw_i in 0..kw {
                        let iw = (ow_i * spec.stride.1 + kw_i * spec.dilation.1) as isize
                            - pw as isize;
                        if iw < 0 || iw as usize >= wd {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[(ih as usize * wd + iw as usize) * cin + ci];
                            let wv = w.data()[((kh_i * kw + kw_i) * cin + ci) * cout + co];
                            acc += xv as f64 * wv as f64;
                        }
                    }
                }
                out[(oh_i * ow + ow_i) * cout + co] = acc as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).unwrap()
}

/// Naive transposed convolution in scatter-add form: each input element is
/// multiplied by the kernel and added into the (strided) output window.
pub fn deconv2d_reference(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let (h, wd, _cin) = x.dims3().unwrap();
    let (vh, vw) = spec.deconv_out_extent(h, wd).unwrap();
    let (ph, pw) = pad_begin(spec, vh, vw);
    let (kh, kw) = spec.kernel;
    let ca = spec.out_channels;
    let cb = spec.in_channels;
    let mut out = vec![0.0f64; vh * vw * ca];
    for px in 0..vh * vw {
        for a in 0..ca {
            out[px * ca + a] = b.data()[a] as f64;
        }
    }
    for oh_i in 0..h {
        for ow_i in 0..wd {
            for kh_i in 0..kh {
                let ih = (oh_i * spec.stride.0 + kh_i * spec.dilation.0) as isize - ph as isize;
                if ih < 0 || ih as usize >= vh {
                    continue;
                }
                for kw_i in 0..kw {
                    let iw =
                        (ow_i * spec.stride.1 + kw_i * spec.dilation.1) as isize - pw as isize;
                    if iw < 0 || iw as usize >= vw {
                        continue;
                    }
                    for a in 0..ca {
                        for b_i in 0..cb {
                            let uv = x.data()[(oh_i * wd + ow_i) * cb + b_i];
                            let wv = w.data()[((kh_i * kw + kw_i) * ca + a) * cb + b_i];
                            out[(ih as usize * vw + iw as usize) * ca + a] +=
                                uv as f64 * wv as f64;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![vh, vw, ca], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Naive SAME max pooling.
pub fn maxpool2d_reference(x: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Tensor {
    let (h, w, c) = x.dims3().unwrap();
    let oh = h.div_ceil(stride.0);
    let ow = w.div_ceil(stride.1);
    let ph = ((oh - 1) * stride.0 + kernel.0).saturating_sub(h) / 2;
    let pw = ((ow - 1) * stride.1 + kernel.1).saturating_sub(w) / 2;
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    for oh_i in 0..oh {
        for ow_i in 0..ow {
            for ci in 0..c {
                let mut best = f32::NEG_INFINITY;
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
                        best = best.max(x.data()[(ih as usize * w + iw as usize) * c + ci]);
                    }
                }
                out[(oh_i * ow + ow_i) * c + ci] = best;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out).unwrap()
}

/// Naive per-channel mean with `f64` accumulation.
#[allow(clippy::needless_range_loop)]
pub fn global_avg_pool_reference(x: &Tensor) -> Tensor {
    let (h, w, c) = x.dims3().unwrap();
    let mut acc = vec![0.0f64; c];
    for px in 0..h * w {
        for ci in 0..c {
            acc[ci] += x.data()[px * c + ci] as f64;
        }
    }
    let n = (h * w) as f64;
    Tensor::new(
        vec![1, 1, c],
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )
    .unwrap()
}

/// Naive dense layer with `f64` accumulation.
#[allow(clippy::needless_range_loop)]
pub fn dense_reference(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let c = x.len();
    let (_, k) = w.dims2().unwrap();
    let mut out = vec![0.0f32; k];
    for ki in 0..k {
        let mut acc = b.data()[ki] as f64;
        for ci in 0..c {
            acc += x.data()[ci] as f64 * w.data()[ci * k + ki] as f64;
        }
        out[ki] = acc as f32;
    }
    Tensor::new(vec![1, 1, k], out).unwrap()
}

/// `f64` inner product of two same-length tensors.
pub fn inner(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len(), "inner: length mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Asserts two tensors agree within an absolute tolerance, reporting the
/// first offending element.
pub fn expect_close(actual: &Tensor, expect: &Tensor, tol: f32) -> Result<(), String> {
    if actual.shape() != expect.shape() {
        return Err(format!(
            "shape {:?} vs {:?}",
            actual.shape(),
            expect.shape()
        ));
    }
    for (i, (&a, &e)) in actual.data().iter().zip(expect.data()).enumerate() {
        if (a - e).abs() > tol {
            return Err(format!(
                "element {i}: {a} vs {e} (|diff| {} > {tol})",
                (a - e).abs()
            ));
        }
    }
    Ok(())
}

/// Central finite-difference gradient check.
///
/// `f` evaluates the scalar loss for a full set of input tensors; `analytic`
/// are the gradients under test, one per input. The step is fixed at 1e-3.
/// Bounds: relative error below 1e-2 per element and below 1e-3 on each
/// tensor's max-magnitude element, with an absolute floor that accounts for
/// the 32-bit noise of the difference quotient (eps * |f| / step, widened by
/// a safety factor); without the floor, near-zero gradients would be judged
/// against pure round-off.
pub struct GradCheck {
    pub step: f32,
    pub rtol: f32,
    pub rtol_max: f32,
    pub safety: f32,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            rtol: 1e-2,
            rtol_max: 1e-3,
            safety: 8.0,
        }
    }
}

impl GradCheck {
    pub fn run(
        &self,
        f: impl FnMut(&[Tensor]) -> f32,
        inputs: &[Tensor],
        analytic: &[Tensor],
    ) -> Result<(), String> {
        let index_sets: Vec<Vec<usize>> =
            inputs.iter().map(|t| (0..t.len()).collect()).collect();
        self.run_on_indices(f, inputs, analytic, &index_sets)
    }

    /// Checks a seeded subset of elements per tensor instead of all of them.
    ///
    /// The subset always includes each tensor's max-|gradient| element, so a
    /// sign or scale bug in the dominant direction cannot hide behind the
    /// sampling. Intended for large models where a full sweep would take
    /// hours.
    pub fn run_sampled(
        &self,
        f: impl FnMut(&[Tensor]) -> f32,
        inputs: &[Tensor],
        analytic: &[Tensor],
        per_tensor: usize,
        seed: u64,
    ) -> Result<(), String> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let index_sets: Vec<Vec<usize>> = inputs
            .iter()
            .zip(analytic)
            .map(|(t, g)| {
                let count = per_tensor.min(t.len());
                let mut picks: Vec<usize> =
                    rand::seq::index::sample(&mut rng, t.len(), count).into_vec();
                picks.push(max_abs_index(g));
                picks.sort_unstable();
                picks.dedup();
                picks
            })
            .collect();
        self.run_on_indices(f, inputs, analytic, &index_sets)
    }

    fn run_on_indices(
        &self,
        mut f: impl FnMut(&[Tensor]) -> f32,
        inputs: &[Tensor],
        analytic: &[Tensor],
        index_sets: &[Vec<usize>],
    ) -> Result<(), String> {
        assert_eq!(inputs.len(), analytic.len());
        assert_eq!(inputs.len(), index_sets.len());
        let f0 = f(inputs);
        if !f0.is_finite() {
            return Err(format!("loss is not finite: {f0}"));
        }
        let atol = (f0.abs().max(1.0) * f32::EPSILON / self.step) * self.safety + 1e-9;

        for (ti, (input, grad)) in inputs.iter().zip(analytic).enumerate() {
            assert_eq!(
                input.shape(),
                grad.shape(),
                "gradient shape mismatch on input {ti}"
            );
            let gmax_idx = max_abs_index(grad);
            for &j in &index_sets[ti] {
                let mut plus = input.data().to_vec();
                let mut minus = plus.clone();
                plus[j] += self.step;
                minus[j] -= self.step;
                let mut set = inputs.to_vec();
                set[ti] = Tensor::new(input.shape().to_vec(), plus).unwrap();
                let fp = f(&set);
                set[ti] = Tensor::new(input.shape().to_vec(), minus).unwrap();
                let fm = f(&set);
                let fd = (fp - fm) / (2.0 * self.step);
                let a = grad.data()[j];
                let rtol = if j == gmax_idx { self.rtol_max } else { self.rtol };
                let bound = (rtol * a.abs().max(fd.abs())).max(atol);
                if (a - fd).abs() > bound {
                    return Err(format!(
                        "input {ti} element {j}: analytic {a:.6e} vs fd {fd:.6e} \
                         (|diff| {:.3e} > bound {:.3e}, f0 {f0:.6})",
                        (a - fd).abs(),
                        bound
                    ));
                }
            }
        }
        Ok(())
    }
}

fn max_abs_index(t: &Tensor) -> usize {
    t.data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;
    use crate::tensor::tape::Tape;

    #[test]
    fn impl_conv_matches_reference_on_pinned_case() {
        let x = Tensor::filled(vec![4, 4, 1], 1.0);
        let w = Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let spec = ConvSpec::k3x3(1, 1);
        let fast = kernels::conv2d(&x, &w, &b, &spec).unwrap();
        let slow = conv2d_reference(&x, &w, &b, &spec);
        expect_close(&fast, &slow, 1e-6).unwrap();
    }

    #[test]
    fn gradcheck_catches_wrong_gradient() {
        let x = Tensor::new(vec![1, 1, 3], vec![0.7, -0.4, 0.9]).unwrap();
        let f = |inputs: &[Tensor]| kernels::sum_all(&kernels::relu(&inputs[0]));
        let mut wrong = x.data().to_vec();
        for v in &mut wrong {
            *v = if *v > 0.0 { 2.0 } else { 0.0 }; // scale bug
        }
        let bad = Tensor::new(x.shape().to_vec(), wrong).unwrap();
        assert!(GradCheck::default().run(f, &[x], &[bad]).is_err());
    }

    #[test]
    fn gradcheck_passes_correct_conv_gradient() {
        let spec = ConvSpec::k3x3(2, 3).with_stride((1, 2));
        let x = seeded_tensor(&[4, 6, 2], 11, 1.0);
        let w = seeded_tensor(&spec.weight_shape(), 12, 0.5);
        let b = seeded_tensor(&[3], 13, 0.5);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (
            tape.leaf(x.clone()),
            tape.leaf(w.clone()),
            tape.leaf(b.clone()),
        );
        let y = tape.conv2d(xi, wi, bi, &spec).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        let analytic = [
            grads.wrt(&tape, xi),
            grads.wrt(&tape, wi),
            grads.wrt(&tape, bi),
        ];
        let f = |inp: &[Tensor]| {
            kernels::sum_all(&kernels::conv2d(&inp[0], &inp[1], &inp[2], &spec).unwrap())
        };
        GradCheck::default()
            .run(f, &[x, w, b], &analytic)
            .unwrap();
    }
}
