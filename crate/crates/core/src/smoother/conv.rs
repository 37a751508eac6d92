//! Dense 3D cross-correlation over (time, vertex, coordinate) volumes.
//!
//! Volumes are stored channel-major with the vertex axis innermost, so every
//! kernel tap is a contiguous multiply-add over a row of vertices; unit
//! stride passes update up to eight output channels per load. The
//! public [`Volume`] accessors speak in `(channel, t, n, k)` coordinates and
//! hide that layout.

use crate::error::{Error, Result};

/// A multi-channel `T x N x K` volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    t: usize,
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        let [t, n, k] = dims;
        Self {
            channels,
            t,
            n,
            k,
            data: vec![0.0; channels * t * n * k],
        }
    }

    pub fn from_fn(
        channels: usize,
        dims: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut v = Self::zeros(channels, dims);
        for c in 0..channels {
            for t in 0..dims[0] {
                for n in 0..dims[1] {
                    for k in 0..dims[2] {
                        let i = v.index(c, t, n, k);
                        v.data[i] = f(c, t, n, k);
                    }
                }
            }
        }
        v
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial dims `[T, N, K]`.
    pub fn dims(&self) -> [usize; 3] {
        [self.t, self.n, self.k]
    }

    #[inline]
    fn index(&self, c: usize, t: usize, n: usize, k: usize) -> usize {
        ((c * self.t + t) * self.k + k) * self.n + n
    }

    pub fn get(&self, c: usize, t: usize, n: usize, k: usize) -> f64 {
        self.data[self.index(c, t, n, k)]
    }

    pub fn set(&mut self, c: usize, t: usize, n: usize, k: usize, value: f64) {
        let i = self.index(c, t, n, k);
        self.data[i] = value;
    }

    #[inline]
    pub(crate) fn row(&self, c: usize, t: usize, k: usize) -> &[f64] {
        let start = self.index(c, t, 0, k);
        &self.data[start..start + self.n]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, c: usize, t: usize, k: usize) -> &mut [f64] {
        let start = self.index(c, t, 0, k);
        let n = self.n;
        &mut self.data[start..start + n]
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Convolution weights, `c_out x c_in x kt x kn x kk`, plus one bias per
/// output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub c_in: usize,
    pub c_out: usize,
    pub size: [usize; 3],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Kernel {
    pub fn zeros(c_in: usize, c_out: usize, size: [usize; 3]) -> Self {
        Self {
            c_in,
            c_out,
            size,
            weights: vec![0.0; c_out * c_in * size[0] * size[1] * size[2]],
            bias: vec![0.0; c_out],
        }
    }

    #[inline]
    pub fn weight_index(&self, co: usize, ci: usize, dt: usize, dn: usize, dk: usize) -> usize {
        let [kt, kn, kk] = self.size;
        (((co * self.c_in + ci) * kt + dt) * kn + dn) * kk + dk
    }

    pub fn weight(&self, co: usize, ci: usize, dt: usize, dn: usize, dk: usize) -> f64 {
        self.weights[self.weight_index(co, ci, dt, dn, dk)]
    }

    /// Kernel whose only nonzero tap is the center of channel 0 -> 0.
    pub fn identity(size: [usize; 3]) -> Self {
        let mut k = Self::zeros(1, 1, size);
        let i = k.weight_index(0, 0, size[0] / 2, size[1] / 2, size[2] / 2);
        k.weights[i] = 1.0;
        k
    }
}

/// Output extent per axis: `(in + 2 * pad - kernel) / stride + 1`.
pub fn output_dims(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for axis in 0..3 {
        if stride[axis] == 0 {
            return Err(Error::invalid(format!("stride on axis {axis} is zero")));
        }
        if kernel[axis] == 0 {
            return Err(Error::invalid(format!("kernel extent on axis {axis} is zero")));
        }
        let padded = input[axis] + 2 * padding[axis];
        if kernel[axis] > padded {
            return Err(Error::dim(format!(
                "kernel extent {} exceeds padded input extent {} on axis {axis}",
                kernel[axis], padded
            )));
        }
        out[axis] = (padded - kernel[axis]) / stride[axis] + 1;
    }
    Ok(out)
}

/// Cross-correlation with zero padding.
pub fn conv3d(
    input: &Volume,
    kernel: &Kernel,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Volume> {
    if input.channels != kernel.c_in {
        return Err(Error::dim(format!(
            "input has {} channels, kernel expects {}",
            input.channels, kernel.c_in
        )));
    }
    let out_dims = output_dims(input.dims(), kernel.size, stride, padding)?;
    if stride == [1, 1, 1] {
        Ok(forward_unit_stride(input, kernel, padding, out_dims))
    } else {
        Ok(forward_strided(input, kernel, stride, padding, out_dims))
    }
}

#[inline]
fn shifted(out_index: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (out_index + tap).checked_sub(pad)?;
    (i < extent).then_some(i)
}

/// Output index range `[lo, hi)` along the vertex axis for which
/// `n + dn - pad` stays inside the input, for unit stride.
#[inline]
fn vertex_span(dn: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize, isize) {
    let shift = dn as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((n_in as isize - shift).max(0) as usize).min(n_out);
    (lo, hi.max(lo), shift)
}

/// Output channels handled per pass of the inner kernels.
const BLOCK: usize = 8;

/// Whether the running CPU has 256-bit fused multiply-add.
fn wide_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        use std::sync::OnceLock;
        static DETECTED: OnceLock<bool> = OnceLock::new();
        *DETECTED.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `out[c][j] += sum_i w_i[c] * row_i[j]` for `C` output rows at once.
#[inline(always)]
fn taps_body<const C: usize, const FMA: bool>(out: &mut [&mut [f64]], taps: &[([f64; C], &[f64])]) {
    let n = out[0].len();
    let chunks = n / 4;
    for ch in 0..chunks {
        let j = 4 * ch;
        let mut acc = [[0.0f64; 4]; C];
        for (w, row) in taps {
            let x: &[f64; 4] = row[j..j + 4].try_into().expect("chunk of four");
            for c in 0..C {
                for l in 0..4 {
                    acc[c][l] = madd::<FMA>(w[c], x[l], acc[c][l]);
                }
            }
        }
        for c in 0..C {
            for l in 0..4 {
                out[c][j + l] += acc[c][l];
            }
        }
    }
    for j in chunks * 4..n {
        for c in 0..C {
            let mut a = 0.0;
            for (w, row) in taps {
                a = madd::<FMA>(w[c], row[j], a);
            }
            out[c][j] += a;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn taps_wide<const C: usize>(out: &mut [&mut [f64]], taps: &[([f64; C], &[f64])]) {
    use std::arch::x86_64::*;
    let n = out[0].len();
    let chunks = n / 4;
    for ch in 0..chunks {
        let j = 4 * ch;
        let mut acc = [_mm256_setzero_pd(); C];
        for (w, row) in taps {
            assert!(row.len() >= j + 4);
            let x = _mm256_loadu_pd(row.as_ptr().add(j));
            for c in 0..C {
                acc[c] = _mm256_fmadd_pd(_mm256_set1_pd(w[c]), x, acc[c]);
            }
        }
        for c in 0..C {
            let dst = &mut out[c][j..j + 4];
            let sum = _mm256_add_pd(_mm256_loadu_pd(dst.as_ptr()), acc[c]);
            _mm256_storeu_pd(dst.as_mut_ptr(), sum);
        }
    }
    if chunks * 4 == n {
        return;
    }
    let mut tail: Vec<&mut [f64]> = out.iter_mut().map(|o| &mut o[chunks * 4..]).collect();
    let tail_taps: Vec<([f64; C], &[f64])> = taps.iter().map(|(w, r)| (*w, &r[chunks * 4..])).collect();
    taps_body::<C, true>(&mut tail, &tail_taps);
}

fn apply_taps<const C: usize>(out: &mut [&mut [f64]], taps: &[([f64; C], &[f64])]) {
    #[cfg(target_arch = "x86_64")]
    if wide_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { taps_wide::<C>(out, taps) };
    }
    taps_body::<C, false>(out, taps)
}

/// `grads[i][c] += <g[c], row_i>` for `C` gradient rows at once.
#[inline(always)]
fn dots_body<const C: usize, const FMA: bool>(g: &[&[f64]], taps: &[&[f64]], grads: &mut [[f64; C]]) {
    let n = g[0].len();
    let chunks = n / 4;
    for (row, out) in taps.iter().zip(grads.iter_mut()) {
        let mut acc = [[0.0f64; 4]; C];
        for ch in 0..chunks {
            let j = 4 * ch;
            let x: &[f64; 4] = row[j..j + 4].try_into().expect("chunk of four");
            for c in 0..C {
                let gc: &[f64; 4] = g[c][j..j + 4].try_into().expect("chunk of four");
                for l in 0..4 {
                    acc[c][l] = madd::<FMA>(gc[l], x[l], acc[c][l]);
                }
            }
        }
        for c in 0..C {
            let mut s = (acc[c][0] + acc[c][1]) + (acc[c][2] + acc[c][3]);
            for j in chunks * 4..n {
                s = madd::<FMA>(g[c][j], row[j], s);
            }
            out[c] += s;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dots_wide<const C: usize>(g: &[&[f64]], taps: &[&[f64]], grads: &mut [[f64; C]]) {
    use std::arch::x86_64::*;
    let n = g[0].len();
    let chunks = n / 4;
    assert!(g.iter().all(|r| r.len() == n) && taps.iter().all(|r| r.len() >= n));
    for (row, out) in taps.iter().zip(grads.iter_mut()) {
        let mut acc = [_mm256_setzero_pd(); C];
        for ch in 0..chunks {
            let j = 4 * ch;
            let x = _mm256_loadu_pd(row.as_ptr().add(j));
            for c in 0..C {
                acc[c] = _mm256_fmadd_pd(_mm256_loadu_pd(g[c].as_ptr().add(j)), x, acc[c]);
            }
        }
        for c in 0..C {
            let mut lanes = [0.0; 4];
            _mm256_storeu_pd(lanes.as_mut_ptr(), acc[c]);
            let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
            for j in chunks * 4..n {
                s = g[c][j].mul_add(row[j], s);
            }
            out[c] += s;
        }
    }
}

fn apply_dots<const C: usize>(g: &[&[f64]], taps: &[&[f64]], grads: &mut [[f64; C]]) {
    #[cfg(target_arch = "x86_64")]
    if wide_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { dots_wide::<C>(g, taps, grads) };
    }
    dots_body::<C, false>(g, taps, grads)
}

/// Valid input rows for output row `(to, ko)` and vertex tap `dn`, in the
/// kernel's `(ci, dt, dk)` order, with their flat tap index.
fn tap_rows<'a>(
    input: &'a Volume,
    size: [usize; 3],
    padding: [usize; 3],
    to: usize,
    ko: usize,
    dn: usize,
    src: (usize, usize),
    rows: &mut Vec<(usize, &'a [f64])>,
) {
    let [kt, kn, kk] = size;
    rows.clear();
    for ci in 0..input.channels {
        for dt in 0..kt {
            let Some(ti) = shifted(to, dt, padding[0], input.t) else {
                continue;
            };
            for dk in 0..kk {
                let Some(ki) = shifted(ko, dk, padding[2], input.k) else {
                    continue;
                };
                let tap = ((ci * kt + dt) * kn + dn) * kk + dk;
                rows.push((tap, &input.row(ci, ti, ki)[src.0..src.1]));
            }
        }
    }
}

/// Output-channel blocks `[co0, co0 + width)` covering `0..c_out`.
fn blocks(c_out: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut co0 = 0;
    std::iter::from_fn(move || {
        let rest = c_out - co0;
        if rest == 0 {
            return None;
        }
        let width = [BLOCK, 4, 2, 1].into_iter().find(|&w| w <= rest).expect("width 1 fits");
        co0 += width;
        Some((co0 - width, width))
    })
}

fn forward_block<const C: usize>(input: &Volume, kernel: &Kernel, padding: [usize; 3], co0: usize, out: &mut Volume) {
    let [t_out, n_out, k_out] = out.dims();
    let per_channel = t_out * k_out * n_out;
    let per_co = kernel.weights.len() / kernel.c_out;
    let mut rows = Vec::new();
    let mut taps: Vec<([f64; C], &[f64])> = Vec::new();
    for to in 0..t_out {
        for ko in 0..k_out {
            for dn in 0..kernel.size[1] {
                let (lo, hi, s) = vertex_span(dn, padding[1], input.n, n_out);
                if lo == hi {
                    continue;
                }
                let src = ((lo as isize + s) as usize, (hi as isize + s) as usize);
                tap_rows(input, kernel.size, padding, to, ko, dn, src, &mut rows);
                taps.clear();
                for &(tap, row) in &rows {
                    let w: [f64; C] = std::array::from_fn(|c| kernel.weights[(co0 + c) * per_co + tap]);
                    if w.iter().any(|&x| x != 0.0) {
                        taps.push((w, row));
                    }
                }
                let start = (to * k_out + ko) * n_out;
                let mut outs: Vec<&mut [f64]> = out.data[co0 * per_channel..(co0 + C) * per_channel]
                    .chunks_exact_mut(per_channel)
                    .map(|ch| &mut ch[start + lo..start + hi])
                    .collect();
                apply_taps::<C>(&mut outs, &taps);
            }
        }
    }
}

fn forward_unit_stride(input: &Volume, kernel: &Kernel, padding: [usize; 3], out_dims: [usize; 3]) -> Volume {
    let mut out = Volume::zeros(kernel.c_out, out_dims);
    let per_channel = out_dims.iter().product::<usize>();
    if per_channel == 0 {
        return out;
    }
    for (row, &b) in out.data.chunks_exact_mut(per_channel).zip(&kernel.bias) {
        row.fill(b);
    }
    for (co0, width) in blocks(kernel.c_out) {
        match width {
            8 => forward_block::<8>(input, kernel, padding, co0, &mut out),
            4 => forward_block::<4>(input, kernel, padding, co0, &mut out),
            2 => forward_block::<2>(input, kernel, padding, co0, &mut out),
            _ => forward_block::<1>(input, kernel, padding, co0, &mut out),
        }
    }
    out
}

fn forward_strided(
    input: &Volume,
    kernel: &Kernel,
    stride: [usize; 3],
    padding: [usize; 3],
    out_dims: [usize; 3],
) -> Volume {
    let [kt, kn, kk] = kernel.size;
    let mut out = Volume::zeros(kernel.c_out, out_dims);
    for co in 0..kernel.c_out {
        for to in 0..out_dims[0] {
            for no in 0..out_dims[1] {
                for ko in 0..out_dims[2] {
                    let mut acc = kernel.bias[co];
                    for ci in 0..kernel.c_in {
                        for dt in 0..kt {
                            let Some(ti) = shifted(to * stride[0], dt, padding[0], input.t) else {
                                continue;
                            };
                            for dn in 0..kn {
                                let Some(ni) = shifted(no * stride[1], dn, padding[1], input.n)
                                else {
                                    continue;
                                };
                                for dk in 0..kk {
                                    let Some(ki) =
                                        shifted(ko * stride[2], dk, padding[2], input.k)
                                    else {
                                        continue;
                                    };
                                    acc += kernel.weight(co, ci, dt, dn, dk)
                                        * input.get(ci, ti, ni, ki);
                                }
                            }
                        }
                    }
                    out.set(co, to, no, ko, acc);
                }
            }
        }
    }
    out
}

/// Gradients of a unit-stride [`conv3d`] with respect to its input, weights
/// and bias, given the gradient of the output.
pub struct ConvGrads {
    pub input: Volume,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn weight_grad_block<const C: usize>(
    input: &Volume,
    kernel: &Kernel,
    padding: [usize; 3],
    grad_out: &Volume,
    co0: usize,
    grad_w: &mut [f64],
) {
    let [t_out, n_out, k_out] = grad_out.dims();
    let per_co = kernel.weights.len() / kernel.c_out;
    let mut rows = Vec::new();
    let mut slices: Vec<&[f64]> = Vec::new();
    let mut sums: Vec<[f64; C]> = Vec::new();
    let mut acc = vec![[0.0; C]; per_co];
    for to in 0..t_out {
        for ko in 0..k_out {
            for dn in 0..kernel.size[1] {
                let (lo, hi, s) = vertex_span(dn, padding[1], input.n, n_out);
                if lo == hi {
                    continue;
                }
                let src = ((lo as isize + s) as usize, (hi as isize + s) as usize);
                tap_rows(input, kernel.size, padding, to, ko, dn, src, &mut rows);
                let g: [&[f64]; C] = std::array::from_fn(|c| &grad_out.row(co0 + c, to, ko)[lo..hi]);
                slices.clear();
                slices.extend(rows.iter().map(|r| r.1));
                sums.clear();
                sums.resize(rows.len(), [0.0; C]);
                apply_dots::<C>(&g, &slices, &mut sums);
                for (&(tap, _), s) in rows.iter().zip(&sums) {
                    for c in 0..C {
                        acc[tap][c] += s[c];
                    }
                }
            }
        }
    }
    for (tap, a) in acc.iter().enumerate() {
        for c in 0..C {
            grad_w[(co0 + c) * per_co + tap] += a[c];
        }
    }
}

pub(crate) fn conv3d_backward(
    input: &Volume,
    kernel: &Kernel,
    padding: [usize; 3],
    grad_out: &Volume,
    need_input_grad: bool,
) -> ConvGrads {
    let [kt, kn, kk] = kernel.size;
    let [pt, pn, pk] = padding;
    let per_channel = grad_out.dims().iter().product::<usize>();
    let mut grad_w = vec![0.0; kernel.weights.len()];
    let grad_b: Vec<f64> = if per_channel == 0 {
        vec![0.0; kernel.c_out]
    } else {
        grad_out.data.chunks_exact(per_channel).map(|r| r.iter().sum()).collect()
    };
    for (co0, width) in blocks(kernel.c_out) {
        match width {
            8 => weight_grad_block::<8>(input, kernel, padding, grad_out, co0, &mut grad_w),
            4 => weight_grad_block::<4>(input, kernel, padding, grad_out, co0, &mut grad_w),
            2 => weight_grad_block::<2>(input, kernel, padding, grad_out, co0, &mut grad_w),
            _ => weight_grad_block::<1>(input, kernel, padding, grad_out, co0, &mut grad_w),
        }
    }
    let grad_in = if !need_input_grad {
        Volume::zeros(0, input.dims())
    } else if (0..3).all(|a| padding[a] < kernel.size[a]) {
        // Input gradient is a unit-stride correlation of the output gradient
        // with the flipped, channel-transposed kernel.
        let mut flipped = Kernel::zeros(kernel.c_out, kernel.c_in, kernel.size);
        for co in 0..kernel.c_out {
            for ci in 0..kernel.c_in {
                for dt in 0..kt {
                    for dn in 0..kn {
                        for dk in 0..kk {
                            let i = flipped.weight_index(ci, co, kt - 1 - dt, kn - 1 - dn, kk - 1 - dk);
                            flipped.weights[i] = kernel.weight(co, ci, dt, dn, dk);
                        }
                    }
                }
            }
        }
        let pad = [kt - 1 - pt, kn - 1 - pn, kk - 1 - pk];
        forward_unit_stride(grad_out, &flipped, pad, input.dims())
    } else {
        scatter_input_grad(input, kernel, padding, grad_out)
    };
    ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    }
}

fn scatter_input_grad(input: &Volume, kernel: &Kernel, padding: [usize; 3], grad_out: &Volume) -> Volume {
    let [t_out, n_out, k_out] = grad_out.dims();
    let [kt, kn, kk] = kernel.size;
    let [pt, pn, pk] = padding;
    let mut grad_in = Volume::zeros(input.channels, input.dims());
    for co in 0..kernel.c_out {
        for to in 0..t_out {
            for ko in 0..k_out {
                let g = grad_out.row(co, to, ko);
                for ci in 0..kernel.c_in {
                    for dt in 0..kt {
                        let Some(ti) = shifted(to, dt, pt, input.t) else {
                            continue;
                        };
                        for dk in 0..kk {
                            let Some(ki) = shifted(ko, dk, pk, input.k) else {
                                continue;
                            };
                            for dn in 0..kn {
                                let (lo, hi, s) = vertex_span(dn, pn, input.n, n_out);
                                let w = kernel.weight(co, ci, dt, dn, dk);
                                let dst = &mut grad_in.row_mut(ci, ti, ki)
                                    [(lo as isize + s) as usize..(hi as isize + s) as usize];
                                for (a, &gv) in dst.iter_mut().zip(&g[lo..hi]) {
                                    *a += w * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}
