//! Convolution, linear, and pooling kernels.
//!
//! Every kernel accumulates contributions to an output element in input-index
//! order (`c_in`, then `kh`, then `kw`), which makes results on integer-valued
//! spike inputs bit-identical to a naive dense evaluation in the same order.
//! For a spike input the product `x * w` is just `w` (or `k * w` on residual
//! edges), so the work is accumulate-only; the profiler charges it as such.

use crate::energy::{Charge, LayerKind, Observation, Profiler};
use crate::error::{Error, Result};
use crate::tensor::{Layout, SpikeTensor, Tensor};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::shape("kernel and stride must be positive"));
        }
        if self.h + 2 * self.pad < self.kernel || self.w + 2 * self.pad < self.kernel {
            return Err(Error::shape(format!(
                "{k}x{k} kernel does not fit a {}x{} input with padding {}",
                self.h,
                self.w,
                self.pad,
                k = self.kernel
            )));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    /// Multiply-accumulates per sample per timestep: `k^2 C_in C_out H_out W_out`.
    pub fn macs(&self) -> u64 {
        (self.kernel * self.kernel * self.c_in * self.c_out * self.out_h() * self.out_w()) as u64
    }

    /// Valid output index range `[lo, hi)` along one axis for kernel tap `k`.
    #[inline]
    fn out_range(&self, tap: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // Input index is o * stride + tap - pad; it must land in [0, in_len).
        let s = self.stride;
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(s)
        } else {
            0
        };
        let limit = in_len + self.pad; // o * s + tap < in_len + pad
        let hi = if limit > tap {
            ((limit - tap - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// For each input position along an axis, how many output positions read it.
    fn fanout(&self, in_len: usize, out_len: usize) -> Vec<u64> {
        let mut counts = vec![0u64; in_len];
        for tap in 0..self.kernel {
            let (lo, hi) = self.out_range(tap, in_len, out_len);
            for o in lo..hi {
                counts[o * self.stride + tap - self.pad] += 1;
            }
        }
        counts
    }
}

/// `x: [n, c_in, h, w]`, `weight: [c_out, c_in, k, k]` into `out: [n, c_out, oh, ow]`.
pub(crate) fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, weight: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let in_plane = g.h * g.w;
    let out_plane = oh * ow;
    let mut out = vec![0.0; n * g.c_out * out_plane];
    let row_ranges: Vec<_> = (0..k).map(|t| g.out_range(t, g.h, oh)).collect();
    let col_ranges: Vec<_> = (0..k).map(|t| g.out_range(t, g.w, ow)).collect();
    for b in 0..n {
        for co in 0..g.c_out {
            let dst = &mut out[(b * g.c_out + co) * out_plane..][..out_plane];
            for ci in 0..g.c_in {
                let src = &x[(b * g.c_in + ci) * in_plane..][..in_plane];
                let wbase = (co * g.c_in + ci) * k * k;
                for kh in 0..k {
                    let (r0, r1) = row_ranges[kh];
                    for kw in 0..k {
                        let wv = weight[wbase + kh * k + kw];
                        let (c0, c1) = col_ranges[kw];
                        if c0 >= c1 {
                            continue;
                        }
                        for o_r in r0..r1 {
                            let ih = o_r * g.stride + kh - g.pad;
                            let src_row = &src[ih * g.w..][..g.w];
                            let dst_row = &mut dst[o_r * ow..][..ow];
                            if g.stride == 1 {
                                let i0 = c0 + kw - g.pad;
                                for (d, s) in dst_row[c0..c1].iter_mut().zip(&src_row[i0..]) {
                                    *d += s * wv;
                                }
                            } else {
                                for o_c in c0..c1 {
                                    dst_row[o_c] += src_row[o_c * g.stride + kw - g.pad] * wv;
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

/// Gradient with respect to the convolution input.
pub(crate) fn conv2d_backward_input(grad: &[f64], n: usize, g: &ConvGeom, weight: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let in_plane = g.h * g.w;
    let out_plane = oh * ow;
    let mut dx = vec![0.0; n * g.c_in * in_plane];
    let row_ranges: Vec<_> = (0..k).map(|t| g.out_range(t, g.h, oh)).collect();
    let col_ranges: Vec<_> = (0..k).map(|t| g.out_range(t, g.w, ow)).collect();
    for b in 0..n {
        for ci in 0..g.c_in {
            let dst = &mut dx[(b * g.c_in + ci) * in_plane..][..in_plane];
            for co in 0..g.c_out {
                let src = &grad[(b * g.c_out + co) * out_plane..][..out_plane];
                let wbase = (co * g.c_in + ci) * k * k;
                for kh in 0..k {
                    let (r0, r1) = row_ranges[kh];
                    for kw in 0..k {
                        let wv = weight[wbase + kh * k + kw];
                        let (c0, c1) = col_ranges[kw];
                        for o_r in r0..r1 {
                            let ih = o_r * g.stride + kh - g.pad;
                            let g_row = &src[o_r * ow..][..ow];
                            let d_row = &mut dst[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let i0 = c0 + kw - g.pad;
                                for (d, s) in d_row[i0..].iter_mut().zip(&g_row[c0..c1]) {
                                    *d += s * wv;
                                }
                            } else {
                                for o_c in c0..c1 {
                                    d_row[o_c * g.stride + kw - g.pad] += g_row[o_c] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient with respect to the convolution weight.
pub(crate) fn conv2d_backward_weight(grad: &[f64], x: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let in_plane = g.h * g.w;
    let out_plane = oh * ow;
    let mut dw = vec![0.0; g.weight_len()];
    let row_ranges: Vec<_> = (0..k).map(|t| g.out_range(t, g.h, oh)).collect();
    let col_ranges: Vec<_> = (0..k).map(|t| g.out_range(t, g.w, ow)).collect();
    for b in 0..n {
        for co in 0..g.c_out {
            let gp = &grad[(b * g.c_out + co) * out_plane..][..out_plane];
            for ci in 0..g.c_in {
                let src = &x[(b * g.c_in + ci) * in_plane..][..in_plane];
                let wbase = (co * g.c_in + ci) * k * k;
                for kh in 0..k {
                    let (r0, r1) = row_ranges[kh];
                    for kw in 0..k {
                        let (c0, c1) = col_ranges[kw];
                        let mut acc = 0.0;
                        for o_r in r0..r1 {
                            let ih = o_r * g.stride + kh - g.pad;
                            let s_row = &src[ih * g.w..][..g.w];
                            let g_row = &gp[o_r * ow..][..ow];
                            if g.stride == 1 {
                                let i0 = c0 + kw - g.pad;
                                acc += g_row[c0..c1]
                                    .iter()
                                    .zip(&s_row[i0..])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for o_c in c0..c1 {
                                    acc += g_row[o_c] * s_row[o_c * g.stride + kw - g.pad];
                                }
                            }
                        }
                        dw[wbase + kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Realized synaptic operations: every input element of value `v` triggers
/// `v` accumulates at each of its output fan-out positions.
pub(crate) fn conv_realized_sops(x: &[f64], n: usize, g: &ConvGeom) -> f64 {
    let rows = g.fanout(g.h, g.out_h());
    let cols = g.fanout(g.w, g.out_w());
    let plane = g.h * g.w;
    let mut total = 0.0;
    for b in 0..n {
        for ci in 0..g.c_in {
            let src = &x[(b * g.c_in + ci) * plane..][..plane];
            for ih in 0..g.h {
                for iw in 0..g.w {
                    let v = src[ih * g.w + iw];
                    if v != 0.0 {
                        total += v * (rows[ih] * cols[iw]) as f64;
                    }
                }
            }
        }
    }
    total * g.c_out as f64
}

/// 2x2 / stride-2 max pooling over `[n, c, h, w]` planes. Windows that hang
/// over an odd edge are clipped. Returns the pooled values and the flat input
/// index of each selected maximum (first maximum wins ties).
pub(crate) fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for r in 0..oh {
            for c in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (ir, ic) = (2 * r + dr, 2 * c + dc);
                        if ir < h && ic < w {
                            let i = base + ir * w + ic;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                }
                let o = (p * oh + r) * ow + c;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

fn observe_input(data: &[f64]) -> (f64, bool) {
    let mut sum = 0.0;
    let mut integer = true;
    for &v in data {
        sum += v;
        integer &= v >= 0.0 && v.fract() == 0.0;
    }
    (sum, integer)
}

/// Records a convolution's static and realized cost with the profiler.
pub(crate) fn profile_conv(
    profiler: &mut Profiler,
    path: &str,
    x: &[f64],
    timesteps: usize,
    batch: usize,
    g: &ConvGeom,
) {
    let (spikes, integer) = observe_input(x);
    let realized = if integer {
        conv_realized_sops(x, timesteps * batch, g)
    } else {
        0.0
    };
    profiler.record(Observation {
        path,
        kind: LayerKind::Conv,
        charge: if integer { Charge::Ac } else { Charge::Mac },
        flops_per_step: g.macs(),
        timesteps,
        samples: batch,
        spikes,
        elements: x.len() as u64,
        realized_sops: realized,
    });
}

/// Linear map of a token-form spike tensor: `x [T,B,N,D_in] @ weight [D_in, D_out] (+ bias)`.
///
/// Each nonzero input adds its weight row into the output row, scaled by the
/// spike count on residual edges. The bias is added last.
pub fn spike_linear(
    x: &SpikeTensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    profiler: Option<(&mut Profiler, &str)>,
) -> Result<Tensor> {
    if x.layout() != Layout::Token {
        return Err(Error::shape("spike_linear needs a token-form input"));
    }
    let &[t, b, n, d_in] = x.shape() else {
        unreachable!()
    };
    let &[w_in, d_out] = weight.shape() else {
        return Err(Error::shape(format!(
            "linear weight must be rank 2, got {:?}",
            weight.shape()
        )));
    };
    if w_in != d_in {
        return Err(Error::shape(format!(
            "input has {d_in} features but weight expects {w_in}"
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != d_out {
            return Err(Error::shape(format!(
                "bias has {} entries, expected {d_out}",
                bias.len()
            )));
        }
    }
    let w = weight.data();
    let rows = t * b * n;
    let mut out = vec![0.0; rows * d_out];
    let mut realized = 0.0;
    for r in 0..rows {
        let xr = &x.data()[r * d_in..][..d_in];
        let orow = &mut out[r * d_out..][..d_out];
        for (i, &v) in xr.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let wrow = &w[i * d_out..][..d_out];
            if v == 1 {
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += wv;
                }
            } else {
                let k = v as f64;
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += k * wv;
                }
            }
            realized += v as f64 * d_out as f64;
        }
        if let Some(bias) = bias {
            for (o, bv) in orow.iter_mut().zip(bias) {
                *o += bv;
            }
        }
    }
    if let Some((prof, path)) = profiler {
        prof.record(Observation {
            path,
            kind: LayerKind::Linear,
            charge: Charge::Ac,
            flops_per_step: (n * d_in * d_out) as u64,
            timesteps: t,
            samples: b,
            spikes: x.spike_count() as f64,
            elements: x.numel() as u64,
            realized_sops: realized,
        });
    }
    Tensor::new(vec![t, b, n, d_out], out)
}

/// Cross-correlation of an image-form spike tensor with `weight [C_out, C_in, k, k]`.
pub fn spike_conv2d(
    x: &SpikeTensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    profiler: Option<(&mut Profiler, &str)>,
) -> Result<Tensor> {
    if x.layout() != Layout::Image {
        return Err(Error::shape("spike_conv2d needs an image-form input"));
    }
    let &[t, b, c, h, w] = x.shape() else {
        unreachable!()
    };
    let &[c_out, c_in, k, k2] = weight.shape() else {
        return Err(Error::shape(format!(
            "conv weight must be rank 4, got {:?}",
            weight.shape()
        )));
    };
    if k != k2 || c_in != c {
        return Err(Error::shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let g = ConvGeom {
        c_in,
        c_out,
        kernel: k,
        stride,
        pad,
        h,
        w,
    };
    g.validate()?;
    if let Some(bias) = bias {
        if bias.len() != c_out {
            return Err(Error::shape("conv bias length must equal C_out"));
        }
    }
    let xa = x.to_analog();
    let mut out = conv2d_forward(xa.data(), t * b, &g, weight.data());
    if let Some(bias) = bias {
        let plane = g.out_h() * g.out_w();
        for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let bv = bias[i % c_out];
            for v in chunk {
                *v += bv;
            }
        }
    }
    if let Some((prof, path)) = profiler {
        profile_conv(prof, path, xa.data(), t, b, &g);
    }
    Tensor::new(vec![t, b, c_out, g.out_h(), g.out_w()], out)
}

/// 2x2 / stride-2 max pooling of an image-form spike tensor. Odd edges are
/// zero-padded, which for non-negative spikes equals clipping the window.
pub fn maxpool2d(x: &SpikeTensor) -> Result<SpikeTensor> {
    if x.layout() != Layout::Image {
        return Err(Error::shape("maxpool2d needs an image-form input"));
    }
    let &[t, b, c, h, w] = x.shape() else {
        unreachable!()
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0u8; t * b * c * oh * ow];
    for p in 0..t * b * c {
        let src = &x.data()[p * h * w..][..h * w];
        for r in 0..oh {
            for col in 0..ow {
                let mut m = 0u8;
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (ir, ic) = (2 * r + dr, 2 * col + dc);
                        if ir < h && ic < w {
                            m = m.max(src[ir * w + ic]);
                        }
                    }
                }
                out[(p * oh + r) * ow + col] = m;
            }
        }
    }
    SpikeTensor::new(vec![t, b, c, oh, ow], out, Layout::Image)
}
