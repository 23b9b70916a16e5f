//! Stride-1 2D convolution lowered to GEMM via im2col.
//!
//! The patch matrix has one row per `(c, i, j)` triple in ascending order and
//! one column per output pixel, so every output element reduces over
//! channels, then kernel rows, then kernel columns. It is built for a band of
//! a few output rows at a time so it stays in cache.

use rand::Rng;
use rayon::prelude::*;

use super::linalg::{gemm, gemm_strided};
use super::Tensor;
use crate::error::{Error, Result};

/// Samples reduced together by one worker when accumulating weight gradients.
/// Fixed so the reduction tree does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// Output pixels per im2col band.
const BAND_PIXELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero fill so output extents equal input extents.
    Same,
    /// No fill; output shrinks by `k - 1`.
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::InvalidArgument(format!(
                "unknown padding mode '{other}' (expected same|valid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {kernel}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be ≥ 1".into()));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            padding,
        })
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.kernel / 2,
            Padding::Valid => 0,
        }
    }

    /// Output spatial extents for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Same => Ok((h, w)),
            Padding::Valid => {
                if h < self.kernel || w < self.kernel {
                    return Err(Error::shape(
                        "conv2d",
                        format!("{h}×{w} input smaller than {0}×{0} kernel", self.kernel),
                    ));
                }
                Ok((h - self.kernel + 1, w - self.kernel + 1))
            }
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    /// Multiply-accumulates performed by one forward pass over `batch` inputs of `h × w`.
    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
        (batch * self.out_channels * oh * ow * self.fan_in()) as u64
    }

    fn check_input(&self, op: &'static str, input: &Tensor) -> Result<(usize, usize, usize)> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape(op, format!("input must be rank 4, got {s:?}")));
        }
        if s[1] != self.in_channels {
            return Err(Error::shape(
                op,
                format!(
                    "input channels: expected {}, got {}",
                    self.in_channels, s[1]
                ),
            ));
        }
        Ok((s[0], s[2], s[3]))
    }

    fn check_weights(&self, op: &'static str, weights: &Tensor) -> Result<()> {
        let expected = self.weight_shape();
        let s = weights.shape();
        if s != expected {
            let dim = ["out_channels", "in_channels", "kernel_h", "kernel_w"];
            let detail = if s.len() != 4 {
                format!("weights must be rank 4 {expected:?}, got {s:?}")
            } else {
                let d = (0..4).find(|&d| s[d] != expected[d]).unwrap_or(0);
                format!(
                    "weights {}: expected {}, got {}",
                    dim[d], expected[d], s[d]
                )
            };
            return Err(Error::shape(op, detail));
        }
        Ok(())
    }

    fn check_upstream(
        &self,
        op: &'static str,
        upstream: &Tensor,
        batch: usize,
        oh: usize,
        ow: usize,
    ) -> Result<()> {
        let expected = [batch, self.out_channels, oh, ow];
        if upstream.shape() != expected {
            return Err(Error::shape(
                op,
                format!(
                    "upstream_grad: expected {expected:?}, got {:?}",
                    upstream.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / fan_in)`; bias starts at zero.
pub fn init_conv_weights<R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> (Tensor, Tensor) {
    let bound = (6.0 / spec.fan_in() as f64).sqrt() as f32;
    let mut w = Tensor::zeros(&spec.weight_shape());
    for v in w.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    (w, Tensor::zeros(&[spec.out_channels]))
}

/// Output rows per band for an `oh × ow` output.
fn band_rows(oh: usize, ow: usize) -> usize {
    (BAND_PIXELS / ow.max(1)).clamp(1, oh.max(1))
}

/// Zero-padded copy of one sample so every patch row is one contiguous slice.
fn pad_input(src: &[f32], spec: &ConvSpec, (h, w): (usize, usize), padded: &mut Vec<f32>) {
    let pad = spec.pad();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    padded.clear();
    padded.resize(spec.in_channels * ph * pw, 0.0);
    for c in 0..spec.in_channels {
        for y in 0..h {
            let dst = (c * ph + y + pad) * pw + pad;
            padded[dst..dst + w].copy_from_slice(&src[(c * h + y) * w..][..w]);
        }
    }
}

/// Patch matrix `[C·k·k, rows·ow]` for output rows `y0..y0 + rows`.
fn im2col_band(
    padded: &[f32],
    spec: &ConvSpec,
    (ph, pw): (usize, usize),
    ow: usize,
    (y0, rows): (usize, usize),
    cols: &mut [f32],
) {
    let k = spec.kernel;
    let n = rows * ow;
    for c in 0..spec.in_channels {
        let chan = &padded[c * ph * pw..(c + 1) * ph * pw];
        for i in 0..k {
            for j in 0..k {
                let row = &mut cols[((c * k + i) * k + j) * n..][..n];
                for (oy, out) in row.chunks_exact_mut(ow).enumerate() {
                    out.copy_from_slice(&chan[(y0 + oy + i) * pw + j..][..ow]);
                }
            }
        }
    }
}

/// Scatter-add a band's patch matrix back onto the unpadded input grid.
fn col2im_band_add(
    cols: &[f32],
    spec: &ConvSpec,
    (h, w): (usize, usize),
    ow: usize,
    (y0, rows): (usize, usize),
    dst: &mut [f32],
) {
    let k = spec.kernel;
    let pad = spec.pad() as isize;
    let n = rows * ow;
    for c in 0..spec.in_channels {
        let chan = &mut dst[c * h * w..(c + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = &cols[((c * k + i) * k + j) * n..][..n];
                let dx = j as isize - pad;
                let x_lo = (-dx).clamp(0, ow as isize) as usize;
                let x_hi = (w as isize - dx).clamp(0, ow as isize) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..rows {
                    let iy = (y0 + oy) as isize + i as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let start = (x_lo as isize + dx) as usize;
                    let d = &mut chan[iy as usize * w + start..][..x_hi - x_lo];
                    for (dv, sv) in d.iter_mut().zip(&row[oy * ow + x_lo..oy * ow + x_hi]) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

/// `(y0, rows)` for every band of an `oh`-row output.
fn bands(oh: usize, ow: usize) -> impl Iterator<Item = (usize, usize)> {
    let r = band_rows(oh, ow);
    (0..oh).step_by(r).map(move |y0| (y0, r.min(oh - y0)))
}

fn check_bias(op: &'static str, bias: &Tensor, spec: &ConvSpec) -> Result<()> {
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            op,
            format!(
                "bias: expected [{}], got {:?}",
                spec.out_channels,
                bias.shape()
            ),
        ));
    }
    Ok(())
}

/// Batched convolution: `[B,C,H,W] ⊛ [O,C,k,k] + bias → [B,O,H',W']`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    const OP: &str = "conv2d_forward";
    let (batch, h, w) = spec.check_input(OP, input)?;
    spec.check_weights(OP, weights)?;
    check_bias(OP, bias, spec)?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let plane = oh * ow;
    let kk = spec.fan_in();
    let mut out = Tensor::zeros(&[batch, spec.out_channels, oh, ow]);
    let in_len = spec.in_channels * h * w;
    let out_len = spec.out_channels * plane;
    let wd = weights.data();
    let bd = bias.data();
    let pw = w + 2 * spec.pad();
    let ph = h + 2 * spec.pad();
    let band = band_rows(oh, ow) * ow;
    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each_init(
            || (Vec::new(), vec![0.0f32; kk * band]),
            |(padded, cols), (b, dst)| {
                pad_input(&input.data()[b * in_len..(b + 1) * in_len], spec, (h, w), padded);
                for (o, row) in dst.chunks_mut(plane).enumerate() {
                    row.fill(bd[o]);
                }
                for (y0, rows) in bands(oh, ow) {
                    let n = rows * ow;
                    im2col_band(padded, spec, (ph, pw), ow, (y0, rows), cols);
                    gemm_strided(
                        spec.out_channels,
                        kk,
                        n,
                        wd,
                        (kk as isize, 1),
                        &cols[..kk * n],
                        (n as isize, 1),
                        &mut dst[y0 * ow..],
                        plane,
                        true,
                    );
                }
            },
        );
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. weights and bias, summed over the batch.
pub fn conv2d_weight_grad(
    input: &Tensor,
    upstream_grad: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    const OP: &str = "conv2d_weight_grad";
    let (batch, h, w) = spec.check_input(OP, input)?;
    let (oh, ow) = spec.output_hw(h, w)?;
    spec.check_upstream(OP, upstream_grad, batch, oh, ow)?;
    let plane = oh * ow;
    let kk = spec.fan_in();
    let o = spec.out_channels;
    let in_len = spec.in_channels * h * w;
    let up_len = o * plane;
    let (ph, pw) = (h + 2 * spec.pad(), w + 2 * spec.pad());

    let partials: Vec<(Vec<f32>, Vec<f32>)> = (0..batch.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut gw = vec![0.0f32; o * kk];
            let mut gb = vec![0.0f32; o];
            let mut cols = vec![0.0f32; kk * band_rows(oh, ow) * ow];
            let mut padded = Vec::new();
            let end = ((chunk + 1) * GRAD_CHUNK).min(batch);
            for b in chunk * GRAD_CHUNK..end {
                let up = &upstream_grad.data()[b * up_len..(b + 1) * up_len];
                pad_input(&input.data()[b * in_len..(b + 1) * in_len], spec, (h, w), &mut padded);
                for (y0, rows) in bands(oh, ow) {
                    let n = rows * ow;
                    im2col_band(&padded, spec, (ph, pw), ow, (y0, rows), &mut cols);
                    // gw[o, r] += Σ_p up[o, y0·ow + p] · cols[r, p]
                    gemm(
                        o,
                        n,
                        kk,
                        &up[y0 * ow..],
                        (plane as isize, 1),
                        &cols[..kk * n],
                        (1, n as isize),
                        &mut gw,
                        true,
                    );
                }
                for (g, row) in gb.iter_mut().zip(up.chunks(plane)) {
                    *g += row.iter().sum::<f32>();
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = Tensor::zeros(&spec.weight_shape());
    let mut grad_b = Tensor::zeros(&[o]);
    for (gw, gb) in partials {
        for (d, s) in grad_w.data_mut().iter_mut().zip(&gw) {
            *d += s;
        }
        for (d, s) in grad_b.data_mut().iter_mut().zip(&gb) {
            *d += s;
        }
    }
    Ok((grad_w, grad_b))
}

/// Gradient w.r.t. the input: full correlation of the upstream gradient with
/// the flipped kernels, realised as `Wᵀ · dY` followed by col2im.
pub fn conv2d_input_grad(
    weights: &Tensor,
    upstream_grad: &Tensor,
    spec: &ConvSpec,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    const OP: &str = "conv2d_input_grad";
    spec.check_weights(OP, weights)?;
    let (h, w) = input_hw;
    let (oh, ow) = spec.output_hw(h, w)?;
    let batch = upstream_grad.shape().first().copied().unwrap_or(0);
    spec.check_upstream(OP, upstream_grad, batch, oh, ow)?;
    let plane = oh * ow;
    let kk = spec.fan_in();
    let o = spec.out_channels;
    let up_len = o * plane;
    let in_len = spec.in_channels * h * w;
    let mut grad = Tensor::zeros(&[batch, spec.in_channels, h, w]);
    grad.data_mut()
        .par_chunks_mut(in_len)
        .enumerate()
        .for_each_init(
            || vec![0.0f32; kk * band_rows(oh, ow) * ow],
            |cols, (b, dst)| {
                let up = &upstream_grad.data()[b * up_len..(b + 1) * up_len];
                for (y0, rows) in bands(oh, ow) {
                    let n = rows * ow;
                    // cols[r, p] = Σ_o w[o, r] · up[o, y0·ow + p]
                    gemm(
                        kk,
                        o,
                        n,
                        weights.data(),
                        (1, kk as isize),
                        &up[y0 * ow..],
                        (plane as isize, 1),
                        &mut cols[..kk * n],
                        false,
                    );
                    col2im_band_add(&cols[..kk * n], spec, (h, w), ow, (y0, rows), dst);
                }
            },
        );
    Ok(grad)
}
