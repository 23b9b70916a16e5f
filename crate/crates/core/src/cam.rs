//! Class activation maps read off the linear classifier.
//!
//! The head sees the normalized activations of layers 2..L flattened in
//! `(layer, channel, y, x)` order, so the logit of class `c` splits into one
//! term per spatial location and layer:
//!
//! ```text
//! cam_l[y, x] = Σ_ch w[c, (l, ch, y, x)] · a_l[ch, y, x]
//! logit[c]    = Σ_l Σ_{y,x} cam_l[y, x] + bias[c]
//! ```
//!
//! Positive values push towards the class, negative values away from it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ff::{FfNetwork, ForwardPass};
use crate::inference::ClassifierHead;
use crate::labels::NUM_CLASSES;
use crate::png_io;
use crate::tensor::{rms_normalize, Tensor};

/// Rendered pixels per map cell.
pub const CELL_PX: usize = 8;
/// Weight of the input image when a map is rendered over it.
pub const OVERLAY_ALPHA: f32 = 0.35;

pub const NEUTRAL: [u8; 3] = [245, 245, 245];
pub const YELLOW: [u8; 3] = [255, 205, 0];
pub const PINK: [u8; 3] = [235, 40, 150];

#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    /// `[H', W']` signed contributions.
    pub values: Tensor,
    pub class: usize,
    /// 1-based layer indices summed into this map.
    pub layers: Vec<usize>,
}

impl CamMap {
    pub fn hw(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn total(&self) -> f64 {
        self.values.data().iter().map(|&v| v as f64).sum()
    }

    /// Rows of the map as decimal strings.
    pub fn grid(&self) -> Vec<Vec<String>> {
        let (_, w) = self.hw();
        self.values
            .data()
            .chunks(w)
            .map(|row| row.iter().map(|v| format!("{v:e}")).collect())
            .collect()
    }
}

fn check_layer(network: &FfNetwork, layer: usize) -> Result<()> {
    if layer < 2 || layer > network.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "CAM layer {layer}: the classifier reads layers 2..={}",
            network.layers.len()
        )));
    }
    Ok(())
}

/// Maps of `layers` for sample `sample` of an existing forward pass.
pub fn cams_from_pass(
    network: &FfNetwork,
    head: &ClassifierHead,
    pass: &ForwardPass,
    sample: usize,
    class: usize,
    layers: &[usize],
) -> Result<Vec<CamMap>> {
    if class >= NUM_CLASSES {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: NUM_CLASSES,
        });
    }
    if head.feature_len() != network.feature_len() {
        return Err(Error::shape(
            "cams_from_pass",
            format!(
                "head reads {} features, network produces {}",
                head.feature_len(),
                network.feature_len()
            ),
        ));
    }
    let w = head.weights.sample(class);
    layers
        .iter()
        .map(|&l| {
            check_layer(network, l)?;
            let offset: usize = network.layers[1..l - 1].iter().map(|x| x.neurons()).sum();
            let (h, wd) = network.layers[l - 1].out_hw;
            let plane = h * wd;
            let act = pass.layers[l - 1].activations.select(&[sample]);
            let a = rms_normalize(&act).0;
            let a = a.data();
            let channels = a.len() / plane;
            let mut sum = vec![0f64; plane];
            for ch in 0..channels {
                let wc = &w[offset + ch * plane..offset + (ch + 1) * plane];
                let ac = &a[ch * plane..(ch + 1) * plane];
                for ((s, &wi), &ai) in sum.iter_mut().zip(wc).zip(ac) {
                    *s += wi as f64 * ai as f64;
                }
            }
            Ok(CamMap {
                values: Tensor::from_vec(&[h, wd], sum.into_iter().map(|v| v as f32).collect())?,
                class,
                layers: vec![l],
            })
        })
        .collect()
}

/// Per-layer maps for one unlabeled image (`H·W` pixels).
pub fn layer_cams(
    network: &FfNetwork,
    head: &ClassifierHead,
    image: &[f32],
    class: usize,
    layers: &[usize],
) -> Result<Vec<CamMap>> {
    let (h, w) = network.input_hw;
    let batch = Tensor::from_vec(&[1, 1, h, w], image.to_vec())?;
    let pass = network.forward(&batch)?;
    cams_from_pass(network, head, &pass, 0, class, layers)
}

pub fn layer_cam(
    network: &FfNetwork,
    head: &ClassifierHead,
    image: &[f32],
    class: usize,
    layer: usize,
) -> Result<CamMap> {
    Ok(layer_cams(network, head, image, class, &[layer])?.remove(0))
}

/// Elementwise sum of maps of one class. Coarser maps (pooled layers) are
/// brought to the finest grid with [`resample_area`], which keeps each
/// map's total.
pub fn combined_cam(cams: &[CamMap]) -> Result<CamMap> {
    let first = cams
        .first()
        .ok_or_else(|| Error::InvalidArgument("no maps to combine".into()))?;
    let target = cams
        .iter()
        .map(CamMap::hw)
        .max_by_key(|&(h, w)| h * w)
        .unwrap_or((0, 0));
    let mut values = Tensor::zeros(&[target.0, target.1]);
    let mut layers = Vec::new();
    for c in cams {
        if c.class != first.class {
            return Err(Error::InvalidArgument(format!(
                "maps for classes {} and {}",
                first.class, c.class
            )));
        }
        let (h, w) = c.hw();
        if h > target.0 || w > target.1 {
            return Err(Error::shape(
                "combined_cam",
                format!("{:?} does not fit in {:?}", c.values.shape(), [target.0, target.1]),
            ));
        }
        let v = resample_area(c.values.data(), (h, w), target);
        for (acc, x) in values.data_mut().iter_mut().zip(v) {
            *acc += x;
        }
        layers.extend(&c.layers);
    }
    Ok(CamMap {
        values,
        class: first.class,
        layers,
    })
}

/// Spreads each source cell over the target cells it overlaps, in
/// proportion to the overlap area. The sum of the map is unchanged.
pub fn resample_area(src: &[f32], from: (usize, usize), to: (usize, usize)) -> Vec<f32> {
    if from == to {
        return src.to_vec();
    }
    // Overlap weights along one axis: src cell i covers [i·d/s, (i+1)·d/s).
    let axis = |s: usize, d: usize| -> Vec<Vec<(usize, f64)>> {
        (0..s)
            .map(|i| {
                let (lo, hi) = (i as f64 * d as f64 / s as f64, (i + 1) as f64 * d as f64 / s as f64);
                let span = hi - lo;
                (lo.floor() as usize..(hi.ceil() as usize).min(d))
                    .filter_map(|j| {
                        let o = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                        (o > 0.0).then_some((j, o / span))
                    })
                    .collect()
            })
            .collect()
    };
    let (ys, xs) = (axis(from.0, to.0), axis(from.1, to.1));
    let mut out = vec![0f64; to.0 * to.1];
    for (i, wy) in ys.iter().enumerate() {
        for (j, wx) in xs.iter().enumerate() {
            let v = src[i * from.1 + j] as f64;
            for &(y, fy) in wy {
                for &(x, fx) in wx {
                    out[y * to.1 + x] += v * fy * fx;
                }
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(src: &[f32], from: (usize, usize), to: (usize, usize)) -> Vec<f32> {
    let (sh, sw) = from;
    let (dh, dw) = to;
    let coord = |i: usize, s: usize, d: usize| -> (usize, usize, f32) {
        let x = ((i as f32 + 0.5) * s as f32 / d as f32 - 0.5).clamp(0.0, (s - 1) as f32);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(s - 1), x - lo as f32)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Diverging colour for `t` in `[-1, 1]`: pink below zero, yellow above.
pub fn colormap(t: f32) -> [u8; 3] {
    let end = if t >= 0.0 { YELLOW } else { PINK };
    let m = t.abs().min(1.0);
    std::array::from_fn(|i| {
        let n = NEUTRAL[i] as f32;
        (n + m * (end[i] as f32 - n)).round() as u8
    })
}

/// Inverse of [`colormap`] up to 8-bit rounding.
pub fn invert_colormap(rgb: [u8; 3]) -> f32 {
    let project = |end: [u8; 3]| {
        let d: [f32; 3] = std::array::from_fn(|i| end[i] as f32 - NEUTRAL[i] as f32);
        let v: [f32; 3] = std::array::from_fn(|i| rgb[i] as f32 - NEUTRAL[i] as f32);
        let dd: f32 = d.iter().map(|x| x * x).sum();
        let s = (v.iter().zip(&d).map(|(a, b)| a * b).sum::<f32>() / dd).clamp(0.0, 1.0);
        let resid: f32 = v.iter().zip(&d).map(|(a, b)| (a - s * b).powi(2)).sum();
        (s, resid)
    };
    let (sy, ry) = project(YELLOW);
    let (sp, rp) = project(PINK);
    if ry <= rp {
        sy
    } else {
        -sp
    }
}

/// Render `cam` as a PNG, scaled symmetrically to `±max|cam|`. With an
/// overlay image the map is first resized to the image grid and blended
/// with its grey levels.
pub fn render_cam(cam: &CamMap, overlay: Option<(&[f32], (usize, usize))>, path: &Path) -> Result<()> {
    let (mut h, mut w) = cam.hw();
    let mut values = cam.values.data().to_vec();
    if let Some((_, hw)) = overlay {
        if hw != (h, w) {
            values = resize_bilinear(&values, (h, w), hw);
            (h, w) = hw;
        }
    }
    let max = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let (pw, ph) = (w * CELL_PX, h * CELL_PX);
    let mut rgb = vec![0u8; pw * ph * 3];
    for y in 0..h {
        for x in 0..w {
            let mut c = colormap(values[y * w + x] * scale);
            if let Some((img, _)) = overlay {
                let grey = 255.0 * (1.0 - img[y * w + x].clamp(0.0, 1.0));
                for ch in &mut c {
                    *ch = ((1.0 - OVERLAY_ALPHA) * *ch as f32 + OVERLAY_ALPHA * grey).round() as u8;
                }
            }
            for py in y * CELL_PX..(y + 1) * CELL_PX {
                for px in x * CELL_PX..(x + 1) * CELL_PX {
                    rgb[(py * pw + px) * 3..][..3].copy_from_slice(&c);
                }
            }
        }
    }
    png_io::write_rgb(path, pw, ph, &rgb)
}

/// Cell centres of a rendered map, decoded back to `[-1, 1]`.
pub fn decode_rendered(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (pw, ph, rgb) = png_io::read_rgb(path)?;
    let (w, h) = (pw / CELL_PX, ph / CELL_PX);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let at = ((y * CELL_PX + CELL_PX / 2) * pw + x * CELL_PX + CELL_PX / 2) * 3;
            out.push(invert_colormap([rgb[at], rgb[at + 1], rgb[at + 2]]));
        }
    }
    Ok((h, w, out))
}
