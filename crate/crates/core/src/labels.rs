//! Spatially-extended labels.
//!
//! Each class is a single plane wave covering the whole image. A labeled
//! sample is the convex blend `(1 - K)·image + K·wave`, min-max rescaled to
//! `[0, 1]`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// One class's wave: orientation in degrees, frequency in cycles per image
/// width, phase in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveLabelSpec {
    pub label: usize,
    pub orientation_deg: f64,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelSetId {
    /// Four orientations (0°, 45°, 90°, 135°) crossed with three frequencies.
    Set1,
    /// One frequency, ten orientations 18° apart.
    Set2,
}

impl LabelSetId {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSetId::Set1 => "set1",
            LabelSetId::Set2 => "set2",
        }
    }
}

impl FromStr for LabelSetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set1" | "1" => Ok(LabelSetId::Set1),
            "set2" | "2" => Ok(LabelSetId::Set2),
            other => Err(Error::InvalidArgument(format!(
                "unknown label set '{other}' (expected set1|set2)"
            ))),
        }
    }
}

impl fmt::Display for LabelSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub id: LabelSetId,
    pub specs: [WaveLabelSpec; NUM_CLASSES],
}

const SET1_FREQUENCIES: [f64; 3] = [2.0, 4.0, 6.0];
const SET2_FREQUENCY: f64 = 4.0;

impl LabelSet {
    pub fn builtin(id: LabelSetId) -> Self {
        let specs = std::array::from_fn(|label| match id {
            LabelSetId::Set1 => WaveLabelSpec {
                label,
                orientation_deg: (label % 4) as f64 * 45.0,
                frequency: SET1_FREQUENCIES[label / 4],
                phase: 0.0,
            },
            LabelSetId::Set2 => WaveLabelSpec {
                label,
                orientation_deg: label as f64 * 18.0,
                frequency: SET2_FREQUENCY,
                phase: 0.0,
            },
        });
        LabelSet { id, specs }
    }

    /// Parse a mapping override: ten lines of
    /// `label orientation_deg frequency_cycles phase_rad`. `#` starts a comment.
    pub fn parse_mapping(id: LabelSetId, text: &str) -> Result<Self> {
        let mut slots: [Option<WaveLabelSpec>; NUM_CLASSES] = [None; NUM_CLASSES];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| {
                Error::Config(format!("label mapping line {}: {what}", lineno + 1))
            };
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let label: usize = fields[0].parse().map_err(|_| bad("bad label"))?;
            if label >= NUM_CLASSES {
                return Err(bad("label out of range"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let spec = WaveLabelSpec {
                label,
                orientation_deg: num(fields[1])?,
                frequency: num(fields[2])?,
                phase: num(fields[3])?,
            };
            if !(0.0..180.0).contains(&spec.orientation_deg) || spec.frequency <= 0.0 {
                return Err(bad("orientation must be in [0,180) and frequency > 0"));
            }
            if slots[label].replace(spec).is_some() {
                return Err(bad("duplicate label"));
            }
        }
        let mut specs = [WaveLabelSpec {
            label: 0,
            orientation_deg: 0.0,
            frequency: 1.0,
            phase: 0.0,
        }; NUM_CLASSES];
        for (label, slot) in slots.iter().enumerate() {
            specs[label] = slot.ok_or_else(|| {
                Error::Config(format!("label mapping is missing label {label}"))
            })?;
        }
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                if specs[a].orientation_deg == specs[b].orientation_deg
                    && specs[a].frequency == specs[b].frequency
                {
                    return Err(Error::Config(format!(
                        "labels {a} and {b} share orientation and frequency"
                    )));
                }
            }
        }
        Ok(LabelSet { id, specs })
    }

    pub fn load_mapping(id: LabelSetId, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_mapping(id, &text)
    }
}

/// `wave[y,x] = (cos(2π·f·(x·cosα + y·sinα)/W + φ) + 1) / 2`.
pub fn make_wave(spec: &WaveLabelSpec, height: usize, width: usize) -> Tensor {
    assert!(height >= 2 && width >= 2, "wave needs at least 2×2 pixels");
    let alpha = spec.orientation_deg.to_radians();
    let (ca, sa) = (alpha.cos(), alpha.sin());
    let scale = 2.0 * PI * spec.frequency / width as f64;
    let mut t = Tensor::zeros(&[height, width]);
    for (idx, v) in t.data_mut().iter_mut().enumerate() {
        let (y, x) = ((idx / width) as f64, (idx % width) as f64);
        *v = (((scale * (x * ca + y * sa) + spec.phase).cos() + 1.0) / 2.0) as f32;
    }
    t
}

/// Blend then min-max rescale; a flat blend maps to all zeros.
pub fn superpose_into(image: &[f32], wave: &[f32], k: f32, out: &mut [f32]) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for ((o, &im), &wv) in out.iter_mut().zip(image).zip(wave) {
        *o = (1.0 - k) * im + k * wv;
        lo = lo.min(*o);
        hi = hi.max(*o);
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for o in out.iter_mut() {
            *o = ((*o - lo) * inv).clamp(0.0, 1.0);
        }
    } else {
        out.fill(0.0);
    }
}

pub fn superpose(image: &Tensor, wave: &Tensor, k: f32) -> Result<Tensor> {
    if image.shape() != wave.shape() {
        return Err(Error::shape(
            "superpose",
            format!("image {:?} vs wave {:?}", image.shape(), wave.shape()),
        ));
    }
    check_k(k)?;
    let mut out = Tensor::zeros(image.shape());
    superpose_into(image.data(), wave.data(), k, out.data_mut());
    Ok(out)
}

fn check_k(k: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument(format!("label intensity K={k} outside [0,1]")));
    }
    Ok(())
}

/// A label set rendered at a fixed image size together with its intensity K.
#[derive(Debug, Clone)]
pub struct LabelCodec {
    set: LabelSet,
    k: f32,
    height: usize,
    width: usize,
    waves: Vec<Tensor>,
}

/// Positive and negative copies of one batch, shaped `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct PosNegBatch {
    pub positive: Tensor,
    pub negative: Tensor,
    pub negative_labels: Vec<usize>,
}

impl LabelCodec {
    pub fn new(set: LabelSet, k: f32, height: usize, width: usize) -> Result<Self> {
        check_k(k)?;
        let waves = set.specs.iter().map(|s| make_wave(s, height, width)).collect();
        Ok(LabelCodec {
            set,
            k,
            height,
            width,
            waves,
        })
    }

    pub fn set(&self) -> &LabelSet {
        &self.set
    }

    pub fn k(&self) -> f32 {
        self.k
    }

    pub fn wave(&self, label: usize) -> &Tensor {
        &self.waves[label]
    }

    fn check_image(&self, len: usize) -> Result<()> {
        if len != self.height * self.width {
            return Err(Error::shape(
                "label codec",
                format!(
                    "image has {len} pixels, codec expects {}×{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(())
    }

    pub fn label_image(&self, image: &[f32], label: usize, out: &mut [f32]) -> Result<()> {
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: NUM_CLASSES,
            });
        }
        self.check_image(image.len())?;
        superpose_into(image, self.waves[label].data(), self.k, out);
        Ok(())
    }

    /// Superpose every sample of `images` (`[B,H,W]` or `[B,1,H,W]`) with the
    /// given labels.
    pub fn label_batch(&self, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let batch = images.shape()[0];
        if labels.len() != batch {
            return Err(Error::shape(
                "label_batch",
                format!("{} labels for {batch} images", labels.len()),
            ));
        }
        let mut out = Tensor::zeros(&[batch, 1, self.height, self.width]);
        for (b, &label) in labels.iter().enumerate() {
            self.label_image(images.sample(b), label, out.sample_mut(b))?;
        }
        Ok(out)
    }

    /// Positives carry the true label; each negative carries a label drawn
    /// uniformly from the nine wrong ones.
    pub fn build_pos_neg<R: Rng + ?Sized>(
        &self,
        images: &Tensor,
        true_labels: &[usize],
        rng: &mut R,
    ) -> Result<PosNegBatch> {
        if let Some(&label) = true_labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: NUM_CLASSES,
            });
        }
        let negative_labels: Vec<usize> = true_labels
            .iter()
            .map(|&t| draw_negative(t, rng))
            .collect();
        Ok(PosNegBatch {
            positive: self.label_batch(images, true_labels)?,
            negative: self.label_batch(images, &negative_labels)?,
            negative_labels,
        })
    }

    /// All ten labeled copies of one image, label order 0..9, as `[10,1,H,W]`.
    pub fn replicate_all_labels(&self, image: &[f32]) -> Result<Tensor> {
        self.check_image(image.len())?;
        let mut out = Tensor::zeros(&[NUM_CLASSES, 1, self.height, self.width]);
        for label in 0..NUM_CLASSES {
            superpose_into(image, self.waves[label].data(), self.k, out.sample_mut(label));
        }
        Ok(out)
    }
}

/// Uniform over the nine labels different from `true_label`.
pub fn draw_negative<R: Rng + ?Sized>(true_label: usize, rng: &mut R) -> usize {
    let r = rng.random_range(0..NUM_CLASSES - 1);
    if r >= true_label {
        r + 1
    } else {
        r
    }
}
