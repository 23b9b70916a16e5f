//! Binary container for trained models and cached datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FFCNN"  u32 version  u8 kind
//! u32 n  n bytes of config text (UTF-8)
//! u32 height  u32 width
//! u32 tensor count, then per tensor: u8 rank, rank × u32 extents, f32 data
//! kind = dataset only: u8 split code, u32 n, n label bytes
//! ```
//!
//! Model tensors are stored as `w1, b1, …, wL, bL` followed by the readout
//! weights and bias.

use std::path::Path;

use crate::bp::BpNetwork;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::ff::FfNetwork;
use crate::inference::ClassifierHead;
use crate::metrics::write_atomic;
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 5] = b"FFCNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Ff = 1,
    Bp = 2,
    Dataset = 3,
}

impl PayloadKind {
    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(PayloadKind::Ff),
            2 => Some(PayloadKind::Bp),
            3 => Some(PayloadKind::Dataset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: PayloadKind,
    pub config_text: String,
    pub input_hw: (usize, usize),
    pub tensors: Vec<Tensor>,
    pub labels: Option<(Split, Vec<u8>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        put_u32(&mut out, self.config_text.len())?;
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.input_hw.0)?;
        put_u32(&mut out, self.input_hw.1)?;
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            out.push(t.rank() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            out.reserve(t.len() * 4);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match (&self.labels, self.kind) {
            (Some((split, labels)), PayloadKind::Dataset) => {
                out.push(split.code());
                put_u32(&mut out, labels.len())?;
                out.extend_from_slice(labels);
            }
            (None, PayloadKind::Dataset) => {
                return Err(Error::Checkpoint("dataset payload without labels".into()))
            }
            (Some(_), _) => return Err(Error::Checkpoint("labels only belong to datasets".into())),
            (None, _) => {}
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("not an FFCNN file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let code = r.u8("payload kind")?;
        let kind = PayloadKind::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown payload kind {code}")))?;
        let n = r.u32("config length")?;
        let config_text = String::from_utf8(r.take(n, "config text")?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let input_hw = (r.u32("height")?, r.u32("width")?);
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(64));
        for i in 0..count {
            let rank = r.u8("tensor rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("tensor {i}: rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32("tensor extent"))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {i}: size overflow")))?;
            let raw = r.take(len, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::from_vec(&shape, data)?);
        }
        let labels = if kind == PayloadKind::Dataset {
            let code = r.u8("split")?;
            let split = Split::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown split code {code}")))?;
            let n = r.u32("label count")?;
            Some((split, r.take(n, "labels")?.to_vec()))
        } else {
            None
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint {
            kind,
            config_text,
            input_hw,
            tensors,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn expect_kind(&self, kind: PayloadKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} payload, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text)
    }
}

/// Pair up `w, b, w, b, …` into per-layer parameters.
pub(crate) fn layer_pairs(tensors: Vec<Tensor>) -> Vec<(Tensor, Tensor)> {
    let mut it = tensors.into_iter();
    let mut out = Vec::new();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        out.push((w, b));
    }
    out
}

pub fn ff_checkpoint(cfg: &ExperimentConfig, network: &FfNetwork, head: &ClassifierHead) -> Checkpoint {
    let mut tensors = Vec::with_capacity(2 * network.layers.len() + 2);
    for l in &network.layers {
        tensors.push(l.weights.clone());
        tensors.push(l.bias.clone());
    }
    tensors.push(head.weights.clone());
    tensors.push(head.bias.clone());
    Checkpoint {
        kind: PayloadKind::Ff,
        config_text: cfg.results_text(),
        input_hw: network.input_hw,
        tensors,
        labels: None,
    }
}

/// Rebuild an FF network and its readout.
pub fn restore_ff(ckpt: &Checkpoint) -> Result<(ExperimentConfig, FfNetwork, ClassifierHead)> {
    ckpt.expect_kind(PayloadKind::Ff)?;
    let cfg = ckpt.config()?;
    let mut tensors = ckpt.tensors.clone();
    if tensors.len() < 2 || tensors.len() % 2 != 0 {
        return Err(Error::Checkpoint(format!("{} tensors in an FF payload", tensors.len())));
    }
    let hb = tensors.pop().expect("length checked");
    let hw = tensors.pop().expect("length checked");
    let network = FfNetwork::from_parts(&cfg.train, ckpt.input_hw, layer_pairs(tensors))?;
    let head = ClassifierHead::from_parts(hw, hb)?;
    if head.feature_len() != network.feature_len() {
        return Err(Error::Checkpoint(format!(
            "readout expects {} features, network yields {}",
            head.feature_len(),
            network.feature_len()
        )));
    }
    Ok((cfg, network, head))
}

pub fn bp_checkpoint(cfg: &ExperimentConfig, network: &BpNetwork) -> Checkpoint {
    Checkpoint {
        kind: PayloadKind::Bp,
        config_text: cfg.results_text(),
        input_hw: network.input_hw,
        tensors: network.tensors(),
        labels: None,
    }
}

pub fn restore_bp(ckpt: &Checkpoint) -> Result<(ExperimentConfig, BpNetwork)> {
    ckpt.expect_kind(PayloadKind::Bp)?;
    let cfg = ckpt.config()?;
    let network = BpNetwork::from_parts(&cfg.train, ckpt.input_hw, ckpt.tensors.clone())?;
    Ok((cfg, network))
}

pub fn dataset_checkpoint(ds: &Dataset) -> Checkpoint {
    Checkpoint {
        kind: PayloadKind::Dataset,
        config_text: String::new(),
        input_hw: ds.image_hw(),
        tensors: vec![ds.images.clone()],
        labels: Some((ds.split, ds.labels.clone())),
    }
}

pub fn restore_dataset(ckpt: &Checkpoint) -> Result<Dataset> {
    ckpt.expect_kind(PayloadKind::Dataset)?;
    let (split, labels) = ckpt.labels.clone().expect("dataset payload carries labels");
    let images = ckpt
        .tensors
        .first()
        .cloned()
        .ok_or_else(|| Error::Checkpoint("dataset payload without images".into()))?;
    Dataset::new(images, labels, split)
}
