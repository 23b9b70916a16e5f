//! MNIST ingestion: IDX parsing, the 50k/10k train/validation split, and
//! subsetting.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::rng::{stream, TAG_SPLIT};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_SIZE: usize = 60_000;
pub const TRAIN_SPLIT_SIZE: usize = 50_000;
pub const VAL_SPLIT_SIZE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images in `[0,1]` with shape `[S,H,W]` and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.rank() != 3 {
            return Err(Error::IdxDimensions(format!(
                "dataset images must be [S,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::IdxDimensions(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.sample(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// First `n` samples; `n == 0` or `n ≥ len` keeps everything.
    pub fn take(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// A decoded IDX container: dimension sizes plus raw unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::IdxDimensions(format!("gzip stream: {e}")))?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

/// Parse an IDX container of unsigned bytes (gzip-compressed input is
/// detected by its magic and inflated first).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let bytes = maybe_gunzip(bytes)?;
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let expected_magic = match magic {
        IDX_IMAGES_MAGIC | IDX_LABELS_MAGIC => magic,
        _ => {
            return Err(Error::IdxMagic {
                expected: if magic & 0xff == 3 {
                    IDX_IMAGES_MAGIC
                } else {
                    IDX_LABELS_MAGIC
                },
                found: magic,
            })
        }
    };
    let ndims = (expected_magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::IdxTruncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::IdxDimensions(format!(
            "{} trailing bytes after {expected}-byte payload",
            bytes.len() - expected
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        bytes: bytes[header..].to_vec(),
    })
}

/// Image file → `[S,H,W]` tensor scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let arr = parse_idx(bytes)?;
    if arr.magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            expected: IDX_IMAGES_MAGIC,
            found: arr.magic,
        });
    }
    let data = arr.bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&arr.dims, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let arr = parse_idx(bytes)?;
    if arr.magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            expected: IDX_LABELS_MAGIC,
            found: arr.magic,
        });
    }
    Ok(arr.bytes)
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "not found (plain or .gz)"),
    ))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_pair(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let img_path = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_path = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let images = parse_idx_images(&read(&img_path)?).map_err(|e| with_path(e, &img_path))?;
    let labels = parse_idx_labels(&read(&lbl_path)?).map_err(|e| with_path(e, &lbl_path))?;
    Dataset::new(images, labels, split)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::IdxMagic { .. } | Error::IdxTruncated { .. } | Error::IdxDimensions(_) => {
            Error::IdxDimensions(format!("{}: {e}", path.display()))
        }
        other => other,
    }
}

/// The official 60k training and 10k test sets from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_pair(dir, "train", Split::Train)?,
        load_pair(dir, "t10k", Split::Test)?,
    ))
}

/// Seeded shuffle of the 60k training file, then 50k train / 10k validation.
pub fn split(source: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if source.len() != MNIST_TRAIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "split expects the {MNIST_TRAIN_SIZE}-image training file, got {}",
            source.len()
        )));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut stream(seed, &[TAG_SPLIT]));
    let mut train = source.subset(&order[..TRAIN_SPLIT_SIZE]);
    let mut val = source.subset(&order[TRAIN_SPLIT_SIZE..]);
    train.split = Split::Train;
    val.split = Split::Val;
    Ok((train, val))
}
