//! Labelled images, minibatches, and the IDX and PGM file formats.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{invalid, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// How an image came to look the way it does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Clean,
    Contaminated,
    Permuted,
}

/// A single-channel image with pixel values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
    pub num_classes: usize,
    /// Binary annotation, 1 on pixels flagged as spurious.
    pub mask: Option<Vec<f64>>,
    pub origin: Origin,
}

impl LabeledImage {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        label: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(invalid!(
                "image of {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        if label >= num_classes {
            return Err(invalid!(
                "label {label} out of range for {num_classes} classes"
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
            label,
            num_classes,
            mask: None,
            origin: Origin::Clean,
        })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes];
        y[self.label] = 1.0;
        y
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.images.first().map_or(0, |i| i.num_classes)
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height, i.width))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.images[i].clone()).collect())
    }

    /// Assembles the images at `indices` into model inputs.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let first = indices
            .first()
            .map(|&i| &self.images[i])
            .ok_or_else(|| invalid!("empty batch"))?;
        let (h, w, k) = (first.height, first.width, first.num_classes);
        let n = indices.len();
        let mut x = Vec::with_capacity(n * h * w);
        let mut y = vec![0.0; n * k];
        let mut labels = Vec::with_capacity(n);
        let with_masks = indices.iter().all(|&i| self.images[i].mask.is_some());
        let mut masks = Vec::with_capacity(if with_masks { n * h * w } else { 0 });
        for (row, &i) in indices.iter().enumerate() {
            let img = &self.images[i];
            if (img.height, img.width, img.num_classes) != (h, w, k) {
                return Err(invalid!("image {i} does not match the batch geometry"));
            }
            x.extend(img.pixels.iter().map(|p| p / 255.0));
            y[row * k + img.label] = 1.0;
            labels.push(img.label);
            if with_masks {
                masks.extend_from_slice(img.mask.as_ref().expect("checked above"));
            }
        }
        Ok(Batch {
            x: Tensor::new(vec![n, 1, h, w], x)?,
            y: Tensor::new(vec![n, k], y)?,
            masks: if with_masks {
                Some(Tensor::new(vec![n, h, w], masks)?)
            } else {
                None
            },
            labels,
        })
    }
}

/// Model-ready minibatch: pixels scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, H, W]`
    pub x: Tensor,
    /// One-hot `[B, K]`
    pub y: Tensor,
    /// `[B, H, W]`, present only when every image carries a mask.
    pub masks: Option<Tensor>,
    pub labels: Vec<usize>,
}

/// An IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Idx {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            detail: format!("file ends inside the header field at byte {offset}"),
        })
}

/// Parses an IDX payload of unsigned bytes, gunzipping first if needed.
pub fn parse_idx(raw: &[u8]) -> Result<Idx> {
    let inflated;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                offset: 0,
                detail: format!("bad gzip stream: {e}"),
            })?;
        inflated = out;
        &inflated[..]
    } else {
        raw
    };
    let magic = be_u32(bytes, 0)?;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected unsigned-byte IDX"),
        });
    }
    let rank = (magic & 0xff) as usize;
    if rank == 0 {
        return Err(Error::Parse {
            offset: 3,
            detail: "IDX rank must be at least 1".into(),
        });
    }
    let dims = (0..rank)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated payload, expected {end} bytes"),
        });
    }
    if bytes.len() > end {
        return Err(Error::Parse {
            offset: end,
            detail: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(Idx {
        magic,
        dims,
        data: bytes[start..end].to_vec(),
    })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 {
        return Err(invalid!("IDX rank must be in 1..=255"));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(invalid!(
            "IDX dims {dims:?} do not match {} bytes",
            data.len()
        ));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&(0x0800u32 | dims.len() as u32).to_be_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| invalid!("IDX dimension {d} exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub fn read_idx(path: &Path) -> Result<Idx> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&raw).map_err(|e| match e {
        Error::Parse { offset, detail } => Error::Parse {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    fs::write(path, encode_idx(dims, data)?).map_err(|e| Error::io(path, e))
}

/// Builds a dataset from parsed image and label arrays.
pub fn dataset_from_idx(images: &Idx, labels: &Idx, num_classes: usize) -> Result<Dataset> {
    if images.magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!(
                "image file magic {:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
                images.magic
            ),
        });
    }
    if labels.magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!(
                "label file magic {:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
                labels.magic
            ),
        });
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(invalid!("{n} images but {} labels", labels.dims[0]));
    }
    let plane = h * w;
    let images = (0..n)
        .map(|i| {
            let px = images.data[i * plane..(i + 1) * plane]
                .iter()
                .map(|&b| f64::from(b))
                .collect();
            LabeledImage::new(h, w, px, labels.data[i] as usize, num_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(images))
}

/// Loads an MNIST-style image/label pair (plain or gzipped IDX), ten classes.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    dataset_from_idx(&read_idx(images_path)?, &read_idx(labels_path)?, 10)
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Writes images and labels as IDX; pixels are rounded to bytes.
pub fn save_mnist_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w) = ds
        .dims()
        .ok_or_else(|| invalid!("cannot write an empty dataset"))?;
    let pixels: Vec<u8> = ds
        .images
        .iter()
        .flat_map(|i| i.pixels.iter().map(|&p| to_byte(p)))
        .collect();
    let labels: Vec<u8> = ds.images.iter().map(|i| i.label as u8).collect();
    write_idx(images_path, &[ds.len(), h, w], &pixels)?;
    write_idx(labels_path, &[ds.len()], &labels)
}

/// Writes every image's mask as a 0/1 byte IDX array with the image layout.
pub fn save_masks(ds: &Dataset, path: &Path) -> Result<()> {
    let (h, w) = ds
        .dims()
        .ok_or_else(|| invalid!("cannot write an empty dataset"))?;
    let mut bytes = Vec::with_capacity(ds.len() * h * w);
    for (i, img) in ds.images.iter().enumerate() {
        let m = img
            .mask
            .as_ref()
            .ok_or_else(|| invalid!("image {i} has no mask"))?;
        bytes.extend(m.iter().map(|&v| u8::from(v != 0.0)));
    }
    write_idx(path, &[ds.len(), h, w], &bytes)
}

/// Attaches masks from a sidecar written by [`save_masks`].
pub fn load_masks(ds: &mut Dataset, path: &Path) -> Result<()> {
    let idx = read_idx(path)?;
    let (h, w) = ds.dims().ok_or_else(|| invalid!("empty dataset"))?;
    if idx.dims != [ds.len(), h, w] {
        return Err(invalid!(
            "mask dims {:?} do not match dataset [{}, {h}, {w}]",
            idx.dims,
            ds.len()
        ));
    }
    for (i, img) in ds.images.iter_mut().enumerate() {
        img.mask = Some(
            idx.data[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&b| if b == 0 { 0.0 } else { 1.0 })
                .collect(),
        );
    }
    Ok(())
}

/// Encodes a binary PGM (P5, maxval 255). Values are rounded and clamped.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(invalid!(
            "PGM of {width}x{height} needs {} values",
            width * height
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes = encode_pgm(width, height, values)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
