//! IDX binary files (the MNIST distribution format).
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for `u8` image cubes,
//! `0x00000801` for `u8` label vectors), one big-endian `u32` per
//! dimension, then the raw bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// One row-major `rows × cols` image per entry, scaled to `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: "truncated header".into(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        self.bytes
            .get(self.pos..self.pos + len)
            .ok_or_else(|| Error::Format {
                offset: self.bytes.len() as u64,
                message: format!(
                    "truncated body: expected {len} bytes after offset {}",
                    self.pos
                ),
            })
    }
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}"),
        });
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let px = rows * cols;
    let body = r.body(n * px)?;
    let images = body
        .chunks_exact(px.max(1))
        .take(n)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = r.u32()? as usize;
    let body = r.body(n)?;
    if let Some(i) = body.iter().position(|&l| l > 9) {
        return Err(Error::Format {
            offset: (r.pos + i) as u64,
            message: format!("label {} outside 0-9", body[i]),
        });
    }
    Ok(body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an image file and its label file; counts must agree.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxImages> {
    let (rows, cols, images) = parse_images(&read(images_path.as_ref())?)?;
    let labels = parse_labels(&read(labels_path.as_ref())?)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "image count {} does not match label count {}",
                images.len(),
                labels.len()
            ),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        images,
        labels,
    })
}

/// Writes raw `u8` images in IDX form.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}
