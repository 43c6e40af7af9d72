//! Reader for the big-endian IDX files MNIST is distributed in.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::data::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// One `rows * cols` vector per image, pixels scaled to [0, 1].
    pub pixels: Vec<f64>,
    pub count: usize,
}

fn header(cur: &mut Cursor<&[u8]>, magic: u32, what: &str) -> Result<()> {
    let found = cur.read_u32::<BigEndian>().map_err(|_| Error::Idx(format!("{what}: truncated header")))?;
    if found != magic {
        return Err(Error::Idx(format!("{what}: magic {found:#010x}, expected {magic:#010x}")));
    }
    Ok(())
}

fn dim(cur: &mut Cursor<&[u8]>, what: &str) -> Result<usize> {
    cur.read_u32::<BigEndian>().map(|v| v as usize).map_err(|_| Error::Idx(format!("{what}: truncated header")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor::new(bytes);
    header(&mut cur, IMAGE_MAGIC, "images")?;
    let count = dim(&mut cur, "images")?;
    let rows = dim(&mut cur, "images")?;
    let cols = dim(&mut cur, "images")?;
    let need = count * rows * cols;
    let mut raw = Vec::with_capacity(need);
    cur.take(need as u64).read_to_end(&mut raw)?;
    if raw.len() != need {
        return Err(Error::Idx(format!("images: expected {need} pixel bytes, found {}", raw.len())));
    }
    let pixels = raw.into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(IdxImages { rows, cols, pixels, count })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(bytes);
    header(&mut cur, LABEL_MAGIC, "labels")?;
    let count = dim(&mut cur, "labels")?;
    let mut raw = Vec::with_capacity(count);
    cur.take(count as u64).read_to_end(&mut raw)?;
    if raw.len() != count {
        return Err(Error::Idx(format!("labels: expected {count} bytes, found {}", raw.len())));
    }
    Ok(raw.into_iter().map(usize::from).collect())
}

/// Loads an image/label file pair into a flat dataset (one feature per pixel).
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = parse_idx_images(&fs::read(images)?)?;
    let lab = parse_idx_labels(&fs::read(labels)?)?;
    if img.count != lab.len() {
        return Err(Error::Idx(format!("{} images but {} labels", img.count, lab.len())));
    }
    Dataset::new(img.rows * img.cols, img.pixels, lab)
}
