//! IDX files as used by MNIST: a big-endian magic number (`0x0803` for
//! images, `0x0801` for labels), the dimension sizes as big-endian `u32`,
//! then unsigned bytes.

use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use gatenas_core::data::Dataset;
use gatenas_core::Tensor;

use crate::{fsutil, Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as `(N, rows, cols)` plus the raw pixel bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn format_err(file: &str, offset: u64, message: String) -> Error {
    Error::Format { file: file.into(), offset, message }
}

fn header(bytes: &[u8], file: &str, magic: u32, dims: usize) -> Result<(Vec<usize>, usize)> {
    let mut cur = Cursor::new(bytes);
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(format_err(file, bytes.len() as u64, format!("truncated header: need {need} bytes, file has {}", bytes.len())));
    }
    let found = cur.read_u32::<BigEndian>().expect("length checked");
    if found != magic {
        return Err(format_err(file, 0, format!("bad magic: expected {magic:#010x}, found {found:#010x}")));
    }
    let sizes = (0..dims).map(|_| cur.read_u32::<BigEndian>().expect("length checked") as usize).collect();
    Ok((sizes, need))
}

pub fn parse_images(bytes: &[u8], file: &str) -> Result<IdxImages> {
    let (dims, start) = header(bytes, file, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let len = count * rows * cols;
    if bytes.len() < start + len {
        return Err(format_err(
            file,
            bytes.len() as u64,
            format!("truncated pixel data: header promises {count} images of {rows}x{cols} ({} bytes)", start + len),
        ));
    }
    if bytes.len() > start + len {
        return Err(format_err(file, (start + len) as u64, String::from("trailing bytes after pixel data")));
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[start..].to_vec() })
}

pub fn parse_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let (dims, start) = header(bytes, file, LABELS_MAGIC, 1)?;
    let count = dims[0];
    if bytes.len() < start + count {
        return Err(format_err(
            file,
            bytes.len() as u64,
            format!("truncated label data: header promises {count} labels ({} bytes)", start + count),
        ));
    }
    if bytes.len() > start + count {
        return Err(format_err(file, (start + count) as u64, String::from("trailing bytes after label data")));
    }
    Ok(bytes[start..].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label file pair as `(N, 1, H, W)` images scaled to [0, 1].
/// `limit` keeps only the leading samples.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: usize, limit: Option<usize>) -> Result<Dataset> {
    let image_file = images_path.display().to_string();
    let label_file = labels_path.display().to_string();
    let images = parse_images(&fsutil::read(images_path)?, &image_file)?;
    let labels = parse_labels(&fsutil::read(labels_path)?, &label_file)?;
    if images.count != labels.len() {
        return Err(format_err(
            &label_file,
            4,
            format!("count mismatch: {} images in {image_file} but {} labels", images.count, labels.len()),
        ));
    }
    if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
        return Err(format_err(&label_file, 8 + i as u64, format!("label {} out of range for {num_classes} classes", labels[i])));
    }
    let n = limit.map_or(images.count, |l| l.min(images.count));
    let hw = images.rows * images.cols;
    let data: Vec<f32> = images.pixels[..n * hw].iter().map(|&p| p as f32 / 255.0).collect();
    let tensor = Tensor::new(&[n, 1, images.rows, images.cols], data)?;
    Ok(Dataset::new(tensor, labels[..n].iter().map(|&l| l as u32).collect(), num_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors_carry_offsets() {
        let img = IdxImages { count: 2, rows: 2, cols: 3, pixels: (0..12).collect() };
        let bytes = encode_images(&img);
        assert_eq!(parse_images(&bytes, "f").unwrap(), img);
        let e = parse_images(&bytes[..20], "f").unwrap_err();
        assert!(e.to_string().starts_with("f: byte 20: truncated pixel data"), "{e}");
        let e = parse_labels(&bytes, "f").unwrap_err();
        assert_eq!(e.to_string(), "f: byte 0: bad magic: expected 0x00000801, found 0x00000803");
    }
}
