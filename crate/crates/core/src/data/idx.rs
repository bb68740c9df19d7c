//! MNIST-style IDX files: big-endian header, unsigned byte payload.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("file ends before {what} (need 4 bytes, {} left)", self.bytes.len() - self.pos),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {found:#010x}, expected {expected:#010x}"),
            });
        }
        Ok(())
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated {what}: expected {len} bytes from offset {}, found {available}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

/// `(count, rows, cols, pixels)` from an images file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            offset: 8,
            message: format!("image size {rows}x{cols} is empty"),
        });
    }
    let pixels = r.payload(count * rows * cols, &format!("image data ({count} images of {rows}x{cols})"))?;
    Ok((count, rows, cols, pixels.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    Ok(r.payload(count, &format!("label data ({count} labels)"))?.to_vec())
}

/// Images become `rows×cols×1` grids with bytes scaled by `1/255`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if labels.len() != count {
        return Err(Error::Format {
            offset: 4,
            message: format!("label file holds {} labels but image file holds {count} images", labels.len()),
        });
    }
    let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Dataset::new(
        vec![rows, cols, 1],
        pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        class_count,
    )
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::invalid(format!("{} bytes do not form {rows}x{cols} images", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Write a `[H, W, 1]` dataset as an images/labels file pair, quantizing
/// pixels to bytes.
pub fn write_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (rows, cols) = match data.sample_shape[..] {
        [r, c, 1] => (r, c),
        _ => return Err(Error::invalid(format!("IDX needs HxWx1 samples, got {:?}", data.sample_shape))),
    };
    if data.class_count > 256 {
        return Err(Error::invalid("IDX labels are single bytes"));
    }
    let pixels: Vec<u8> = data.inputs.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    fs::write(images, encode_idx_images(rows, cols, &pixels)?)?;
    let labels_bytes: Vec<u8> = data.labels.iter().map(|&l| l as u8).collect();
    fs::write(labels, encode_idx_labels(&labels_bytes))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_idx_images(2, 2, &[0, 0, 0, 255]).unwrap()).unwrap();
        fs::write(&lp, encode_idx_labels(&[3])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.sample_shape, vec![2, 2, 1]);
        assert_eq!(d.inputs, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.labels, vec![3]);
        assert_eq!(d.class_count, 4);
    }

    #[test]
    fn header_layout_is_big_endian() {
        let b = encode_idx_images(28, 28, &[0; 784]).unwrap();
        assert_eq!(&b[..16], &[0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 28, 0, 0, 0, 28]);
        assert_eq!(&encode_idx_labels(&[7])[..], &[0, 0, 8, 1, 0, 0, 0, 1, 7]);
    }

    #[test]
    fn truncated_images_name_offset() {
        let mut b = encode_idx_images(2, 2, &[1; 40]).unwrap();
        // claims 10 images, stores 9
        b.truncate(16 + 36);
        let err = parse_idx_images(&b).unwrap_err();
        match err {
            Error::Format { offset, ref message } => {
                assert_eq!(offset, 52);
                assert!(message.contains("40") && message.contains("36"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_magic_and_short_header() {
        let mut b = encode_idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&b), Err(Error::Format { offset: 0, .. })));
        b[3] = 9;
        assert!(matches!(parse_idx_labels(&b), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8, 1, 0]), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_idx_images(1, 1, &[0, 1]).unwrap()).unwrap();
        fs::write(&lp, encode_idx_labels(&[0])).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("offset 4"), "{err}");
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let d = Dataset::new(vec![1, 2, 1], vec![0.0, 1.0, 0.2, 0.6], vec![1, 0], 2).unwrap();
        write_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, d.labels);
        for (a, b) in back.inputs.iter().zip(&d.inputs) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
