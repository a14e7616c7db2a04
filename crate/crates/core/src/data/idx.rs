//! IDX (MNIST-style) files: big-endian magic, big-endian u32 dims, u8 payload.
//! Images (magic `0x00000803`) are scaled to `[0, 1]` and replicated to three
//! channels; labels use magic `0x00000801`.

use std::path::Path;

use super::{Dataset, DatasetKind};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("byte offset {offset}"),
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(offset, "truncated header"))
}

/// Header dims and payload of an IDX buffer with the expected magic.
fn parse_header(bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(parse_err(0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let dims = (0..ndims)
        .map(|d| read_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    if bytes.len() < start + len {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: need {len} bytes after offset {start}"),
        ));
    }
    Ok((dims, &bytes[start..start + len]))
}

/// Parses an image buffer and a label buffer into a dataset.
pub fn parse_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = parse_header(images, IMAGES_MAGIC, 3)?;
    let (ldims, label_bytes) = parse_header(labels, LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(Error::Data(format!(
            "{n} images but {} labels",
            ldims[0]
        )));
    }
    if n == 0 {
        return Err(Error::Data("IDX files hold no examples".into()));
    }
    let plane = rows * cols;
    let mut features = Vec::with_capacity(n * 3 * plane);
    for img in pixels.chunks(plane) {
        for _ in 0..3 {
            features.extend(img.iter().map(|&p| p as f64 / 255.0));
        }
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(name, DatasetKind::Image, vec![3, rows, cols], features, labels, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let name = ip
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    parse_idx(&name, &images, &labels)
}
