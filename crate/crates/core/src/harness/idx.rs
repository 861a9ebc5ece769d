//! IDX tensors (unsigned-byte images and labels).

use std::fs;
use std::path::Path;

use crate::error::{Result, SengError};
use crate::optimizer::{Dataset, TargetData};

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

impl IdxKind {
    fn magic(self) -> u32 {
        match self {
            IdxKind::Images => MAGIC_IMAGES,
            IdxKind::Labels => MAGIC_LABELS,
        }
    }

    fn rank(self) -> usize {
        match self {
            IdxKind::Images => 3,
            IdxKind::Labels => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub kind: IdxKind,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxTensor {
    pub fn new(kind: IdxKind, dims: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        if dims.len() != kind.rank() {
            return Err(SengError::Parameter(format!(
                "{kind:?} need {} dimensions, got {}",
                kind.rank(),
                dims.len()
            )));
        }
        let len: usize = dims.iter().product();
        if len != bytes.len() {
            return Err(SengError::Parameter(format!(
                "dimensions {dims:?} hold {len} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(Self { kind, dims, bytes })
    }

    /// Values scaled to `[0, 1]`.
    pub fn to_unit_floats(&self) -> Vec<f64> {
        self.bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    /// First-dimension entries, each flattened.
    pub fn items(&self) -> usize {
        self.dims[0]
    }
}

fn read_u32(buf: &[u8], at: usize) -> Result<u32> {
    let word = buf.get(at..at + 4).ok_or_else(|| SengError::Format {
        offset: buf.len(),
        message: format!("file ends inside the header field at byte {at}"),
    })?;
    Ok(u32::from_be_bytes(word.try_into().expect("four bytes")))
}

pub fn parse_idx(buf: &[u8]) -> Result<IdxTensor> {
    let magic = read_u32(buf, 0)?;
    let kind = match magic {
        MAGIC_IMAGES => IdxKind::Images,
        MAGIC_LABELS => IdxKind::Labels,
        other => {
            return Err(SengError::Format {
                offset: 0,
                message: format!("bad magic 0x{other:08x}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(kind.rank());
    for d in 0..kind.rank() {
        dims.push(read_u32(buf, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * kind.rank();
    let len: usize = dims.iter().product();
    let body = &buf[header..];
    if body.len() < len {
        return Err(SengError::Format {
            offset: buf.len(),
            message: format!("expected {len} data bytes after the header, found {}", body.len()),
        });
    }
    if body.len() > len {
        return Err(SengError::Format {
            offset: header + len,
            message: format!("{} trailing bytes", body.len() - len),
        });
    }
    IdxTensor::new(kind, dims, body.to_vec())
}

pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    let buf = fs::read(path).map_err(|e| SengError::Io(format!("{}: {e}", path.display())))?;
    parse_idx(&buf)
}

pub fn encode_idx(t: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.bytes.len());
    out.extend_from_slice(&t.kind.magic().to_be_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.bytes);
    out
}

pub fn write_idx(path: &Path, t: &IdxTensor) -> Result<()> {
    fs::write(path, encode_idx(t)).map_err(|e| SengError::Io(format!("{}: {e}", path.display())))
}

/// Flattened images in `[0, 1]` paired with class labels.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<(Dataset, usize)> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if img.kind != IdxKind::Images || lab.kind != IdxKind::Labels {
        return Err(SengError::Parameter(
            "expected an image file and a label file".into(),
        ));
    }
    if img.items() != lab.items() {
        return Err(SengError::Parameter(format!(
            "{} images but {} labels",
            img.items(),
            lab.items()
        )));
    }
    let per = img.dims[1] * img.dims[2];
    let floats = img.to_unit_floats();
    let inputs = floats.chunks(per.max(1)).map(<[f64]>::to_vec).collect();
    let classes = lab.bytes.iter().map(|&b| usize::from(b)).collect::<Vec<_>>();
    let k = classes.iter().max().map_or(0, |m| m + 1);
    Ok((Dataset::new(inputs, TargetData::Classes(classes))?, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crafted_four_images() {
        let mut buf = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 2];
        buf.extend((0u8..16).map(|v| v * 17));
        let t = parse_idx(&buf).unwrap();
        assert_eq!(t.dims, vec![4, 2, 2]);
        let f = t.to_unit_floats();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[15], 1.0);
    }

    #[test]
    fn wrong_magic() {
        let buf = [0, 0, 8, 2, 0, 0, 0, 1, 0];
        assert!(matches!(parse_idx(&buf), Err(SengError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_body_reports_offset() {
        let buf = [0, 0, 8, 1, 0, 0, 0, 5, 1, 2];
        match parse_idx(&buf) {
            Err(SengError::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(SengError::Format { .. })));
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bytes: Vec<u8> = (0..3 * 5 * 7).map(|_| rng.random()).collect();
        let t = IdxTensor::new(IdxKind::Images, vec![3, 5, 7], bytes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.idx");
        write_idx(&p, &t).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw, encode_idx(&t));
        let back = load_idx(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_idx(&back), raw);
    }
}
