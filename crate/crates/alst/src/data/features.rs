//! Frame-level feature files.
//!
//! Layout (little-endian throughout):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 0..8  | magic `ALSTF1\0\0`              |
//! | 8..12 | `u32` frame count               |
//! | 12..16| `u32` feature dimension         |
//! | 16..  | frame-major `f32` payload       |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"ALSTF1\0\0";
const HEADER_LEN: usize = 16;

/// `frames × dim` matrix of 20 ms frame features for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::Data(format!(
                "{frames}x{dim} feature matrix needs {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(FeatureMatrix { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        FeatureMatrix {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Data("ragged feature rows".into()));
        }
        FeatureMatrix::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (frames, dim) = parse_header(bytes, path)?;
        let expected = frames * dim * 4;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (HEADER_LEN + payload.len().min(expected)) as u64,
                detail: format!(
                    "expected {expected} payload bytes for {frames}x{dim} frames, found {}",
                    payload.len()
                ),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FeatureMatrix { frames, dim, data })
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    let format = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < FEATURE_MAGIC.len() || &bytes[..8] != FEATURE_MAGIC {
        return Err(format(0, "missing ALSTF1 magic header".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(format(12, "feature dimension is 0".into()));
    }
    Ok((frames, dim))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes, path)
}

/// Reads only the 16-byte header: `(frames, dim)`.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    Read::by_ref(&mut file)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf, path)
}

pub fn write_feature_file(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&features.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_hand_built_file() {
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let m = FeatureMatrix::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(m.frame(0), &[1.0, 2.0]);
        assert_eq!(m.frame(1), &[3.0, 4.0]);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let m = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = m.to_bytes();
        let err = FeatureMatrix::from_bytes(&bytes[..bytes.len() - 3], Path::new("t.alstf")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 16 payload bytes"), "{msg}");
        assert!(msg.contains("found 13"), "{msg}");
    }

    #[test]
    fn bad_magic_and_zero_dim() {
        let err = FeatureMatrix::from_bytes(b"NOTMAGIC\0\0\0\0\0\0\0\0", Path::new("b")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let err = FeatureMatrix::from_bytes(&bytes, Path::new("z")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 12, .. }));
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.alstf");
        let m = FeatureMatrix::new(3, 2, vec![0.1, -0.0, f32::MIN_POSITIVE, 7.5, 1e-30, -2.0]).unwrap();
        write_feature_file(&path, &m).unwrap();
        let back = read_feature_file(&path).unwrap();
        let bits = |m: &FeatureMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(read_feature_header(&path).unwrap(), (3, 2));
    }
}
