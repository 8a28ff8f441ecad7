//! On-disk volumes: a JSON sidecar `{stem}.json` describing a little-endian
//! z-major payload `{stem}.raw`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcip_core::{DeformationField, LabelVolume, Shape5, Tensor5, Volume};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: payload holds {actual} bytes, header implies {expected}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: dims {dims:?} x {channels} channels overflow the addressable size")]
    DimensionOverflow { path: PathBuf, dims: [u64; 3], channels: u64 },
    #[error("{path}: expected dtype {expected:?} with {expected_channels} channel(s), found {found:?} with {found_channels}")]
    DtypeMismatch {
        path: PathBuf,
        expected: Dtype,
        expected_channels: usize,
        found: Dtype,
        found_channels: usize,
    },
    #[error("{path}: {source}")]
    Content {
        path: PathBuf,
        #[source]
        source: tcip_core::Error,
    },
}

pub type IoResult<T> = std::result::Result<T, IoError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    fn width(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrder {
    Little,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: [u64; 3],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub byte_order: ByteOrder,
    #[serde(default = "one")]
    pub channels: usize,
}

/// Sidecar and payload paths for a stem (any extension on it is dropped).
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn content_err(path: &Path) -> impl FnOnce(tcip_core::Error) -> IoError + '_ {
    move |source| IoError::Content {
        path: path.to_path_buf(),
        source,
    }
}

fn write(stem: &Path, header: &Header, payload: &[u8]) -> IoResult<()> {
    let (json, raw) = paths(stem);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(header).expect("header serialises");
    fs::write(&json, text + "\n").map_err(io_err(&json))?;
    fs::write(&raw, payload).map_err(io_err(&raw))
}

/// Reads and checks the sidecar, then the payload; returns the header,
/// the element count and the raw bytes.
fn read(stem: &Path, dtype: Dtype, channels: usize) -> IoResult<(Header, usize, Vec<u8>)> {
    let (json, raw) = paths(stem);
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| IoError::MalformedHeader {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    if header.channels == 0 || header.dims.contains(&0) {
        return Err(IoError::MalformedHeader {
            path: json,
            reason: format!("empty volume: dims {:?}, {} channel(s)", header.dims, header.channels),
        });
    }
    if header.dtype != dtype || header.channels != channels {
        return Err(IoError::DtypeMismatch {
            path: json,
            expected: dtype,
            expected_channels: channels,
            found: header.dtype,
            found_channels: header.channels,
        });
    }
    let overflow = || IoError::DimensionOverflow {
        path: json.clone(),
        dims: header.dims,
        channels: header.channels as u64,
    };
    let count = header
        .dims
        .iter()
        .try_fold(header.channels as u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(overflow)?;
    let expected = count.checked_mul(dtype.width()).ok_or_else(overflow)?;
    let count = usize::try_from(count).map_err(|_| overflow())?;
    usize::try_from(expected).map_err(|_| overflow())?;
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    if bytes.len() as u64 != expected {
        return Err(IoError::Truncated {
            path: raw,
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok((header, count, bytes))
}

fn dims_of(h: &Header) -> [usize; 3] {
    h.dims.map(|d| d as usize)
}

fn header(dims: [usize; 3], spacing: [f64; 3], dtype: Dtype, channels: usize) -> Header {
    Header {
        dims: dims.map(|d| d as u64),
        spacing,
        dtype,
        byte_order: ByteOrder::Little,
        channels,
    }
}

fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect()
}

pub fn save_volume(stem: &Path, v: &Volume) -> IoResult<()> {
    let h = header(v.dims(), v.spacing(), Dtype::F32, 1);
    write(stem, &h, &f32_bytes(v.data().iter().copied()))
}

pub fn load_volume(stem: &Path) -> IoResult<Volume> {
    let (h, _, bytes) = read(stem, Dtype::F32, 1)?;
    Volume::new(dims_of(&h), h.spacing, f32_values(&bytes)).map_err(content_err(&paths(stem).1))
}

pub fn save_labels(stem: &Path, v: &LabelVolume) -> IoResult<()> {
    let h = header(v.dims(), v.spacing(), Dtype::U16, 1);
    let payload: Vec<u8> = v.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    write(stem, &h, &payload)
}

pub fn load_labels(stem: &Path) -> IoResult<LabelVolume> {
    let (h, _, bytes) = read(stem, Dtype::U16, 1)?;
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelVolume::new(dims_of(&h), h.spacing, labels).map_err(content_err(&paths(stem).1))
}

/// Writes a full-resolution field as three f32 channels, channel-major.
pub fn save_field(stem: &Path, f: &DeformationField, spacing: [f64; 3]) -> IoResult<()> {
    let t = f.displacements();
    if t.shape().batch != 1 {
        return Err(IoError::Content {
            path: stem.to_path_buf(),
            source: tcip_core::Error::InvalidShape {
                op: "save_field",
                reason: format!("batched field {}", t.shape()),
            },
        });
    }
    let h = header(f.dims(), spacing, Dtype::F32, 3);
    write(stem, &h, &f32_bytes(t.data().iter().map(|&v| v as f32)))
}

pub fn load_field(stem: &Path) -> IoResult<DeformationField> {
    let (h, _, bytes) = read(stem, Dtype::F32, 3)?;
    let [d, hh, w] = dims_of(&h);
    let data = f32_values(&bytes).into_iter().map(f64::from).collect();
    let raw = paths(stem).1;
    let t = Tensor5::from_vec(Shape5::new(1, 3, d, hh, w), data).map_err(content_err(&raw))?;
    DeformationField::new(t, 0).map_err(content_err(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_extension_is_replaced() {
        let (j, r) = paths(Path::new("out/pair_000/fixed"));
        assert_eq!(j, Path::new("out/pair_000/fixed.json"));
        assert_eq!(r, Path::new("out/pair_000/fixed.raw"));
    }

    #[test]
    fn header_channels_default_to_one() {
        let h: Header =
            serde_json::from_str(r#"{"dims":[2,3,4],"spacing":[1,1,1],"dtype":"u16","byte_order":"little"}"#).unwrap();
        assert_eq!(h.channels, 1);
        assert_eq!(h.dtype, Dtype::U16);
    }

    #[test]
    fn big_endian_is_rejected_by_the_header_type() {
        let r: Result<Header, _> =
            serde_json::from_str(r#"{"dims":[2,3,4],"spacing":[1,1,1],"dtype":"f32","byte_order":"big"}"#);
        assert!(r.is_err());
    }
}
