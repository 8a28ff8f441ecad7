//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `TCIPCKPT`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then every parameter's values as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use tcip_core::model::NetworkConfig;
use tcip_core::{ParamStore, Shape5, Tensor5};

pub const MAGIC: &[u8; 8] = b"TCIPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    path: String,
    shape: Shape5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    network: NetworkConfig,
    /// Padded input grid the parameters were trained on.
    grid_dims: [usize; 3],
    params: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub grid_dims: [usize; 3],
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            network: self.network,
            grid_dims: self.grid_dims,
            params: self
                .params
                .iter()
                .map(|(path, p)| Entry {
                    path: path.to_string(),
                    shape: p.value.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        ensure!(bytes.len() >= 12 && &bytes[..8] == MAGIC, "not a checkpoint: bad magic");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).context("checkpoint header truncated")?;
        let header: Header = serde_json::from_slice(body).context("malformed checkpoint header")?;
        if header.format_version != FORMAT_VERSION {
            bail!("unsupported checkpoint version {}", header.format_version);
        }
        let mut params = ParamStore::new();
        let mut data = &bytes[12 + hlen..];
        for e in header.params {
            let n = e.shape.numel();
            let need = n.checked_mul(8).context("parameter size overflow")?;
            ensure!(data.len() >= need, "checkpoint payload truncated at `{}`", e.path);
            let values = data[..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[need..];
            params.insert(e.path, Tensor5::from_vec(e.shape, values)?)?;
        }
        ensure!(data.is_empty(), "{} trailing bytes after the last parameter", data.len());
        Ok(Checkpoint {
            network: header.network,
            grid_dims: header.grid_dims,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    /// Fails unless `dims`, padded to the pyramid multiple, equals the grid
    /// the checkpoint was trained on.
    pub fn check_grid(&self, dims: [usize; 3]) -> anyhow::Result<()> {
        let padded = tcip_core::volume::padded_dims(dims, tcip_core::encoder::PYRAMID_DIVISOR);
        ensure!(
            padded == self.grid_dims,
            "input dims {dims:?} pad to {padded:?}, but the checkpoint was trained on a {:?} grid",
            self.grid_dims
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tcip_core::model;

    fn ckpt() -> Checkpoint {
        let network = NetworkConfig::default();
        Checkpoint {
            network,
            grid_dims: [32; 3],
            params: model::init_params(&network, 4).unwrap(),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.network, c.network);
        assert_eq!(back.grid_dims, c.grid_dims);
        for ((pa, a), (pb, b)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_inputs_fail() {
        let bytes = ckpt().to_bytes();
        assert!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn grid_check() {
        let c = ckpt();
        assert!(c.check_grid([32, 32, 32]).is_ok());
        assert!(c.check_grid([30, 31, 33]).is_err());
        assert!(c.check_grid([30, 31, 17]).is_ok());
        assert!(c.check_grid([48, 32, 32]).is_err());
    }
}
