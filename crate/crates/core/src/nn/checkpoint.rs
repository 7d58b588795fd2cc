//! `FRZD` checkpoint container.
//!
//! ```text
//! "FRZD" | u32 version=1 | u32 kind | u32 len, key=value config blob
//! u32 tensor count | per tensor: u16 name len, name, u8 rank, u32 dims[rank], f64 data
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::{ModelConfig, NetKind, Network};
use crate::binio::{decode_kv, encode_kv, kv_parse, Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FRZD";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelConfig {
    pub(crate) fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        Ok(Self {
            latent_dim: kv_parse(pairs, "latent_dim")?,
            image_size: kv_parse(pairs, "image_size")?,
            channels: kv_parse(pairs, "channels")?,
            g_blocks: kv_parse(pairs, "g_blocks")?,
            d_blocks: kv_parse(pairs, "d_blocks")?,
            g_width: kv_parse(pairs, "g_width")?,
            d_width: kv_parse(pairs, "d_width")?,
            conditional: kv_parse(pairs, "conditional")?,
            n_classes: kv_parse(pairs, "n_classes")?,
            embed_dim: kv_parse(pairs, "embed_dim")?,
        })
    }
}

impl Network {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.kind.code());
        let mut pairs = self.config.to_pairs();
        pairs.push(("extra", self.extra.to_string()));
        w.blob(&encode_kv(&pairs));
        let params: Vec<_> = self.params().collect();
        w.u32(params.len() as u32);
        for p in params {
            w.u16(p.name.len() as u16);
            w.bytes(p.name.as_bytes());
            w.u8(p.value.rank() as u8);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            w.f64s(p.value.data());
        }
        w.finish()
    }

    /// Parses a checkpoint; no network is returned unless every tensor is
    /// present, complete and shaped as the embedded config dictates.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let kind = NetKind::from_code(r.u32("kind")?)?;
        let pairs = decode_kv(&r.blob("config blob")?)?;
        let config = ModelConfig::from_pairs(&pairs)?;
        let extra: usize = kv_parse(&pairs, "extra")?;
        let mut net = Network::skeleton(kind, &config, extra)
            .map_err(|e| Error::Format(format!("embedded config rejected: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let expected = net.params().count();
        if count != expected {
            return Err(Error::Alignment(format!(
                "checkpoint has {count} tensors, architecture needs {expected}"
            )));
        }
        let mut seen = vec![false; expected];
        for i in 0..count {
            let ctx = format!("header of tensor #{i}");
            let name_len = r.u16(&ctx)? as usize;
            let name = r.utf8(name_len, &ctx)?;
            let ctx = format!("tensor {name:?}");
            let rank = r.u8(&ctx)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32(&ctx)? as usize);
            }
            let n: usize = dims.iter().product();
            let data = r.f64s(n, &ctx)?;
            let pos = net
                .params()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Alignment(format!("unexpected tensor {name:?}")))?;
            if seen[pos] {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
            seen[pos] = true;
            let param = net.params_mut().nth(pos).expect("position valid");
            if param.value.shape() != dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: param.value.shape().to_vec(),
                    found: dims,
                });
            }
            param.value.data_mut().copy_from_slice(&data);
        }
        r.finish()?;
        Ok(net)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
