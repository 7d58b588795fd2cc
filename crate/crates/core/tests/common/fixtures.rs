//! Small models and deliberately corrupted archives.

use freezelab_core::data::{make_dataset, Dataset, DatasetSpec};
use freezelab_core::nn::{ModelConfig, Network};
use freezelab_core::rng::SplitMix64;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        image_size: 8,
        g_blocks: 3,
        d_blocks: 3,
        g_width: 8,
        d_width: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_pair(seed: u64) -> (Network, Network) {
    let cfg = tiny_model();
    let mut r = SplitMix64::new(seed);
    (
        Network::generator(&cfg, &mut r).unwrap(),
        Network::discriminator(&cfg, &mut r).unwrap(),
    )
}

pub fn tiny_dataset(n_classes: usize, per_class: usize, shift: f64, seed: u64) -> Dataset {
    let spec = DatasetSpec {
        n_classes,
        image_size: 8,
        shift,
        ..DatasetSpec::default()
    };
    make_dataset(&spec, per_class, seed).unwrap()
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Byte offset of the first tensor's dims in a checkpoint.
fn first_dims_offset(ckpt: &[u8]) -> usize {
    let blob_len = u32_at(ckpt, 12) as usize;
    let count_at = 16 + blob_len;
    let name_len = u16::from_le_bytes([ckpt[count_at + 4], ckpt[count_at + 5]]) as usize;
    count_at + 4 + 2 + name_len + 1
}

/// `(name, bytes, expected exit code)` corruptions of a valid checkpoint.
pub fn corrupted_checkpoints(valid: &[u8]) -> Vec<(&'static str, Vec<u8>, i32)> {
    let mut out = Vec::new();

    let mut b = valid.to_vec();
    b[0] = b'X';
    out.push(("bad magic", b, 4));

    let mut b = valid.to_vec();
    b[4..8].copy_from_slice(&7u32.to_le_bytes());
    out.push(("future version", b, 4));

    out.push(("truncated", valid[..valid.len() - 5].to_vec(), 4));
    out.push(("header only", valid[..10].to_vec(), 4));

    let mut b = valid.to_vec();
    b.extend_from_slice(&[0, 1, 2]);
    out.push(("trailing bytes", b, 4));

    let mut b = valid.to_vec();
    b[8..12].copy_from_slice(&99u32.to_le_bytes());
    out.push(("unknown kind", b, 4));

    // First dim shrunk to 1: the data still parses but the shape is wrong.
    let mut b = valid.to_vec();
    let at = first_dims_offset(&b);
    assert!(u32_at(&b, at) > 1, "fixture needs a leading dim above 1");
    b[at..at + 4].copy_from_slice(&1u32.to_le_bytes());
    let shrunk = {
        let count_at = 16 + u32_at(valid, 12) as usize;
        let name_len = u16::from_le_bytes([valid[count_at + 4], valid[count_at + 5]]) as usize;
        let rank = valid[count_at + 6 + name_len] as usize;
        let dims: Vec<usize> = (0..rank).map(|i| u32_at(valid, at + 4 * i) as usize).collect();
        let full: usize = dims.iter().product();
        let new = full / dims[0];
        let data_at = at + 4 * rank;
        let mut v = b[..data_at + 8 * new].to_vec();
        v.extend_from_slice(&valid[data_at + 8 * full..]);
        v
    };
    out.push(("tensor shape", shrunk, 3));

    let mut b = valid.to_vec();
    let count_at = 16 + u32_at(valid, 12) as usize;
    let count = u32_at(valid, count_at);
    b[count_at..count_at + 4].copy_from_slice(&(count + 1).to_le_bytes());
    out.push(("tensor count", b, 3));
    out
}

/// `(name, bytes, expected exit code)` corruptions of a valid dataset archive.
pub fn corrupted_datasets(valid: &[u8]) -> Vec<(&'static str, Vec<u8>, i32)> {
    let mut out = Vec::new();
    let mut b = valid.to_vec();
    b[..4].copy_from_slice(b"FRZD");
    out.push(("bad magic", b, 4));

    let mut b = valid.to_vec();
    b[4..8].copy_from_slice(&2u32.to_le_bytes());
    out.push(("future version", b, 4));

    out.push(("truncated", valid[..valid.len() - 1].to_vec(), 4));

    let mut b = valid.to_vec();
    b.push(0);
    out.push(("trailing bytes", b, 4));

    let text = String::from_utf8_lossy(valid).into_owned();
    let at = text.find("family=blobs").expect("family key");
    let mut b = valid.to_vec();
    b[at + 7..at + 12].copy_from_slice(b"stars");
    out.push(("unknown family", b, 4));
    out
}
