//! Versioned checkpoint container.
//!
//! ```text
//! magic      8 bytes   "MODLABCK"
//! version    u32 LE
//! header_len u32 LE
//! header     UTF-8 JSON of ModelConfig (header_len bytes)
//! n_params   u64 LE
//! params     n_params × f32 LE, in ParamLayout order
//! ```

use std::path::Path;

use super::{Model, ModelConfig, ParamLayout};
use crate::error::{LabError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MODLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(model.config())?;
    let mut buf = Vec::with_capacity(24 + header.len() + 4 * model.params().len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let fail = |reason: String| LabError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(at..at + n)
            .ok_or_else(|| fail(format!("truncated file ({} bytes)", bytes.len())))?;
        at += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let header = take(hlen)?;
    let header = std::str::from_utf8(header).map_err(|_| fail("header is not UTF-8".into()))?;
    let cfg: ModelConfig =
        serde_json::from_str(header).map_err(|e| fail(format!("bad header: {e}")))?;
    cfg.validate().map_err(|e| fail(e.to_string()))?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let expected = ParamLayout::new(&cfg).total;
    if n != expected {
        return Err(fail(format!(
            "shape mismatch: header implies {expected} parameters, file declares {n}"
        )));
    }
    let raw = take(4 * n)?;
    let params: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if at != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - at)));
    }
    Model::from_params(cfg, params)
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f32> {
        Model::init(ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 16,
            rotary_base: 10_000.0,
            init_seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let m = model();
        save_checkpoint(&m, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, m);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        let good = encode(&model()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic, p).unwrap_err().to_string().contains("magic"));

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(decode(&bad_version, p).unwrap_err().to_string().contains("version"));

        let truncated = &good[..good.len() - 3];
        assert!(decode(truncated, p).unwrap_err().to_string().contains("truncated"));

        let mut extra = good.clone();
        extra.push(0);
        assert!(decode(&extra, p).unwrap_err().to_string().contains("trailing"));

        // Declared count disagrees with the header's shapes.
        let hlen = u32::from_le_bytes(good[12..16].try_into().unwrap()) as usize;
        let mut bad_count = good.clone();
        bad_count[16 + hlen] ^= 1;
        assert!(decode(&bad_count, p).unwrap_err().to_string().contains("shape mismatch"));
    }
}
