//! Checkpoint serialization. Single binary file:
//!
//! ```text
//! magic  b"HRT1"
//! u64 LE len, then that many bytes of config JSON
//! u64 LE parameter count, then per parameter (declaration order):
//!     u64 LE name length, UTF-8 name
//!     u64 LE rows, u64 LE cols
//!     rows*cols f64 LE values, row-major
//! ```
//!
//! Round trips are bit-exact: f64 bits pass through untouched.

use crate::config::HrtConfig;
use crate::error::{HrtError, Result};
use crate::model::HrtModel;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HRT1";

pub fn save(model: &HrtModel, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    let params = model.params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in &params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        let (rows, cols) = p.var.shape();
        w.write_all(&(rows as u64).to_le_bytes())?;
        w.write_all(&(cols as u64).to_le_bytes())?;
        for &v in p.var.value().as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<HrtModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HrtError::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    if cfg_len > 1 << 24 {
        return Err(HrtError::Checkpoint(format!(
            "implausible config length {cfg_len}"
        )));
    }
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: HrtConfig = serde_json::from_slice(&cfg_bytes)?;
    let mut model = HrtModel::init(&config)?;

    let count = read_u64(&mut r)? as usize;
    let expected = model.params();
    if count != expected.len() {
        return Err(HrtError::Checkpoint(format!(
            "parameter count {count} does not match config ({} expected)",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for want in &expected {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(HrtError::Checkpoint(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| HrtError::Checkpoint(format!("non-UTF8 parameter name: {e}")))?;
        if name != want.name {
            return Err(HrtError::Checkpoint(format!(
                "parameter order mismatch: found {name:?}, expected {:?}",
                want.name
            )));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        if (rows, cols) != want.var.shape() {
            return Err(HrtError::Checkpoint(format!(
                "shape mismatch for {name:?}: ({rows}, {cols}) vs {:?}",
                want.var.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::from_vec(rows, cols, data));
    }
    model.set_params(tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ForwardCtx;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ctx() -> ForwardCtx {
        ForwardCtx::new(ChaCha20Rng::seed_from_u64(0), false)
    }

    #[test]
    fn round_trip_is_bit_exact_and_preserves_logits() {
        let cfg = HrtConfig {
            vocab_size: 11,
            max_len: 16,
            levels: 3,
            dims: vec![4, 8, 8],
            heads: 2,
            blocks_per_level: 1,
            dropout: 0.0,
            seed: 9,
            ..HrtConfig::default()
        };
        // init_random so no parameter is trivially zero.
        let model = HrtModel::init_random(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hrt");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            // Bit-exact comparison.
            for (x, y) in a.var.value().as_slice().iter().zip(b.var.value().as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let tokens = vec![vec![1usize, 5, 2, 8, 3, 9, 10, 0]];
        let out1 = model.forward(&tokens, &mut ctx()).unwrap();
        let out2 = loaded.forward(&tokens, &mut ctx()).unwrap();
        assert_eq!(
            out1.pooled.value().as_slice(),
            out2.pooled.value().as_slice()
        );
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.hrt");
        std::fs::write(&bad, b"NOPE").unwrap();
        assert!(matches!(
            load(&bad).unwrap_err(),
            HrtError::Checkpoint(_)
        ));

        let cfg = HrtConfig {
            vocab_size: 5,
            max_len: 4,
            levels: 1,
            dims: vec![4],
            heads: 2,
            blocks_per_level: 1,
            cross_resolution: false,
            ..HrtConfig::default()
        };
        let model = HrtModel::init(&cfg).unwrap();
        let good = dir.path().join("good.hrt");
        save(&model, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let trunc = dir.path().join("trunc.hrt");
        std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&trunc).is_err());
    }
}
