//! Parameter-store serialization.
//!
//! Layout: magic bytes `NRMLAB01`, then for every named parameter in name
//! order: name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE
//! each), payload (f32 LE). No alignment padding. Training math runs in
//! `f64`; storage rounds through `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

const MAGIC: &[u8; 8] = b"NRMLAB01";

pub fn save<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(MAGIC);
    for (name, entry) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = entry.tensor.shape();
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(std::fs::write(path, out)?)
}

struct Reader {
    bytes: Vec<u8>,
    at: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated checkpoint: need {n} bytes for {what} at offset {}", self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_entries<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor4<S>)>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint file (bad magic)".to_string()));
    }
    let mut entries = Vec::new();
    while r.at < r.bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let at = r.at;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at as u64, "parameter name is not UTF-8".to_string()))?
            .to_string();
        let at = r.at;
        let rank = r.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::format(at as u64, format!("rank {rank} outside 1..=4")));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32("dim")? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            let b = r.take(4, "payload value")?;
            data.push(S::cast(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64));
        }
        entries.push((name, Tensor4::from_vec(shape, data)?));
    }
    Ok(entries)
}

/// Read a checkpoint into a fresh store. Trainability is not serialized, so
/// every entry comes back frozen; use [`load_into`] to restore a built model.
pub fn load<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let mut store = ParamStore::new();
    for (name, tensor) in read_entries(path)? {
        store.insert(&name, tensor, false)?;
    }
    Ok(store)
}

/// Copy checkpoint values into an existing store, keeping its trainability
/// flags. Names and shapes must match exactly in both directions.
pub fn load_into<S: Scalar>(path: &Path, store: &mut ParamStore<S>) -> Result<()> {
    let entries = read_entries::<S>(path)?;
    if entries.len() != store.len() {
        return Err(Error::Usage(format!(
            "checkpoint holds {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, tensor) in &entries {
        let entry = store
            .get(name)
            .map_err(|_| Error::Usage(format!("checkpoint parameter '{name}' unknown to model")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Usage(format!(
                "shape mismatch for '{name}': checkpoint {}, model {}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
    }
    for (name, tensor) in entries {
        store.get_mut(&name)?.tensor = tensor.requires_grad(store.get(&name)?.trainable);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvNet, ConvNetSpec};
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_values_at_f32_precision() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        let net = ConvNet::<f64>::build(ConvNetSpec::compact(2, (3, 8, 8)), 5).unwrap();
        save(&net.params, &p).unwrap();

        let mut other = ConvNet::<f64>::build(ConvNetSpec::compact(2, (3, 8, 8)), 6).unwrap();
        load_into(&p, &mut other.params).unwrap();
        for (name, entry) in net.params.iter() {
            let restored = other.params.tensor(name).unwrap();
            assert_eq!(entry.trainable, other.params.get(name).unwrap().trainable);
            for (a, b) in entry.tensor.data().iter().zip(restored.data()) {
                assert_eq!(*a as f32, *b as f32, "{name}");
            }
        }

        let frozen = load::<f64>(&p).unwrap();
        assert_eq!(frozen.len(), net.params.len());
        assert_eq!(frozen.trainable_len(), 0);
    }

    #[test]
    fn strict_matching_rejects_other_architectures() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        let net = ConvNet::<f64>::build(ConvNetSpec::compact(2, (3, 8, 8)), 5).unwrap();
        save(&net.params, &p).unwrap();
        let mut other = ConvNet::<f64>::build(ConvNetSpec::compact(2, (3, 16, 16)), 5).unwrap();
        assert!(matches!(load_into(&p, &mut other.params), Err(Error::Usage(_))));
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"NOTMAGIC").unwrap();
        match load::<f64>(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let p = dir.path().join("net.ckpt");
        let net = ConvNet::<f64>::build(ConvNetSpec::compact(2, (3, 8, 8)), 5).unwrap();
        save(&net.params, &p).unwrap();
        let full = std::fs::read(&p).unwrap();
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &full[..full.len() - 3]).unwrap();
        assert!(matches!(load::<f64>(&trunc), Err(Error::Format { .. })));
    }

    #[test]
    fn low_rank_entries_fill_trailing_dims() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("lowrank.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        // "v": rank 1, dim 3
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'v');
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        // "m": rank 2, dims 2×2
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'm');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [4.0f32, 5.0, 6.0, 7.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();

        let store = load::<f64>(&p).unwrap();
        assert_eq!(store.tensor("v").unwrap().shape(), Shape4::new(3, 1, 1, 1));
        assert_eq!(store.tensor("m").unwrap().shape(), Shape4::matrix(2, 2));
        assert_eq!(store.tensor("m").unwrap().data(), &[4.0, 5.0, 6.0, 7.0]);
    }
}
