//! Versioned binary checkpoints for [`ParameterSet`]s.
//!
//! Layout: the magic line `TCKPT1\n`, a little-endian `u64` header length, a
//! JSON header (scalar tag, caller metadata, entry names and shapes, SHA-256
//! of the payload), then every value as a little-endian `f64` in entry order.
//! Values widen to `f64` on write, so `f32` and `f64` both round-trip exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParameterSet, Tensor};

pub const MAGIC: &[u8] = b"TCKPT1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    scalar: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
    digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes<S: Scalar>(params: &ParameterSet<S>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(params.num_weights() * 8);
    for (_, t) in params.iter() {
        for v in &t.data {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let header = Header {
        scalar: S::NAME.to_string(),
        meta: meta.clone(),
        entries: params
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        digest: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(ParameterSet<S>, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing TCKPT1 magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.scalar != S::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} weights, expected {}",
            header.scalar,
            S::NAME
        )));
    }
    let payload = &rest[hlen..];
    if hex::encode(Sha256::digest(payload)) != header.digest {
        return Err(bad("payload digest mismatch"));
    }
    let expected: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(bad("payload size does not match entry shapes"));
    }
    let mut params = ParameterSet::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    for e in header.entries {
        let n = e.shape.iter().product();
        let data: Vec<S> = values.by_ref().take(n).collect();
        if params.contains(&e.name) {
            return Err(Error::Checkpoint(format!("duplicate entry `{}`", e.name)));
        }
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((params, header.meta))
}

pub fn save<S: Scalar>(path: &Path, params: &ParameterSet<S>, meta: &serde_json::Value) -> Result<()> {
    let bytes = to_bytes(params, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<(ParameterSet<S>, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParameterSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParameterSet::new();
        p.insert_xavier("model.w", 3, 4, &mut rng);
        p.insert_normal("model.emb", 5, 2, 0.02, &mut rng);
        p.insert_const("model.b", vec![4], 0.0);
        p
    }

    #[test]
    fn tampered_magic_rejected() {
        let mut bytes = to_bytes(&sample_params(), &serde_json::json!({})).unwrap();
        bytes[5] = b'9';
        assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn tampered_payload_rejected() {
        let mut bytes = to_bytes(&sample_params(), &serde_json::json!({})).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn f32_weights_round_trip() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("x", Tensor::new(vec![3], vec![0.1, -3.5e-7, 1e30]).unwrap());
        let bytes = to_bytes(&p, &serde_json::Value::Null).unwrap();
        let (q, _) = from_bytes::<f32>(&bytes).unwrap();
        assert!(p.values_eq(&q));
        assert!(from_bytes::<f64>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut p = ParameterSet::<f64>::new();
            let n = values.len();
            p.insert("a", Tensor::new(vec![n], values.clone()).unwrap());
            p.insert("b", Tensor::new(vec![1, n], values.iter().map(|v| -v).collect()).unwrap());
            let meta = serde_json::json!({"k": 1});
            let (q, m) = from_bytes::<f64>(&to_bytes(&p, &meta).unwrap()).unwrap();
            prop_assert_eq!(m, meta);
            for ((na, ta), (nb, tb)) in p.iter().zip(q.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(&ta.shape, &tb.shape);
                let bits_a: Vec<u64> = ta.data.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
