//! `.rcb` codebook files.
//!
//! ```text
//! "RCBK"                 4 bytes
//! version                u32 LE
//! header length          u32 LE
//! header                 JSON {model_id, thresholds, k_pool, n, d}
//! payload                n x d float32 LE, row-major
//! crc32(payload)         u32 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RedundancyCodebook, Thresholds};
use crate::corpus::{decode_f32, encode_f32};
use crate::error::{Error, Result};
use crate::numerics::TokenMatrix;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"RCBK";
pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model_id: String,
    thresholds: Thresholds,
    k_pool: usize,
    n: usize,
    d: usize,
}

pub fn encode_codebook(cb: &RedundancyCodebook) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model_id: cb.model_id.clone(),
        thresholds: cb.thresholds,
        k_pool: cb.k_pool,
        n: cb.prototypes.rows(),
        d: cb.prototypes.dim(),
    })
    .map_err(|e| Error::InvalidInput(format!("codebook header: {e}")))?;
    let payload = encode_f32(cb.prototypes.as_slice());
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::CorruptStore(format!("codebook truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let raw = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
}

pub fn decode_codebook(mut bytes: &[u8]) -> Result<RedundancyCodebook> {
    if take(&mut bytes, 4, "magic")? != CODEBOOK_MAGIC {
        return Err(Error::CorruptStore(
            "not a codebook file (bad magic)".into(),
        ));
    }
    let version = take_u32(&mut bytes, "version")?;
    if version != CODEBOOK_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = take_u32(&mut bytes, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len, "header")?)
        .map_err(|e| Error::CorruptStore(format!("codebook header: {e}")))?;
    let payload_len = header
        .n
        .checked_mul(header.d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::CorruptStore("codebook shape overflows".into()))?;
    let payload = take(&mut bytes, payload_len, "payload")?;
    let crc = take_u32(&mut bytes, "checksum")?;
    if !bytes.is_empty() {
        return Err(Error::CorruptStore(format!(
            "{} trailing bytes after the checksum",
            bytes.len()
        )));
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::CorruptStore(
            "codebook payload checksum mismatch".into(),
        ));
    }
    let prototypes = TokenMatrix::new(header.n, header.d, decode_f32(payload))
        .map_err(|e| Error::CorruptStore(format!("codebook payload: {e}")))?;
    Ok(RedundancyCodebook {
        prototypes,
        model_id: header.model_id,
        thresholds: header.thresholds,
        k_pool: header.k_pool,
        format_version: version,
    })
}

pub fn save_codebook(cb: &RedundancyCodebook, path: &Path) -> Result<()> {
    fs::write(path, encode_codebook(cb)?).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: &Path) -> Result<RedundancyCodebook> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codebook(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Profile;
    use proptest::prelude::*;

    fn codebook(n: usize, d: usize, seed: u64) -> RedundancyCodebook {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        RedundancyCodebook::new(
            TokenMatrix::new(n, d, data).unwrap(),
            "toy-model",
            Profile::Reference.thresholds(),
            64,
        )
    }

    #[test]
    fn file_round_trip() {
        let cb = codebook(7, 5, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.rcb");
        save_codebook(&cb, &path).unwrap();
        let back = load_codebook(&path).unwrap();
        assert_eq!(back, cb);
        let bits = |c: &RedundancyCodebook| {
            c.prototypes
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&cb));
    }

    #[test]
    fn payload_corruption_is_detected() {
        let cb = codebook(3, 4, 2);
        let mut bytes = encode_codebook(&cb).unwrap();
        let payload_start = bytes.len() - 4 - 3 * 4 * 4;
        bytes[payload_start + 5] ^= 0x01;
        assert!(matches!(
            decode_codebook(&bytes),
            Err(Error::CorruptStore(_))
        ));
    }

    #[test]
    fn version_and_truncation() {
        let cb = codebook(2, 2, 3);
        let bytes = encode_codebook(&cb).unwrap();
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_codebook(&v2),
            Err(Error::UnsupportedVersion(2))
        ));
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                decode_codebook(&bytes[..cut]),
                Err(Error::CorruptStore(_))
            ));
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode_codebook(&magic),
            Err(Error::CorruptStore(_))
        ));
    }

    #[test]
    fn header_records_thresholds() {
        let cb = codebook(1, 3, 4);
        let bytes = encode_codebook(&cb).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(header["thresholds"]["tau_jsd"], 2e-3);
        assert_eq!(header["n"], 1);
        assert_eq!(header["d"], 3);
    }

    proptest! {
        #[test]
        fn any_codebook_round_trips(n in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
            let cb = codebook(n, d, seed);
            prop_assert_eq!(decode_codebook(&encode_codebook(&cb).unwrap()).unwrap(), cb);
        }
    }
}
