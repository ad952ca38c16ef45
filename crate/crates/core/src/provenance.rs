//! Content hashing and seed derivation shared by every persisted artifact.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the compact JSON encoding of `value`. Struct field order is
/// fixed by the type and maps are ordered, so the digest is stable.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(sha256_hex(&bytes))
}

/// SplitMix64 finalizer applied to `base ^ stream`. Used to fan a single
/// experiment seed out into independent per-member and per-stage seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes the `# config_sha256=...` comment line that leads every CSV artifact.
pub fn write_hash_comment<W: Write>(w: &mut W, config_hash: Option<&str>) -> Result<()> {
    if let Some(h) = config_hash {
        writeln!(w, "# config_sha256={h}")?;
    }
    Ok(())
}
