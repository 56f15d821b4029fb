//! Canonical encoding and SHA-256 chain digests.
//!
//! Canonical bytes are bincode's fixed-width little-endian encoding: fields in
//! declaration order, every integer at its declared width, every sequence and
//! string prefixed by a `u64` length. All maps and sets that reach this
//! encoder are `BTree*`, so iteration order is fixed.

use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

pub const DIGEST_ALGORITHM: &str = "sha256";

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    /// `H(prev || bytes)`
    pub fn chain(prev: &Digest, bytes: &[u8]) -> Digest {
        let mut h = Sha256::new();
        h.update(prev.0);
        h.update(bytes);
        Digest(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&self.to_hex())
        } else {
            self.0.serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        if d.is_human_readable() {
            let s = String::deserialize(d)?;
            let bytes = hex::decode(&s).map_err(de::Error::custom)?;
            let arr: [u8; 32] = bytes
                .try_into()
                .map_err(|_| de::Error::custom("digest must be 32 bytes"))?;
            Ok(Digest(arr))
        } else {
            Ok(Digest(<[u8; 32]>::deserialize(d)?))
        }
    }
}

/// Canonical bytes of any serializable value.
pub fn canonical<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    // Serialization into a Vec only fails for types serde cannot express in
    // bincode (maps with non-string keys are fine; `deserialize_any` is not
    // involved on this side), so a failure here is a programming error.
    bincode::serialize(value).expect("value has a canonical encoding")
}

/// Decodes canonical bytes, refusing to allocate more than the input length.
pub fn decode_canonical<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T, bincode::Error> {
    use bincode::Options;
    bincode::DefaultOptions::new()
        .with_fixint_encoding()
        .with_little_endian()
        .with_limit(bytes.len() as u64 + 64)
        .reject_trailing_bytes()
        .deserialize(bytes)
}
