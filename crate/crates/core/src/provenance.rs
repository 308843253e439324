//! Point-of-capture hash registry: an imaging device registers the SHA-256
//! of every canonical image file it emits, and any later byte-level change
//! (including an imperceptible adversarial perturbation) fails verification.
//!
//! This defends file-layer integrity only; a patch applied in front of the
//! lens is part of the captured image and is out of reach by design.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    /// Lowercase hex SHA-256 of the canonical image file bytes.
    pub digest: String,
    /// Logical registration time: a monotonically increasing sequence
    /// number, so registry files are reproducible byte-for-byte.
    pub registered_at: u64,
    pub source: String,
}

/// Outcome of verifying bytes against the registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verification {
    Match,
    Tampered,
    Unknown,
}

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verification::Match => "match",
            Verification::Tampered => "tampered",
            Verification::Unknown => "unknown",
        })
    }
}

pub const REGISTRY_HEADER: &str = "image_id,hex_digest,timestamp,source";

/// Append-only map from image id to content digest.
#[derive(Clone, Debug, Default)]
pub struct HashRegistry {
    entries: BTreeMap<String, RegistryEntry>,
    next_timestamp: u64,
}

impl HashRegistry {
    pub fn new() -> Self {
        HashRegistry {
            entries: BTreeMap::new(),
            next_timestamp: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&RegistryEntry> {
        self.entries.get(image_id)
    }

    /// Stores the digest of `image_bytes` under `image_id`. Ids register
    /// once; digests never change afterwards.
    pub fn register(&mut self, image_id: &str, image_bytes: &[u8], source: &str) -> Result<()> {
        if self.entries.contains_key(image_id) {
            return Err(Error::AlreadyRegistered(image_id.to_string()));
        }
        self.entries.insert(
            image_id.to_string(),
            RegistryEntry {
                digest: sha256_hex(image_bytes),
                registered_at: self.next_timestamp,
                source: source.to_string(),
            },
        );
        self.next_timestamp += 1;
        Ok(())
    }

    /// Total: `Match` on digest equality, `Tampered` on mismatch, `Unknown`
    /// when the id was never registered.
    pub fn verify(&self, image_id: &str, image_bytes: &[u8]) -> Verification {
        match self.entries.get(image_id) {
            None => Verification::Unknown,
            Some(entry) if entry.digest == sha256_hex(image_bytes) => Verification::Match,
            Some(_) => Verification::Tampered,
        }
    }

    /// Renders rows in registration order (the append-only CSV form).
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&String, &RegistryEntry)> = self.entries.iter().collect();
        rows.sort_by_key(|(_, e)| e.registered_at);
        let mut out = String::from(REGISTRY_HEADER);
        out.push('\n');
        for (id, e) in rows {
            out.push_str(&format!("{id},{},{},{}\n", e.digest, e.registered_at, e.source));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == REGISTRY_HEADER => {}
            other => {
                return Err(Error::MalformedManifest(format!(
                    "bad registry header {other:?}"
                )))
            }
        }
        let mut registry = HashRegistry::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::MalformedManifest(format!("bad registry row {line:?}")));
            }
            let timestamp: u64 = parts[2]
                .parse()
                .map_err(|_| Error::MalformedManifest(format!("bad timestamp {:?}", parts[2])))?;
            if registry.entries.contains_key(parts[0]) {
                return Err(Error::DuplicateImageId(parts[0].to_string()));
            }
            registry.entries.insert(
                parts[0].to_string(),
                RegistryEntry {
                    digest: parts[1].to_string(),
                    registered_at: timestamp,
                    source: parts[3].to_string(),
                },
            );
            registry.next_timestamp = registry.next_timestamp.max(timestamp + 1);
        }
        Ok(registry)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_then_verify_same_bytes_matches() {
        let mut reg = HashRegistry::new();
        reg.register("img0", b"payload", "camera").unwrap();
        assert_eq!(reg.verify("img0", b"payload"), Verification::Match);
    }

    #[test]
    fn verify_is_total_over_unknown_ids() {
        let reg = HashRegistry::new();
        assert_eq!(reg.verify("ghost", b"anything"), Verification::Unknown);
    }

    #[test]
    fn double_registration_is_rejected() {
        let mut reg = HashRegistry::new();
        reg.register("img0", b"payload", "camera").unwrap();
        let err = reg.register("img0", b"payload", "camera").unwrap_err();
        assert!(matches!(err, Error::AlreadyRegistered(id) if id == "img0"));
    }

    #[test]
    fn any_single_byte_flip_is_tampered() {
        let mut reg = HashRegistry::new();
        let payload: Vec<u8> = (0..=255).collect();
        reg.register("img0", &payload, "camera").unwrap();
        for i in (0..payload.len()).step_by(17) {
            let mut tampered = payload.clone();
            tampered[i] ^= 0x01;
            assert_eq!(reg.verify("img0", &tampered), Verification::Tampered, "byte {i}");
        }
        assert_eq!(reg.verify("img0", &payload), Verification::Match);
    }

    #[test]
    fn csv_reload_preserves_verification_results() {
        let mut reg = HashRegistry::new();
        reg.register("b", b"bytes-b", "camera").unwrap();
        reg.register("a", b"bytes-a", "camera").unwrap();
        let csv = reg.to_csv();
        let back = HashRegistry::from_csv(&csv).unwrap();
        assert_eq!(back.verify("a", b"bytes-a"), Verification::Match);
        assert_eq!(back.verify("b", b"bytes-b"), Verification::Match);
        assert_eq!(back.verify("b", b"bytes-a"), Verification::Tampered);
        assert_eq!(back.to_csv(), csv);
        // Registration order survives the roundtrip.
        assert!(csv.find("\nb,").unwrap() < csv.find("\na,").unwrap());
    }
}
