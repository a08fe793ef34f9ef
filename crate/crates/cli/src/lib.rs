//! Command-line workflows and the listening-test service.

pub mod config;
pub mod server;
pub mod sessions;
pub mod store;

use sha2::{Digest, Sha256};

/// First `len` hex digits of the SHA-256 of `text`.
pub fn short_hash(text: &str, len: usize) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..len.min(hex.len())].to_string()
}
