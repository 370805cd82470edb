//! Secret identification over raw memory chunks.
//!
//! Every scanner is a pure function of its inputs and reports candidates in
//! ascending offset order.

pub mod aes;
pub mod keyctx;
pub mod rsa;
pub mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::aes::{aes_expand_key, scan_aes_schedules, AesVariant};
pub use self::keyctx::scan_key_context;
pub use self::rsa::{complete_rsa_key, scan_rsa_factor, RsaScanner};
pub use self::verify::{verify_key_candidate, KnownAnswer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateKind {
    RsaFactor,
    AesKey128,
    AesKey256,
    KeyContext,
}

impl CandidateKind {
    pub fn label(self) -> &'static str {
        match self {
            CandidateKind::RsaFactor => "rsa-factor",
            CandidateKind::AesKey128 => "aes-128",
            CandidateKind::AesKey256 => "aes-256",
            CandidateKind::KeyContext => "key-context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyCandidate {
    pub kind: CandidateKind,
    /// Byte offset of the structure within the scanned chunk.
    pub offset: usize,
    /// Recovered key material: factor bytes as stored, AES key, or the key
    /// bytes following a key-context header.
    pub material: Vec<u8>,
    /// Number of bytes the matched structure occupies from `offset`.
    pub footprint: usize,
    /// Bit errors against the recomputed schedule; zero for exact matches.
    pub score: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalyzerError {
    #[error("key of {len} bytes does not match {variant:?}")]
    KeyLength { len: usize, variant: AesVariant },
    #[error("modulus must be greater than 3")]
    ModulusTooSmall,
    #[error("factor size of {0} bits is too small")]
    FactorBits(u32),
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("{0:?} does not divide the modulus")]
    NotADivisor(String),
    #[error("candidate kind {0:?} cannot be verified with a block probe")]
    UnsupportedCandidate(CandidateKind),
}
