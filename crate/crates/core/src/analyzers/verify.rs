//! Known-answer confirmation of symmetric key candidates.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::{Aes128, Aes256};

use super::{AnalyzerError, CandidateKind, KeyCandidate};

/// One plaintext block and its encryption under the real key, as an attacker
/// would obtain from known sector contents of the encrypted disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnownAnswer {
    pub plaintext: [u8; 16],
    pub ciphertext: [u8; 16],
}

impl KnownAnswer {
    /// Builds a probe for a 16- or 32-byte key.
    pub fn new(key: &[u8], plaintext: [u8; 16]) -> Option<Self> {
        encrypt_block(key, plaintext).map(|ciphertext| KnownAnswer {
            plaintext,
            ciphertext,
        })
    }

    fn matches(&self, key: &[u8]) -> bool {
        encrypt_block(key, self.plaintext) == Some(self.ciphertext)
    }
}

fn encrypt_block(key: &[u8], plaintext: [u8; 16]) -> Option<[u8; 16]> {
    let mut block = GenericArray::from(plaintext);
    match key.len() {
        16 => Aes128::new(GenericArray::from_slice(key)).encrypt_block(&mut block),
        32 => Aes256::new(GenericArray::from_slice(key)).encrypt_block(&mut block),
        _ => return None,
    }
    Some(block.into())
}

/// Whether the candidate key encrypts the probe plaintext to the probe
/// ciphertext.
///
/// Key-context material is tried under each plausible interpretation: a
/// 16- or 32-byte key as is, the first half of a 32-byte key as an XTS data
/// key, and the first half of a 64-byte XTS key.
pub fn verify_key_candidate(
    candidate: &KeyCandidate,
    probe: &KnownAnswer,
) -> Result<bool, AnalyzerError> {
    let m = &candidate.material;
    match candidate.kind {
        CandidateKind::AesKey128 | CandidateKind::AesKey256 => Ok(probe.matches(m)),
        CandidateKind::KeyContext => Ok(match m.len() {
            16 => probe.matches(m),
            32 => probe.matches(m) || probe.matches(&m[..16]),
            64 => probe.matches(&m[..32]),
            _ => false,
        }),
        CandidateKind::RsaFactor => Err(AnalyzerError::UnsupportedCandidate(candidate.kind)),
    }
}
