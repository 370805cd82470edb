//! AES key expansion and schedule detection by recompute-and-compare.

use serde::{Deserialize, Serialize};

use super::{AnalyzerError, CandidateKind, KeyCandidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AesVariant {
    #[serde(rename = "128")]
    Aes128,
    #[serde(rename = "256")]
    Aes256,
}

impl AesVariant {
    pub fn key_len(self) -> usize {
        match self {
            AesVariant::Aes128 => 16,
            AesVariant::Aes256 => 32,
        }
    }

    pub fn rounds(self) -> usize {
        match self {
            AesVariant::Aes128 => 10,
            AesVariant::Aes256 => 14,
        }
    }

    /// 16 bytes per round key, one more round key than rounds.
    pub fn schedule_len(self) -> usize {
        16 * (self.rounds() + 1)
    }

    pub fn candidate_kind(self) -> CandidateKind {
        match self {
            AesVariant::Aes128 => CandidateKind::AesKey128,
            AesVariant::Aes256 => CandidateKind::AesKey256,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            128 => Some(AesVariant::Aes128),
            256 => Some(AesVariant::Aes256),
            _ => None,
        }
    }
}

#[rustfmt::skip]
const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

const RCON: [u32; 10] = [
    0x0100_0000,
    0x0200_0000,
    0x0400_0000,
    0x0800_0000,
    0x1000_0000,
    0x2000_0000,
    0x4000_0000,
    0x8000_0000,
    0x1b00_0000,
    0x3600_0000,
];

#[inline]
fn sub_word(w: u32) -> u32 {
    let b = w.to_be_bytes();
    u32::from_be_bytes([
        SBOX[b[0] as usize],
        SBOX[b[1] as usize],
        SBOX[b[2] as usize],
        SBOX[b[3] as usize],
    ])
}

/// Schedule word `i` given the previous word and the word `nk` positions back.
#[inline]
fn next_word(i: usize, nk: usize, prev: u32, back: u32) -> u32 {
    let t = if i.is_multiple_of(nk) {
        sub_word(prev.rotate_left(8)) ^ RCON[i / nk - 1]
    } else if nk > 6 && i % nk == 4 {
        sub_word(prev)
    } else {
        prev
    };
    back ^ t
}

#[inline]
fn load_word(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Full expanded key schedule: 176 bytes for AES-128, 240 for AES-256.
pub fn aes_expand_key(key: &[u8], variant: AesVariant) -> Result<Vec<u8>, AnalyzerError> {
    if key.len() != variant.key_len() {
        return Err(AnalyzerError::KeyLength {
            len: key.len(),
            variant,
        });
    }
    let nk = variant.key_len() / 4;
    let total = variant.schedule_len() / 4;
    let mut words: Vec<u32> = (0..nk).map(|i| load_word(key, 4 * i)).collect();
    for i in nk..total {
        let w = next_word(i, nk, words[i - 1], words[i - nk]);
        words.push(w);
    }
    Ok(words.iter().flat_map(|w| w.to_be_bytes()).collect())
}

/// Bit distance between the schedule expanded from `window[..key_len]` and
/// the rest of `window`, or `None` once it exceeds `tolerance`.
#[inline]
fn schedule_distance(window: &[u8], variant: AesVariant, tolerance: u32) -> Option<u32> {
    const MAX_WORDS: usize = 60;
    let nk = variant.key_len() / 4;
    let total = variant.schedule_len() / 4;
    let mut words = [0u32; MAX_WORDS];
    for (i, w) in words.iter_mut().enumerate().take(nk) {
        *w = load_word(window, 4 * i);
    }
    let mut errors = 0u32;
    for i in nk..total {
        let w = next_word(i, nk, words[i - 1], words[i - nk]);
        words[i] = w;
        errors += (w ^ load_word(window, 4 * i)).count_ones();
        if errors > tolerance {
            return None;
        }
    }
    Some(errors)
}

/// Reports every offset (a multiple of `stride`) whose leading bytes expand
/// to a schedule within `tolerance` bit errors of the bytes that follow.
///
/// A zero stride is treated as 1. Chunks shorter than one schedule yield no
/// candidates.
pub fn scan_aes_schedules(
    chunk: &[u8],
    variant: AesVariant,
    tolerance: u32,
    stride: usize,
) -> Vec<KeyCandidate> {
    let stride = stride.max(1);
    let len = variant.schedule_len();
    if chunk.len() < len {
        return Vec::new();
    }
    (0..=chunk.len() - len)
        .step_by(stride)
        .filter_map(|offset| {
            let window = &chunk[offset..offset + len];
            schedule_distance(window, variant, tolerance).map(|score| KeyCandidate {
                kind: variant.candidate_kind(),
                offset,
                material: window[..variant.key_len()].to_vec(),
                footprint: len,
                score,
            })
        })
        .collect()
}
