//! Detection of kernel key-context records by their header constraints.

use super::{CandidateKind, KeyCandidate};
use crate::mem_model::KeyContextLayout;

#[inline]
fn le_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

/// Every byte offset whose header has both pointer fields in the kernel
/// range and a permitted key length, with the key bytes fully inside the
/// chunk.
pub fn scan_key_context(chunk: &[u8], layout: &KeyContextLayout) -> Vec<KeyCandidate> {
    let mut out = Vec::new();
    if chunk.len() < layout.header_len {
        return out;
    }
    for offset in 0..=chunk.len() - layout.header_len {
        let header = &chunk[offset..offset + layout.header_len];
        let pointers_ok = layout
            .address_offsets
            .iter()
            .all(|&at| layout.is_kernel_address(le_u64(header, at)));
        if !pointers_ok {
            continue;
        }
        let at = layout.key_len_offset;
        let key_len = u32::from_le_bytes(header[at..at + 4].try_into().unwrap());
        if !layout.permits_key_len(key_len) {
            continue;
        }
        let footprint = layout.header_len + key_len as usize;
        if offset + footprint > chunk.len() {
            continue;
        }
        out.push(KeyCandidate {
            kind: CandidateKind::KeyContext,
            offset,
            material: chunk[offset + layout.header_len..offset + footprint].to_vec(),
            footprint,
            score: 0,
        });
    }
    out
}
