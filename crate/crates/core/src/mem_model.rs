//! Guest-physical memory with a second-level translation map.
//!
//! Pages are materialized lazily: a page that was never written is generated
//! on demand from the fill seed and its host page index, so a large guest
//! costs nothing until it is touched. Reads always go through the SLAT entry
//! of the guest page, which makes remapping visible exactly as it is on real
//! hardware.

use std::collections::BTreeSet;
use std::io::{self, Write};

use bitflags::bitflags;
use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzers::aes::{aes_expand_key, AesVariant};
use crate::clock::SimTime;

pub const PAGE_SIZE: usize = 4096;

/// Guest-physical page number.
pub type Gpn = u64;

/// A page-sized owned buffer.
pub type Page = Box<[u8; PAGE_SIZE]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessType {
    Read,
    Write,
    Execute,
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct Perms: u8 {
        const READ = 0b001;
        const WRITE = 0b010;
        const EXECUTE = 0b100;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlatEntry {
    pub host_page: u64,
    pub perms: Perms,
    /// Set while the mapping is invalidated for access tracking.
    pub tracked: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("guest page {gpa} out of range (guest has {num_pages} pages)")]
    PageOutOfRange { gpa: Gpn, num_pages: u64 },
    #[error("host page {host} out of range (guest has {num_pages} pages)")]
    HostPageOutOfRange { host: u64, num_pages: u64 },
    #[error("placement at page {gpa} offset {offset} with {len} bytes does not fit")]
    PlacementOutOfRange { gpa: Gpn, offset: usize, len: usize },
    #[error("secret of {len} bytes at offset {offset} spans more than two pages")]
    SpanTooLarge { offset: usize, len: usize },
    #[error("factor does not divide the modulus")]
    NotADivisor,
    #[error("factor needs more than {factor_bits} bits")]
    FactorTooWide { factor_bits: u32 },
    #[error("key of {len} bytes is not valid here")]
    BadKeyLength { len: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endianness {
    #[default]
    Little,
    Big,
}

/// Synthetic stand-in for the kernel's in-memory disk-encryption key record.
///
/// The record is a 40-byte header followed by the key:
///
/// | offset | size | field                                             |
/// |--------|------|---------------------------------------------------|
/// | 0      | 8    | object pointer, canonical upper-half kernel address |
/// | 8      | 8    | object pointer, canonical upper-half kernel address |
/// | 16     | 4    | key length in bytes, one of 16, 32, 64            |
/// | 20     | 4    | padding                                           |
/// | 24     | 16   | reserved, unconstrained                           |
/// | 40     | n    | key bytes                                         |
///
/// All integers are little-endian. The layout is invented; real kernels use
/// different structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyContextLayout {
    pub header_len: usize,
    pub address_offsets: [usize; 2],
    pub key_len_offset: usize,
    pub permitted_key_lens: [u32; 3],
    pub kernel_min: u64,
}

pub const KEY_CONTEXT_LAYOUT: KeyContextLayout = KeyContextLayout {
    header_len: 40,
    address_offsets: [0, 8],
    key_len_offset: 16,
    permitted_key_lens: [16, 32, 64],
    kernel_min: 0xffff_8000_0000_0000,
};

impl KeyContextLayout {
    pub fn is_kernel_address(&self, value: u64) -> bool {
        value >= self.kernel_min
    }

    pub fn permits_key_len(&self, len: u32) -> bool {
        self.permitted_key_lens.contains(&len)
    }

    /// Serializes a record; addresses must lie in the kernel range.
    pub fn encode(&self, addresses: [u64; 2], key: &[u8]) -> Result<Vec<u8>, MemError> {
        if !self.permits_key_len(key.len() as u32) {
            return Err(MemError::BadKeyLength { len: key.len() });
        }
        let mut out = vec![0u8; self.header_len + key.len()];
        for (slot, addr) in self.address_offsets.iter().zip(addresses) {
            // Out-of-range addresses would produce a record the scanner
            // rejects; clamp them into the canonical range.
            let addr = addr.max(self.kernel_min);
            out[*slot..*slot + 8].copy_from_slice(&addr.to_le_bytes());
        }
        out[self.key_len_offset..self.key_len_offset + 4]
            .copy_from_slice(&(key.len() as u32).to_le_bytes());
        out[self.header_len..].copy_from_slice(key);
        Ok(out)
    }
}

/// The material a secret consists of.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecretKind {
    RsaFactor {
        modulus: BigUint,
        factor: BigUint,
        factor_bits: u32,
        endianness: Endianness,
    },
    AesKey {
        variant: AesVariant,
        key: Vec<u8>,
        store_schedule: bool,
    },
    KeyContext {
        addresses: [u64; 2],
        key: Vec<u8>,
    },
}

impl SecretKind {
    /// The exact bytes written to memory for this secret.
    pub fn encode(&self) -> Result<Vec<u8>, MemError> {
        match self {
            SecretKind::RsaFactor {
                modulus,
                factor,
                factor_bits,
                endianness,
            } => {
                if factor <= &BigUint::one() || factor >= modulus {
                    return Err(MemError::NotADivisor);
                }
                if !(modulus % factor).is_zero() {
                    return Err(MemError::NotADivisor);
                }
                if factor.bits() > u64::from(*factor_bits) {
                    return Err(MemError::FactorTooWide {
                        factor_bits: *factor_bits,
                    });
                }
                let width = (*factor_bits as usize).div_ceil(8);
                let mut bytes = factor.to_bytes_le();
                bytes.resize(width, 0);
                if *endianness == Endianness::Big {
                    bytes.reverse();
                }
                Ok(bytes)
            }
            SecretKind::AesKey {
                variant,
                key,
                store_schedule,
            } => {
                if key.len() != variant.key_len() {
                    return Err(MemError::BadKeyLength { len: key.len() });
                }
                if *store_schedule {
                    aes_expand_key(key, *variant)
                        .map_err(|_| MemError::BadKeyLength { len: key.len() })
                } else {
                    Ok(key.clone())
                }
            }
            SecretKind::KeyContext { addresses, key } => KEY_CONTEXT_LAYOUT.encode(*addresses, key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretSpec {
    pub kind: SecretKind,
    pub gpa: Gpn,
    pub offset: usize,
    /// Time at which the bytes are overwritten with zeros.
    pub purge_at: Option<SimTime>,
}

/// Where a secret ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub gpa: Gpn,
    pub offset: usize,
    pub len: usize,
    /// Guest pages holding at least one secret byte, ascending.
    pub pages: Vec<Gpn>,
    /// (host page, offset within page, length) pieces actually written.
    segments: Vec<(u64, usize, usize)>,
    pub purge_at: Option<SimTime>,
}

#[derive(Debug, Clone)]
struct PendingPurge {
    at: SimTime,
    segments: Vec<(u64, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct GuestMemory {
    slat: Vec<SlatEntry>,
    host: Vec<Option<Page>>,
    fill_seed: Option<u64>,
    purges: Vec<PendingPurge>,
    now: SimTime,
}

impl GuestMemory {
    /// Zero-filled guest with an identity SLAT and read/write permissions.
    pub fn new(num_pages: u64) -> Self {
        let slat = (0..num_pages)
            .map(|i| SlatEntry {
                host_page: i,
                perms: Perms::READ | Perms::WRITE,
                tracked: false,
            })
            .collect();
        GuestMemory {
            slat,
            host: vec![None; num_pages as usize],
            fill_seed: None,
            purges: Vec::new(),
            now: SimTime::ZERO,
        }
    }

    pub fn num_pages(&self) -> u64 {
        self.slat.len() as u64
    }

    /// Refills every page from a deterministic per-page pseudo-random stream.
    ///
    /// Previously written bytes are discarded.
    pub fn fill_random(&mut self, seed: u64) {
        self.fill_seed = Some(seed);
        self.host.iter_mut().for_each(|p| *p = None);
    }

    fn check_gpa(&self, gpa: Gpn) -> Result<&SlatEntry, MemError> {
        self.slat.get(gpa as usize).ok_or(MemError::PageOutOfRange {
            gpa,
            num_pages: self.num_pages(),
        })
    }

    pub fn slat_entry(&self, gpa: Gpn) -> Result<SlatEntry, MemError> {
        self.check_gpa(gpa).copied()
    }

    pub fn set_perms(&mut self, gpa: Gpn, perms: Perms) -> Result<(), MemError> {
        self.check_gpa(gpa)?;
        self.slat[gpa as usize].perms = perms;
        Ok(())
    }

    /// Points `gpa` at another host page. Host bytes are untouched.
    pub fn remap(&mut self, gpa: Gpn, host_page: u64) -> Result<(), MemError> {
        self.check_gpa(gpa)?;
        if host_page >= self.num_pages() {
            return Err(MemError::HostPageOutOfRange {
                host: host_page,
                num_pages: self.num_pages(),
            });
        }
        self.slat[gpa as usize].host_page = host_page;
        Ok(())
    }

    /// Invalidates every mapping for tracking.
    pub fn mark_all_tracked(&mut self) {
        self.slat.iter_mut().for_each(|e| e.tracked = true);
    }

    pub fn clear_all_tracked(&mut self) {
        self.slat.iter_mut().for_each(|e| e.tracked = false);
    }

    /// Re-validates the mapping of `gpa`, returning whether it was tracked.
    pub fn take_tracked(&mut self, gpa: Gpn) -> bool {
        match self.slat.get_mut(gpa as usize) {
            Some(e) => std::mem::replace(&mut e.tracked, false),
            None => false,
        }
    }

    fn generate_page(&self, host: u64) -> Page {
        let mut page: Page = Box::new([0u8; PAGE_SIZE]);
        if let Some(seed) = self.fill_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(host);
            rng.fill_bytes(&mut page[..]);
        }
        page
    }

    fn host_page(&self, host: u64) -> Page {
        match &self.host[host as usize] {
            Some(p) => p.clone(),
            None => self.generate_page(host),
        }
    }

    fn host_page_mut(&mut self, host: u64) -> &mut [u8; PAGE_SIZE] {
        if self.host[host as usize].is_none() {
            let page = self.generate_page(host);
            self.host[host as usize] = Some(page);
        }
        self.host[host as usize].as_mut().unwrap()
    }

    /// The current bytes of the host page mapped at `gpa`.
    pub fn read_page(&self, gpa: Gpn) -> Result<Page, MemError> {
        let entry = self.check_gpa(gpa)?;
        Ok(self.host_page(entry.host_page))
    }

    /// Applies pending purges up to `at`, then reads.
    pub fn read_page_at(&mut self, gpa: Gpn, at: SimTime) -> Result<Page, MemError> {
        self.advance_to(at);
        self.read_page(gpa)
    }

    /// Writes raw bytes through the SLAT starting at (`gpa`, `offset`).
    pub fn write_bytes(&mut self, gpa: Gpn, offset: usize, bytes: &[u8]) -> Result<(), MemError> {
        let segments = self.segments_for(gpa, offset, bytes.len())?;
        self.write_segments(&segments, bytes);
        Ok(())
    }

    fn segments_for(
        &self,
        gpa: Gpn,
        offset: usize,
        len: usize,
    ) -> Result<Vec<(u64, usize, usize)>, MemError> {
        let out_of_range = MemError::PlacementOutOfRange { gpa, offset, len };
        if offset >= PAGE_SIZE || gpa >= self.num_pages() {
            return Err(out_of_range);
        }
        let end = offset + len;
        if end > 2 * PAGE_SIZE {
            return Err(MemError::SpanTooLarge { offset, len });
        }
        let mut segments = Vec::with_capacity(2);
        let first_len = len.min(PAGE_SIZE - offset);
        segments.push((self.slat[gpa as usize].host_page, offset, first_len));
        if end > PAGE_SIZE {
            let next = gpa + 1;
            if next >= self.num_pages() {
                return Err(out_of_range);
            }
            segments.push((self.slat[next as usize].host_page, 0, end - PAGE_SIZE));
        }
        Ok(segments)
    }

    fn write_segments(&mut self, segments: &[(u64, usize, usize)], bytes: &[u8]) {
        let mut cursor = 0;
        for &(host, off, len) in segments {
            let page = self.host_page_mut(host);
            page[off..off + len].copy_from_slice(&bytes[cursor..cursor + len]);
            cursor += len;
        }
    }

    /// Plants a secret and returns where it landed.
    pub fn place_secret(&mut self, spec: &SecretSpec) -> Result<Placement, MemError> {
        let bytes = spec.kind.encode()?;
        let segments = self.segments_for(spec.gpa, spec.offset, bytes.len())?;
        self.write_segments(&segments, &bytes);
        let pages = (0..segments.len() as u64).map(|i| spec.gpa + i).collect();
        if let Some(at) = spec.purge_at {
            let idx = self.purges.partition_point(|p| p.at <= at);
            self.purges.insert(
                idx,
                PendingPurge {
                    at,
                    segments: segments.clone(),
                },
            );
            // A lifetime that already expired takes effect immediately.
            if at <= self.now {
                let now = self.now;
                self.advance_to(now);
            }
        }
        Ok(Placement {
            gpa: spec.gpa,
            offset: spec.offset,
            len: bytes.len(),
            pages,
            segments,
            purge_at: spec.purge_at,
        })
    }

    /// Moves the memory clock forward, zeroing every secret whose purge time
    /// has been reached.
    pub fn advance_to(&mut self, at: SimTime) {
        if at > self.now {
            self.now = at;
        }
        let due = self.purges.partition_point(|p| p.at <= self.now);
        if due == 0 {
            return;
        }
        let expired: Vec<PendingPurge> = self.purges.drain(..due).collect();
        for purge in expired {
            for (host, off, len) in purge.segments {
                self.host_page_mut(host)[off..off + len].fill(0);
            }
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Earliest purge still pending.
    pub fn next_purge(&self) -> Option<SimTime> {
        self.purges.first().map(|p| p.at)
    }

    /// Reads back the bytes of a placement, through the current SLAT.
    pub fn read_placement(&self, placement: &Placement) -> Result<Vec<u8>, MemError> {
        let mut out = Vec::with_capacity(placement.len);
        let mut remaining = placement.len;
        let mut offset = placement.offset;
        for &gpa in &placement.pages {
            let page = self.read_page(gpa)?;
            let take = remaining.min(PAGE_SIZE - offset);
            out.extend_from_slice(&page[offset..offset + take]);
            remaining -= take;
            offset = 0;
        }
        Ok(out)
    }

    /// Raw dump: all guest pages in ascending order, no header.
    pub fn export_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        for gpa in 0..self.num_pages() {
            let page = self.read_page(gpa).expect("gpa in range");
            out.write_all(&page[..])?;
        }
        out.flush()
    }

    /// Host pages that currently hold explicitly written bytes.
    pub fn materialized_pages(&self) -> BTreeSet<u64> {
        self.host
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|_| i as u64))
            .collect()
    }
}
