//! Search phase: preprocessing, backward extraction and pipelined analysis.
//!
//! Tracked pages are extracted most recent first. Extraction and analysis
//! form a two-stage pipeline with at most one page in each stage, and all
//! durations are modeled from sampled latencies rather than measured.

use std::collections::{BTreeSet, HashMap};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyzers::{
    scan_aes_schedules, scan_key_context, verify_key_candidate, AesVariant, AnalyzerError,
    KeyCandidate, KnownAnswer, RsaScanner,
};
use crate::clock::SimTime;
use crate::mem_model::{
    AccessType, Endianness, Gpn, GuestMemory, MemError, Page, KEY_CONTEXT_LAYOUT, PAGE_SIZE,
};
use crate::tracker::{AccessRecord, TrackingSession};

/// Triangular latency distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub min_ms: f64,
    pub mode_ms: f64,
    pub max_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            min_ms: 93.0,
            mode_ms: 123.0,
            max_ms: 153.0,
        }
    }
}

impl LatencyModel {
    pub fn constant(ms: f64) -> Self {
        LatencyModel {
            min_ms: ms,
            mode_ms: ms,
            max_ms: ms,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.min_ms > 0.0 && self.min_ms <= self.mode_ms && self.mode_ms <= self.max_ms
    }

    /// Inverse-CDF sample for a uniform `u` in [0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        let (a, c, b) = (self.min_ms, self.mode_ms, self.max_ms);
        if b <= a {
            return a;
        }
        let split = (c - a) / (b - a);
        if u < split {
            a + (u * (b - a) * (c - a)).sqrt()
        } else {
            b - ((1.0 - u) * (b - a) * (b - c)).sqrt()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimTime {
        SimTime::from_ms_f64(self.quantile(rng.random()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Drop execute accesses; secrets live on non-executable pages.
    pub filter_execute: bool,
    pub filter_writes: bool,
    /// Extract read accesses before write accesses.
    pub prioritize_reads: bool,
    /// Records older than this before the stop go to the tail of the list.
    pub early_cutoff_ms: Option<f64>,
    pub extract_latency: LatencyModel,
    pub analysis_ms: f64,
    /// Pages already extracted in earlier attempts.
    #[serde(skip)]
    pub exclude_pages: BTreeSet<Gpn>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            filter_execute: true,
            filter_writes: false,
            prioritize_reads: false,
            early_cutoff_ms: Some(30.0),
            extract_latency: LatencyModel::default(),
            analysis_ms: 50.0,
            exclude_pages: BTreeSet::new(),
        }
    }
}

/// Extraction order produced by [`preprocess`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateList {
    pub entries: Vec<AccessRecord>,
    /// `entries[..recent]` were recorded within the cutoff before the stop.
    pub recent: usize,
    pub start_time: SimTime,
    pub stop_time: SimTime,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Orders records for extraction: newest first, filtered, with optional
/// read priority and old records moved behind the recent ones.
pub fn preprocess(
    records: &[AccessRecord],
    stop_time: SimTime,
    config: &SearchConfig,
) -> CandidateList {
    let horizon = config
        .early_cutoff_ms
        .map(|ms| stop_time.saturating_sub(SimTime::from_ms_f64(ms)));
    let is_old = |r: &AccessRecord| horizon.is_some_and(|h| r.time < h);
    let mut entries: Vec<AccessRecord> = records
        .iter()
        .rev()
        .filter(|r| !(config.filter_execute && r.access_type == AccessType::Execute))
        .filter(|r| !(config.filter_writes && r.access_type == AccessType::Write))
        .filter(|r| !config.exclude_pages.contains(&r.gpa_page))
        .copied()
        .collect();
    entries.sort_by_key(|r| {
        let demoted = config.prioritize_reads && r.access_type != AccessType::Read;
        (is_old(r), demoted)
    });
    let recent = entries.iter().take_while(|r| !is_old(r)).count();
    CandidateList {
        entries,
        recent,
        start_time: records.first().map_or(stop_time, |r| r.time),
        stop_time,
    }
}

/// [`preprocess`] over a closed session.
pub fn preprocess_session(session: &TrackingSession, config: &SearchConfig) -> CandidateList {
    let mut list = preprocess(&session.records, session.stop_time, config);
    list.start_time = session.start_time;
    list
}

/// Latency-modeled page extraction oracle with a request counter.
#[derive(Debug, Clone)]
pub struct Extractor {
    latency: LatencyModel,
    rng: ChaCha8Rng,
    requests: u64,
}

impl Extractor {
    pub fn new(latency: LatencyModel, seed: u64) -> Self {
        Extractor {
            latency,
            rng: ChaCha8Rng::seed_from_u64(seed),
            requests: 0,
        }
    }

    pub fn requests(&self) -> u64 {
        self.requests
    }

    /// Extracts `gpa` starting at `at`. The page content is the plaintext at
    /// the time the extraction completes.
    pub fn extract_page(
        &mut self,
        mem: &mut GuestMemory,
        gpa: Gpn,
        at: SimTime,
    ) -> Result<(Page, SimTime), MemError> {
        mem.slat_entry(gpa)?;
        let latency = self.latency.sample(&mut self.rng);
        self.requests += 1;
        let page = mem.read_page_at(gpa, at + latency)?;
        Ok((page, latency))
    }
}

/// Identifies the targeted secret in a chunk of plaintext memory.
pub trait PageAnalyzer {
    /// Largest structure size the analyzer recognizes, in bytes.
    fn max_footprint(&self) -> usize;

    /// Step between candidate offsets, counted from the chunk start.
    fn stride(&self) -> usize {
        1
    }

    /// A candidate confirmed as the secret, if the chunk holds one.
    fn analyze(&self, chunk: &[u8]) -> Option<KeyCandidate>;
}

/// Finds RSA private factors of one public modulus.
#[derive(Debug, Clone)]
pub struct RsaPageAnalyzer {
    scanner: RsaScanner,
}

impl RsaPageAnalyzer {
    pub fn new(
        modulus: BigUint,
        factor_bits: u32,
        endianness: Endianness,
        stride: usize,
    ) -> Result<Self, AnalyzerError> {
        Ok(RsaPageAnalyzer {
            scanner: RsaScanner::new(modulus, factor_bits, endianness, stride)?,
        })
    }

    pub fn from_scanner(scanner: RsaScanner) -> Self {
        RsaPageAnalyzer { scanner }
    }
}

impl PageAnalyzer for RsaPageAnalyzer {
    fn max_footprint(&self) -> usize {
        self.scanner.window_len()
    }

    fn stride(&self) -> usize {
        self.scanner.stride()
    }

    fn analyze(&self, chunk: &[u8]) -> Option<KeyCandidate> {
        // The scanner only reports exact divisors of the modulus.
        self.scanner.scan(chunk).into_iter().next()
    }
}

/// Finds a disk encryption key through its key schedule or its key-context
/// record, confirmed with a known-answer probe.
#[derive(Debug, Clone)]
pub struct SymmetricPageAnalyzer {
    pub variants: Vec<AesVariant>,
    pub stride: usize,
    pub key_context: bool,
    pub probe: KnownAnswer,
}

impl PageAnalyzer for SymmetricPageAnalyzer {
    fn max_footprint(&self) -> usize {
        let schedule = self
            .variants
            .iter()
            .map(|v| v.schedule_len())
            .max()
            .unwrap_or(0);
        let context = if self.key_context {
            KEY_CONTEXT_LAYOUT.header_len + 64
        } else {
            0
        };
        schedule.max(context)
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn analyze(&self, chunk: &[u8]) -> Option<KeyCandidate> {
        let confirmed = |c: &KeyCandidate| verify_key_candidate(c, &self.probe).unwrap_or(false);
        for &variant in &self.variants {
            let hit = scan_aes_schedules(chunk, variant, 0, self.stride)
                .into_iter()
                .find(confirmed);
            if hit.is_some() {
                return hit;
            }
        }
        if self.key_context {
            return scan_key_context(chunk, &KEY_CONTEXT_LAYOUT)
                .into_iter()
                .find(confirmed);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Found {
        candidate: KeyCandidate,
        page: Gpn,
        /// 1-based position of the page in the extraction order.
        position: usize,
    },
    Exhausted,
    CutOff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchResult {
    pub outcome: Outcome,
    pub extracted_pages: usize,
    pub requests_made: u64,
    pub search_duration: SimTime,
    pub observation_duration: SimTime,
    /// Pages in extraction order.
    pub extracted: Vec<Gpn>,
}

impl SearchResult {
    pub fn is_found(&self) -> bool {
        matches!(self.outcome, Outcome::Found { .. })
    }
}

/// Bytes around the boundary between two adjacent pages, enough for any
/// structure of `footprint` bytes that crosses it. The chunk starts at a
/// multiple of `stride` within the left page when the stride divides the
/// page size.
fn boundary_chunk(
    left: &[u8; PAGE_SIZE],
    right: &[u8; PAGE_SIZE],
    footprint: usize,
    stride: usize,
) -> Vec<u8> {
    let reach = footprint.saturating_sub(1).min(PAGE_SIZE);
    let stride = stride.max(1);
    let before = reach.div_ceil(stride).saturating_mul(stride).min(PAGE_SIZE);
    let mut chunk = Vec::with_capacity(before + reach);
    chunk.extend_from_slice(&left[PAGE_SIZE - before..]);
    chunk.extend_from_slice(&right[..reach]);
    chunk
}

/// Extracts and analyzes candidates in order until the secret is found.
///
/// When `allow_cutoff` is set the search gives up with [`Outcome::CutOff`]
/// once every recent record is exhausted; otherwise it continues into the
/// older records.
pub fn search(
    list: &CandidateList,
    mem: &mut GuestMemory,
    analyzer: &dyn PageAnalyzer,
    config: &SearchConfig,
    extractor: &mut Extractor,
    allow_cutoff: bool,
) -> SearchResult {
    let analysis = SimTime::from_ms_f64(config.analysis_ms);
    let footprint = analyzer.max_footprint();
    let stride = analyzer.stride();
    let requests_before = extractor.requests();
    let mut pages: HashMap<Gpn, Page> = HashMap::new();
    let mut extracted = Vec::new();
    let (mut ext_done, mut ana_start, mut ana_done) = (SimTime::ZERO, SimTime::ZERO, SimTime::ZERO);
    let mut outcome = Outcome::Exhausted;
    for (i, record) in list.entries.iter().enumerate() {
        if allow_cutoff && i == list.recent && list.recent < list.entries.len() {
            outcome = Outcome::CutOff;
            break;
        }
        let gpa = record.gpa_page;
        let ext_start = ext_done.max(ana_start);
        let Ok((page, latency)) = extractor.extract_page(mem, gpa, list.stop_time + ext_start)
        else {
            continue;
        };
        ext_done = ext_start + latency;
        ana_start = ext_done.max(ana_done);
        ana_done = ana_start + analysis;
        extracted.push(gpa);
        let mut hit = analyzer.analyze(&page[..]);
        if hit.is_none() {
            if let Some(prev) = gpa.checked_sub(1).and_then(|g| pages.get(&g)) {
                hit = analyzer.analyze(&boundary_chunk(prev, &page, footprint, stride));
            }
        }
        if hit.is_none() {
            if let Some(next) = pages.get(&(gpa + 1)) {
                hit = analyzer.analyze(&boundary_chunk(&page, next, footprint, stride));
            }
        }
        pages.insert(gpa, page);
        if let Some(candidate) = hit {
            outcome = Outcome::Found {
                candidate,
                page: gpa,
                position: i + 1,
            };
            break;
        }
    }
    SearchResult {
        outcome,
        extracted_pages: extracted.len(),
        requests_made: extractor.requests() - requests_before,
        search_duration: ana_done,
        observation_duration: list.stop_time.saturating_sub(list.start_time),
        extracted,
    }
}
