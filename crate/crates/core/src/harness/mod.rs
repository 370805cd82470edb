//! Experiment orchestration.
//!
//! One iteration builds a fresh guest, plants the secrets, starts tracking
//! at a uniformly random instant, waits for the scenario's observable event,
//! then searches the tracked pages. Iterations share nothing; their seeds
//! derive from a master seed as
//! `derive_seed([master, label_hash(scenario), load_level bits, iteration])`.

pub mod stats;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzers::{AesVariant, AnalyzerError, KnownAnswer, RsaScanner};
use crate::clock::SimTime;
use crate::config::{Config, ConfigError, Material, ScenarioConfig};
use crate::mem_model::{GuestMemory, SecretKind, KEY_CONTEXT_LAYOUT};
use crate::searcher::{
    preprocess_session, search, Extractor, Outcome, PageAnalyzer, RsaPageAnalyzer, SearchConfig,
    SymmetricPageAnalyzer,
};
use crate::seed::{derive_seed, label_hash};
use crate::simulator::{
    Access, ActivityId, ActivityKind, ArrivalStream, ObservableEvent, Observer, SecretSlot,
    SimError, Simulation, TemplateError, World,
};
use crate::tracker::Tracker;

pub use stats::{
    histogram, mad, median, summarize, write_histogram_csv, write_reports_csv, HistogramBin,
    SummaryStats, HISTOGRAM_COLUMNS, REPORT_COLUMNS,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error("load level must be positive and finite, got {0}")]
    LoadLevel(f64),
    #[error("no reports to summarize")]
    EmptyInput,
    #[error("cannot build worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    TlsNginx,
    TlsApache,
    Fde,
    Ssh,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::TlsNginx,
        Scenario::TlsApache,
        Scenario::Fde,
        Scenario::Ssh,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::TlsNginx => "tls-nginx",
            Scenario::TlsApache => "tls-apache",
            Scenario::Fde => "fde",
            Scenario::Ssh => "ssh",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.label() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

/// Outcome of one attack iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub scenario: Scenario,
    pub load_level: f64,
    pub iteration: u64,
    pub seed: u64,
    pub success: bool,
    /// Stop time minus the last use of the target by the activity whose
    /// event stopped tracking; absent when no event arrived.
    pub reaction_ms: Option<f64>,
    pub tracked_pages: usize,
    pub filtered_pages: usize,
    pub extracted_pages: usize,
    pub observation_ms: f64,
    pub search_ms: f64,
    pub requests_made: u64,
    pub attempts: u32,
}

/// Seed of iteration `iteration` of (`scenario`, `load_level`).
pub fn iteration_seed(master: u64, scenario: Scenario, load_level: f64, iteration: u64) -> u64 {
    derive_seed(&[
        master,
        label_hash(scenario.label()),
        load_level.to_bits(),
        iteration,
    ])
}

const TAG_MEMORY: u64 = 0x004d_454d;
const TAG_SIM: u64 = 0x0053_494d;
const TAG_START: u64 = 0x0053_5441_5254;
const TAG_DISK: u64 = 0x4449_534b;
const TAG_EXTRACT: u64 = 0x0045_5854;
const TAG_DETECT: u64 = 0x0044_4554;

/// Secret slots for every configured secret, bound to the material of one
/// iteration. The disk key is drawn from `seed` and returned alongside.
pub fn secret_slots(
    config: &Config,
    seed: u64,
) -> Result<(Vec<SecretSlot>, [u8; 32]), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, TAG_DISK]));
    let disk_key: [u8; 32] = rng.random();
    let split = config.harness.fde_xts_split;
    let mut slots = Vec::new();
    for (name, secret) in &config.secrets {
        let parts = match secret.material {
            Material::RsaFactor => {
                let key = config.key(secret.key.as_deref().unwrap_or_default())?;
                let factor_bits = (key.modulus_bits() as u32).div_ceil(2);
                vec![SecretKind::RsaFactor {
                    modulus: key.modulus,
                    factor: key.p,
                    factor_bits,
                    endianness: secret.endianness,
                }]
            }
            Material::AesSchedule if split => disk_key
                .chunks(16)
                .map(|half| SecretKind::AesKey {
                    variant: AesVariant::Aes128,
                    key: half.to_vec(),
                    store_schedule: true,
                })
                .collect(),
            Material::AesSchedule => vec![SecretKind::AesKey {
                variant: AesVariant::Aes256,
                key: disk_key.to_vec(),
                store_schedule: true,
            }],
            Material::KeyContext => {
                let span = u64::MAX - KEY_CONTEXT_LAYOUT.kernel_min;
                let addr = |r: &mut ChaCha8Rng| {
                    KEY_CONTEXT_LAYOUT.kernel_min + (r.random_range(0..span) & !7)
                };
                vec![SecretKind::KeyContext {
                    addresses: [addr(&mut rng), addr(&mut rng)],
                    key: disk_key.to_vec(),
                }]
            }
        };
        slots.push(SecretSlot {
            name: name.clone(),
            parts,
            region: secret.region.clone(),
            per_instance: secret.per_instance,
            lifetime: secret.session_bound.then(|| config.workload.ssh_session()),
            alignment: config.harness.secret_alignment,
        });
    }
    Ok((slots, disk_key))
}

/// Tracks pages from the start instant and requests a stop on the first
/// matching event at or after it.
struct AttackObserver<'a> {
    tracker: Tracker,
    start: SimTime,
    stop_on: ActivityKind,
    world: &'a World,
    load_level: f64,
    rng: ChaCha8Rng,
    trigger: Option<(ActivityId, SimTime)>,
}

impl Observer for AttackObserver<'_> {
    fn on_access(&mut self, mem: &mut GuestMemory, access: &Access) {
        self.tracker
            .on_access(mem, access.gpa, access.access_type, access.time);
    }

    fn on_event(&mut self, _mem: &mut GuestMemory, event: &ObservableEvent) -> Option<SimTime> {
        if event.kind != self.stop_on || event.time < self.start || self.trigger.is_some() {
            return None;
        }
        let detection = self.world.template(event.kind)?.detection;
        let delay = detection.at(self.load_level, self.rng.random());
        let stop = self.tracker.stop(event.time, event.tag, delay).ok()?;
        self.trigger = Some((event.activity, stop));
        Some(stop)
    }
}

/// A scenario bound to a configuration and load level.
pub struct Experiment {
    config: Config,
    world: World,
    scenario: Scenario,
    scenario_config: ScenarioConfig,
    load_level: f64,
    rsa: Option<RsaPageAnalyzer>,
}

impl Experiment {
    pub fn new(config: &Config, scenario: Scenario, load_level: f64) -> Result<Self, HarnessError> {
        if !(load_level.is_finite() && load_level > 0.0) {
            return Err(HarnessError::LoadLevel(load_level));
        }
        config.validate()?;
        let world = config.world()?;
        let scenario_config = config.scenario(scenario)?.clone();
        let mut rsa = None;
        for target in &scenario_config.targets {
            let secret = &config.secrets[target];
            if secret.material == Material::RsaFactor {
                let key = config.key(secret.key.as_deref().unwrap_or_default())?;
                let bits = (key.modulus_bits() as u32).div_ceil(2);
                let scanner = RsaScanner::new(
                    key.modulus,
                    bits,
                    secret.endianness,
                    config.harness.rsa_stride,
                )?;
                rsa = Some(RsaPageAnalyzer::from_scanner(scanner.balanced()));
                break;
            }
        }
        Ok(Experiment {
            config: config.clone(),
            world,
            scenario,
            scenario_config,
            load_level,
            rsa,
        })
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn load_level(&self) -> f64 {
        self.load_level
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    fn slots(&self, seed: u64) -> Result<(Vec<SecretSlot>, [u8; 32]), HarnessError> {
        secret_slots(&self.config, seed)
    }

    fn symmetric_analyzer(&self, disk_key: &[u8; 32]) -> SymmetricPageAnalyzer {
        let split = self.config.harness.fde_xts_split;
        let targets = &self.scenario_config.targets;
        let has = |m: Material| targets.iter().any(|t| self.config.secrets[t].material == m);
        let (variants, probe_key) = if split {
            (vec![AesVariant::Aes128], &disk_key[..16])
        } else {
            (vec![AesVariant::Aes256], &disk_key[..])
        };
        SymmetricPageAnalyzer {
            variants: if has(Material::AesSchedule) {
                variants
            } else {
                Vec::new()
            },
            stride: self.config.harness.aes_stride,
            key_context: has(Material::KeyContext),
            probe: KnownAnswer::new(probe_key, *b"known sector 000").expect("16 or 32 byte key"),
        }
    }

    /// Seed of iteration `iteration` under `master`.
    pub fn iteration_seed(&self, master: u64, iteration: u64) -> u64 {
        iteration_seed(master, self.scenario, self.load_level, iteration)
    }

    pub fn run_iteration(&self, iteration: u64, seed: u64) -> Result<AttackReport, HarnessError> {
        self.run_attack(iteration, seed, None)
    }

    /// Runs one attack; `start` overrides the random tracking start.
    pub fn run_attack(
        &self,
        iteration: u64,
        seed: u64,
        start: Option<SimTime>,
    ) -> Result<AttackReport, HarnessError> {
        let h = &self.config.harness;
        let start = start.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, TAG_START]));
            let [lo, hi] = h.start_window_ms;
            SimTime::from_ms_f64(lo + (hi - lo) * rng.random::<f64>())
        });
        let (slots, disk_key) = self.slots(seed)?;
        let symmetric;
        let analyzer: &dyn PageAnalyzer = match &self.rsa {
            Some(rsa) => rsa,
            None => {
                symmetric = self.symmetric_analyzer(&disk_key);
                &symmetric
            }
        };
        let mut mem = self.world.layout.build_memory();
        mem.fill_random(derive_seed(&[seed, TAG_MEMORY]));
        let lookback = self.world.max_activity_duration();
        let workload = self.config.workload.clone().with_load(self.load_level);
        let resources = workload.resource_count;
        let sim_seed = derive_seed(&[seed, TAG_SIM]);
        let arrivals = ArrivalStream::new(workload, sim_seed, start.saturating_sub(lookback))
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut sim = Simulation::new(&self.world, mem, slots, arrivals, resources, sim_seed)?;
        let targets: Vec<usize> = self
            .scenario_config
            .targets
            .iter()
            .filter_map(|t| sim.slot_index(t))
            .collect();
        let mut search_config = SearchConfig {
            analysis_ms: self.scenario_config.analysis_ms,
            ..self.config.search.clone()
        };
        let mut extractor = Extractor::new(
            self.config.search.extract_latency,
            derive_seed(&[seed, TAG_EXTRACT]),
        );
        let max_observation = SimTime::from_ms_f64(h.max_observation_ms);

        let mut report = AttackReport {
            scenario: self.scenario,
            load_level: self.load_level,
            iteration,
            seed,
            success: false,
            reaction_ms: None,
            tracked_pages: 0,
            filtered_pages: 0,
            extracted_pages: 0,
            observation_ms: 0.0,
            search_ms: 0.0,
            requests_made: 0,
            attempts: 0,
        };
        let mut attempt_start = start;
        for attempt in 1..=h.max_attempts {
            report.attempts = attempt;
            sim.set_background_epoch(attempt_start);
            let mut observer = AttackObserver {
                tracker: Tracker::new(),
                start: attempt_start,
                stop_on: self.scenario_config.stop_on,
                world: &self.world,
                load_level: self.load_level,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(&[
                    seed,
                    TAG_DETECT,
                    u64::from(attempt),
                ])),
                trigger: None,
            };
            observer
                .tracker
                .start(sim.memory_mut(), attempt_start)
                .expect("fresh tracker");
            let end = sim.run(&mut observer, attempt_start + max_observation)?;
            let session = observer
                .tracker
                .finish(sim.memory_mut(), end)
                .expect("tracker was started");
            report.tracked_pages = session.records.len();
            report.observation_ms += session.observation_time().as_ms_f64();
            let Some((activity, stop)) = observer.trigger else {
                report.filtered_pages = 0;
                break;
            };
            report.reaction_ms = sim
                .log()
                .uses
                .iter()
                .rev()
                .find(|u| u.activity == activity && targets.contains(&u.slot) && u.time <= stop)
                .map(|u| (stop - u.time).as_ms_f64());
            let list = preprocess_session(&session, &search_config);
            report.filtered_pages = list.len();
            let last = attempt == h.max_attempts;
            let result = search(
                &list,
                sim.memory_mut(),
                analyzer,
                &search_config,
                &mut extractor,
                !last,
            );
            report.extracted_pages += result.extracted_pages;
            report.requests_made += result.requests_made;
            report.search_ms += result.search_duration.as_ms_f64();
            match result.outcome {
                Outcome::Found { .. } => {
                    report.success = true;
                    break;
                }
                Outcome::Exhausted => break,
                Outcome::CutOff => {
                    search_config.exclude_pages.extend(result.extracted);
                    attempt_start = stop + result.search_duration;
                }
            }
        }
        Ok(report)
    }

    /// Runs `iterations` iterations on up to `workers` threads (0: all
    /// cores); reports come back ordered by iteration.
    pub fn run_batch(
        &self,
        master_seed: u64,
        iterations: u64,
        workers: usize,
    ) -> Result<Vec<AttackReport>, HarnessError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::Workers(e.to_string()))?;
        pool.install(|| {
            (0..iterations)
                .into_par_iter()
                .map(|i| self.run_iteration(i, self.iteration_seed(master_seed, i)))
                .collect()
        })
    }
}
