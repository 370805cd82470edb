//! Discrete-event simulation of guest activities.
//!
//! Arrivals start activity instances. Each instance expands its template
//! into a time-ordered trace of page accesses plus one observable end event;
//! the engine merges all live traces and the background processes in global
//! time order and offers every access to an [`Observer`]. Ties are broken by
//! (time, activity id, trace index).

pub mod template;
pub mod workload;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::mem_model::{
    AccessType, Gpn, GuestMemory, MemError, Placement, SecretKind, SecretSpec, PAGE_SIZE,
};
use crate::seed::derive_seed;

pub use template::{
    ActivityTemplate, Background, BackgroundSpec, DetectionDelay, Layout, Region, RegionKind,
    RegionSpec, Select, Step, StepSpec, Target, TemplateError, TemplateSpec, World,
};
pub use workload::{
    merge_arrivals, schedule_workload, trigger_activity, Arrival, ArrivalProcess, ArrivalStream,
    WorkloadConfig, WorkloadError,
};

pub type ActivityId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityKind {
    TlsHandshakeNginx,
    TlsHandshakeApache,
    SshHandshake,
    DiskWrite,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; 4] = [
        ActivityKind::TlsHandshakeNginx,
        ActivityKind::TlsHandshakeApache,
        ActivityKind::SshHandshake,
        ActivityKind::DiskWrite,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ActivityKind::TlsHandshakeNginx => "tls-handshake-nginx",
            ActivityKind::TlsHandshakeApache => "tls-handshake-apache",
            ActivityKind::SshHandshake => "ssh-handshake",
            ActivityKind::DiskWrite => "disk-write",
        }
    }
}

impl fmt::Display for ActivityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Events visible to the hypervisor without looking inside the guest.
///
/// For reference, a packet capture recognizes a TLS change cipher spec
/// record with the filter `tcp[37] == 0x04` and an SSH new keys message
/// with `tcp[37] == 0x15`; disk image writes show up as file
/// modifications on the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventTag {
    ChangeCipherSpec,
    SshNewKeys,
    DiskImageWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservableEvent {
    pub time: SimTime,
    pub tag: EventTag,
    pub activity: ActivityId,
    pub kind: ActivityKind,
}

/// One guest page access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub time: SimTime,
    pub gpa: Gpn,
    pub access_type: AccessType,
    /// `None` for background activity.
    pub activity: Option<ActivityId>,
    /// Index of the secret slot when this access is a secret use.
    pub secret: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecretUse {
    pub time: SimTime,
    pub activity: ActivityId,
    pub slot: usize,
    pub gpa: Gpn,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunLog {
    pub events: Vec<ObservableEvent>,
    pub uses: Vec<SecretUse>,
    pub started: BTreeMap<ActivityKind, u64>,
    pub completed: BTreeMap<ActivityKind, u64>,
    pub accesses: u64,
}

impl RunLog {
    /// Time of the last use of `slot` at or before `at`.
    pub fn last_use_before(&self, slot: usize, at: SimTime) -> Option<SimTime> {
        self.uses
            .iter()
            .rev()
            .find(|u| u.slot == slot && u.time <= at)
            .map(|u| u.time)
    }
}

/// Receives every access and event in global time order.
pub trait Observer {
    fn on_access(&mut self, mem: &mut GuestMemory, access: &Access);

    /// Returns a time after which the run must stop.
    fn on_event(&mut self, _mem: &mut GuestMemory, _event: &ObservableEvent) -> Option<SimTime> {
        None
    }
}

/// Ignores everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullObserver;

impl Observer for NullObserver {
    fn on_access(&mut self, _mem: &mut GuestMemory, _access: &Access) {}
}

/// A named secret bound to concrete material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretSlot {
    pub name: String,
    /// Structures written back to back, e.g. two key schedules of an XTS
    /// context.
    pub parts: Vec<SecretKind>,
    pub region: String,
    /// Each activity instance gets its own copy in freshly allocated pages.
    pub per_instance: bool,
    /// For per-instance copies, time after the arrival at which the copy is
    /// purged.
    pub lifetime: Option<SimTime>,
    /// Byte alignment of the placement offset.
    pub alignment: usize,
}

/// Where one copy of a secret slot lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotPlacement {
    pub slot: usize,
    pub activity: Option<ActivityId>,
    pub parts: Vec<Placement>,
    pub pages: Vec<Gpn>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Memory(#[from] MemError),
    #[error("template references unknown secret {0:?}")]
    UnknownSecret(String),
    #[error("secret {0:?} does not fit into two pages of its region")]
    SecretTooLarge(String),
    #[error("memory has {have} pages, layout needs {need}")]
    MemorySize { have: u64, need: u64 },
}

#[derive(Debug, Clone, Copy)]
enum ItemKind {
    Access {
        gpa: Gpn,
        access_type: AccessType,
        secret: Option<usize>,
    },
    End,
}

#[derive(Debug, Clone)]
struct Instance {
    id: ActivityId,
    kind: ActivityKind,
    end_event: EventTag,
    trace: Vec<(SimTime, ItemKind)>,
    next: usize,
}

#[derive(Debug, Clone)]
struct BackgroundState {
    region_start: Gpn,
    kind: RegionKind,
    untouched: Vec<u32>,
    total: usize,
    rate_per_ms: f64,
    write_share: f64,
    next_at: SimTime,
    rng: ChaCha8Rng,
}

impl BackgroundState {
    fn schedule_next(&mut self, from: SimTime) {
        if self.untouched.is_empty() {
            self.next_at = SimTime::MAX;
            return;
        }
        let rate = self.rate_per_ms * self.untouched.len() as f64 / self.total as f64;
        let u: f64 = self.rng.random();
        let gap = -(1.0 - u).ln() / rate;
        self.next_at = from + SimTime::from_ms_f64(gap).max(SimTime::from_us(1));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Next {
    Start,
    Item(SimTime),
    Background(usize, SimTime),
}

/// A running simulation. Runs can be resumed: `run` stops at a time limit
/// and leaves every later arrival and trace item pending.
pub struct Simulation<'w> {
    world: &'w World,
    mem: GuestMemory,
    slots: Vec<SecretSlot>,
    slot_index: HashMap<String, usize>,
    slot_region: Vec<usize>,
    slot_len: Vec<usize>,
    static_placement: Vec<Option<usize>>,
    placements: Vec<SlotPlacement>,
    arrivals: Box<dyn Iterator<Item = Arrival> + 'w>,
    next_arrival: Option<Arrival>,
    heap: BinaryHeap<Reverse<(SimTime, ActivityId, usize)>>,
    instances: Vec<Option<Instance>>,
    free: Vec<usize>,
    next_id: ActivityId,
    cursors: Vec<u64>,
    background: Vec<BackgroundState>,
    resource_count: u32,
    seed: u64,
    now: SimTime,
    log: RunLog,
}

impl<'w> Simulation<'w> {
    /// Binds memory, secrets and arrivals to a world. Static secrets are
    /// planted immediately at random aligned offsets inside their regions.
    pub fn new(
        world: &'w World,
        mut mem: GuestMemory,
        slots: Vec<SecretSlot>,
        arrivals: impl Iterator<Item = Arrival> + 'w,
        resource_count: u32,
        seed: u64,
    ) -> Result<Self, SimError> {
        let need = world.layout.total_pages();
        if mem.num_pages() < need {
            return Err(SimError::MemorySize {
                have: mem.num_pages(),
                need,
            });
        }
        let mut slot_index = HashMap::new();
        let mut slot_region = Vec::new();
        let mut slot_len = Vec::new();
        for (i, slot) in slots.iter().enumerate() {
            slot_index.insert(slot.name.clone(), i);
            slot_region.push(world.layout.index_of(&slot.region)?);
            let mut len = 0;
            for part in &slot.parts {
                len += part.encode()?.len();
            }
            let region_pages = world.layout.regions()[slot_region[i]].pages;
            if len > PAGE_SIZE || region_pages < 2 {
                return Err(SimError::SecretTooLarge(slot.name.clone()));
            }
            slot_len.push(len);
        }
        for t in world.templates.values() {
            for name in t.secrets() {
                if !slot_index.contains_key(name) {
                    return Err(SimError::UnknownSecret(name.to_string()));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x534c_4f54]));
        let cursors = world
            .layout
            .regions()
            .iter()
            .map(|r| rng.random_range(0..r.pages))
            .collect();
        mem.advance_to(SimTime::ZERO);
        let mut sim = Simulation {
            world,
            mem,
            slots,
            slot_index,
            slot_region,
            slot_len,
            static_placement: Vec::new(),
            placements: Vec::new(),
            arrivals: Box::new(arrivals),
            next_arrival: None,
            heap: BinaryHeap::new(),
            instances: Vec::new(),
            free: Vec::new(),
            next_id: 0,
            cursors,
            background: Vec::new(),
            resource_count: resource_count.max(1),
            seed,
            now: SimTime::ZERO,
            log: RunLog::default(),
        };
        sim.next_arrival = sim.arrivals.next();
        for i in 0..sim.slots.len() {
            let placed = if sim.slots[i].per_instance {
                None
            } else {
                let (gpa, offset) = sim.random_spot(i, &mut rng);
                Some(sim.place_slot(i, gpa, offset, None, None)?)
            };
            sim.static_placement.push(placed);
        }
        Ok(sim)
    }

    fn random_spot(&self, slot: usize, rng: &mut ChaCha8Rng) -> (Gpn, usize) {
        let region = &self.world.layout.regions()[self.slot_region[slot]];
        let align = self.slots[slot].alignment.clamp(1, PAGE_SIZE);
        let offset = rng.random_range(0..PAGE_SIZE / align) * align;
        let span = (offset + self.slot_len[slot]).div_ceil(PAGE_SIZE) as u64;
        let gpa = region.start + rng.random_range(0..=region.pages - span);
        (gpa, offset)
    }

    fn place_slot(
        &mut self,
        slot: usize,
        gpa: Gpn,
        offset: usize,
        activity: Option<ActivityId>,
        purge_at: Option<SimTime>,
    ) -> Result<usize, SimError> {
        let mut parts = Vec::new();
        let mut pages = Vec::new();
        let mut at = gpa as usize * PAGE_SIZE + offset;
        for kind in self.slots[slot].parts.clone() {
            let spec = SecretSpec {
                kind,
                gpa: (at / PAGE_SIZE) as Gpn,
                offset: at % PAGE_SIZE,
                purge_at,
            };
            let placement = self.mem.place_secret(&spec)?;
            at += placement.len;
            for &p in &placement.pages {
                if !pages.contains(&p) {
                    pages.push(p);
                }
            }
            parts.push(placement);
        }
        pages.sort_unstable();
        self.placements.push(SlotPlacement {
            slot,
            activity,
            parts,
            pages,
        });
        Ok(self.placements.len() - 1)
    }

    pub fn world(&self) -> &World {
        self.world
    }

    pub fn memory(&self) -> &GuestMemory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut GuestMemory {
        &mut self.mem
    }

    pub fn into_parts(self) -> (GuestMemory, RunLog) {
        (self.mem, self.log)
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn slots(&self) -> &[SecretSlot] {
        &self.slots
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slot_index.get(name).copied()
    }

    /// Every copy of every secret planted so far.
    pub fn placements(&self) -> &[SlotPlacement] {
        &self.placements
    }

    /// Restarts the background processes: from `at` on, every background
    /// page is touched once, at a rate proportional to the share of pages not
    /// yet touched. Later touches of the same page are not generated.
    pub fn set_background_epoch(&mut self, at: SimTime) {
        let layout = &self.world.layout;
        self.background = self
            .world
            .background
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let region = &layout.regions()[b.region];
                let mut state = BackgroundState {
                    region_start: region.start,
                    kind: region.kind,
                    untouched: (0..region.pages as u32).collect(),
                    total: region.pages as usize,
                    rate_per_ms: b.rate_per_ms,
                    write_share: b.write_share,
                    next_at: SimTime::MAX,
                    rng: ChaCha8Rng::seed_from_u64(derive_seed(&[
                        self.seed,
                        0x4247,
                        at.as_us(),
                        i as u64,
                    ])),
                };
                state.schedule_next(at);
                state
            })
            .collect();
    }

    fn pick_pages(&mut self, rng: &mut ChaCha8Rng, step: &Step, resource: u32) -> Vec<Gpn> {
        let Target::Region {
            region,
            select,
            pages,
        } = step.target
        else {
            return Vec::new();
        };
        let r = &self.world.layout.regions()[region];
        match select {
            Select::Fixed => (0..pages).map(|i| r.start + i).collect(),
            Select::Random => sample(rng, r.pages as usize, pages as usize)
                .into_iter()
                .map(|i| r.start + i as u64)
                .collect(),
            Select::Fresh => {
                let c = self.cursors[region];
                self.cursors[region] = (c + pages) % r.pages;
                (0..pages).map(|i| r.start + (c + i) % r.pages).collect()
            }
            Select::Resource => {
                let rc = u64::from(self.resource_count);
                let slice = (r.pages / rc).max(1);
                let base = (u64::from(resource) % rc * slice).min(r.pages - 1);
                let n = pages.min(slice).min(r.pages - base);
                (0..n).map(|i| r.start + base + i).collect()
            }
        }
    }

    /// Fresh pages for a per-instance secret copy, returned as a spot.
    fn fresh_spot(&mut self, slot: usize, rng: &mut ChaCha8Rng) -> (Gpn, usize) {
        let region_idx = self.slot_region[slot];
        let r = &self.world.layout.regions()[region_idx];
        let align = self.slots[slot].alignment.clamp(1, PAGE_SIZE);
        let offset = rng.random_range(0..PAGE_SIZE / align) * align;
        let span = (offset + self.slot_len[slot]).div_ceil(PAGE_SIZE) as u64;
        let mut c = self.cursors[region_idx];
        if c + span > r.pages {
            c = 0;
        }
        self.cursors[region_idx] = (c + span) % r.pages;
        (r.start + c, offset)
    }

    fn start_instance(&mut self, arrival: Arrival) -> Result<(), SimError> {
        let id = self.next_id;
        self.next_id += 1;
        *self.log.started.entry(arrival.kind).or_default() += 1;
        let Some(template) = self.world.template(arrival.kind) else {
            return Ok(());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0x494e_5354]));
        rng.set_stream(id);
        // Per-instance secret copies are allocated when the activity starts.
        let mut instance_slots: HashMap<usize, usize> = HashMap::new();
        for name in template.secrets() {
            let slot = self.slot_index[name];
            if self.slots[slot].per_instance && !instance_slots.contains_key(&slot) {
                let (gpa, offset) = self.fresh_spot(slot, &mut rng);
                let purge_at = self.slots[slot].lifetime.map(|l| arrival.time + l);
                let p = self.place_slot(slot, gpa, offset, Some(id), purge_at)?;
                instance_slots.insert(slot, p);
            }
        }
        let mut trace = Vec::new();
        for step in &template.steps {
            let (pages, secret) = match &step.target {
                Target::Secret { name, .. } => {
                    let slot = self.slot_index[name];
                    let p = instance_slots
                        .get(&slot)
                        .copied()
                        .or(self.static_placement[slot])
                        .expect("static slot placed at construction");
                    (self.placements[p].pages.clone(), Some(slot))
                }
                Target::Region { .. } => (self.pick_pages(&mut rng, step, arrival.resource), None),
            };
            let n = match step.target {
                Target::Secret { repeats, .. } => repeats,
                Target::Region { .. } => pages.len() as u64,
            };
            let span = (step.to - step.at).as_us();
            for i in 0..n {
                let offset = step.at + SimTime::from_us(span * i / n.max(1));
                let at = arrival.time + offset;
                let touched: &[Gpn] = if secret.is_some() {
                    &pages
                } else {
                    &pages[i as usize..=i as usize]
                };
                for &gpa in touched {
                    trace.push((
                        at,
                        ItemKind::Access {
                            gpa,
                            access_type: step.access,
                            secret,
                        },
                    ));
                }
            }
        }
        trace.push((arrival.time + template.end_offset, ItemKind::End));
        trace.sort_by_key(|(t, _)| *t);
        let first = trace[0].0;
        let instance = Instance {
            id,
            kind: arrival.kind,
            end_event: template.end_event,
            trace,
            next: 0,
        };
        let slab = match self.free.pop() {
            Some(i) => {
                self.instances[i] = Some(instance);
                i
            }
            None => {
                self.instances.push(Some(instance));
                self.instances.len() - 1
            }
        };
        self.heap.push(Reverse((first, id, slab)));
        Ok(())
    }

    fn peek_next(&self) -> Option<Next> {
        let item = self.heap.peek().map(|Reverse((t, _, _))| *t);
        let bg = self
            .background
            .iter()
            .enumerate()
            .filter(|(_, b)| b.next_at != SimTime::MAX)
            .min_by_key(|(_, b)| b.next_at)
            .map(|(i, b)| (i, b.next_at));
        let mut best: Option<(SimTime, Next)> = None;
        if let Some(a) = &self.next_arrival {
            best = Some((a.time, Next::Start));
        }
        if let Some(t) = item {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Next::Item(t)));
            }
        }
        if let Some((i, t)) = bg {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Next::Background(i, t)));
            }
        }
        best.map(|(_, n)| n)
    }

    /// Processes everything up to and including `until`, or up to the stop
    /// time an observer requests, whichever is earlier. Returns the time the
    /// run ended at.
    pub fn run(
        &mut self,
        observer: &mut dyn Observer,
        until: SimTime,
    ) -> Result<SimTime, SimError> {
        let mut limit = until;
        while let Some(next) = self.peek_next() {
            match next {
                Next::Start => {
                    let arrival = self.next_arrival.expect("peeked");
                    if arrival.time > limit {
                        break;
                    }
                    self.next_arrival = self.arrivals.next();
                    self.now = self.now.max(arrival.time);
                    self.mem.advance_to(arrival.time);
                    self.start_instance(arrival)?;
                }
                Next::Item(t) => {
                    if t > limit {
                        break;
                    }
                    let Reverse((_, _, slab)) = self.heap.pop().expect("peeked");
                    self.now = t;
                    self.mem.advance_to(t);
                    let (item, id, kind, tag, following) = {
                        let inst = self.instances[slab].as_mut().expect("live instance");
                        let item = inst.trace[inst.next].1;
                        inst.next += 1;
                        let following = inst.trace.get(inst.next).map(|(t, _)| *t);
                        (item, inst.id, inst.kind, inst.end_event, following)
                    };
                    match following {
                        Some(ft) => self.heap.push(Reverse((ft, id, slab))),
                        None => {
                            self.instances[slab] = None;
                            self.free.push(slab);
                        }
                    }
                    match item {
                        ItemKind::Access {
                            gpa,
                            access_type,
                            secret,
                        } => {
                            let access = Access {
                                time: t,
                                gpa,
                                access_type,
                                activity: Some(id),
                                secret,
                            };
                            self.log.accesses += 1;
                            if let Some(slot) = secret {
                                self.log.uses.push(SecretUse {
                                    time: t,
                                    activity: id,
                                    slot,
                                    gpa,
                                });
                            }
                            observer.on_access(&mut self.mem, &access);
                        }
                        ItemKind::End => {
                            let event = ObservableEvent {
                                time: t,
                                tag,
                                activity: id,
                                kind,
                            };
                            self.log.events.push(event);
                            *self.log.completed.entry(kind).or_default() += 1;
                            if let Some(stop) = observer.on_event(&mut self.mem, &event) {
                                limit = limit.min(stop.max(t));
                            }
                        }
                    }
                }
                Next::Background(i, t) => {
                    if t > limit {
                        break;
                    }
                    self.now = t;
                    self.mem.advance_to(t);
                    let b = &mut self.background[i];
                    let j = b.rng.random_range(0..b.untouched.len());
                    let page = b.untouched.swap_remove(j);
                    let access_type = match b.kind {
                        RegionKind::Code => AccessType::Execute,
                        RegionKind::Data if b.rng.random::<f64>() < b.write_share => {
                            AccessType::Write
                        }
                        RegionKind::Data => AccessType::Read,
                    };
                    let gpa = b.region_start + u64::from(page);
                    b.schedule_next(t);
                    let access = Access {
                        time: t,
                        gpa,
                        access_type,
                        activity: None,
                        secret: None,
                    };
                    self.log.accesses += 1;
                    observer.on_access(&mut self.mem, &access);
                }
            }
        }
        if limit != SimTime::MAX {
            self.now = self.now.max(limit);
            self.mem.advance_to(limit);
        }
        Ok(limit)
    }
}

/// Runs a fresh simulation over `arrivals` until `until` and returns the
/// final memory and event log.
pub fn run(
    world: &World,
    mem: GuestMemory,
    slots: Vec<SecretSlot>,
    arrivals: Vec<Arrival>,
    observer: &mut dyn Observer,
    until: SimTime,
    seed: u64,
) -> Result<(GuestMemory, RunLog), SimError> {
    let mut sim = Simulation::new(world, mem, slots, arrivals.into_iter(), 11, seed)?;
    sim.run(observer, until)?;
    Ok(sim.into_parts())
}
