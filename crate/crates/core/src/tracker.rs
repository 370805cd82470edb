//! Observation-phase page access tracking.
//!
//! Starting a session invalidates every second-level mapping of the guest.
//! The first access to a page after that faults once, is recorded and
//! re-validates the mapping, so every page shows up at most once per session.

use thiserror::Error;

use crate::clock::SimTime;
use crate::mem_model::{AccessType, Gpn, GuestMemory};
use crate::simulator::EventTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRecord {
    pub gpa_page: Gpn,
    pub time: SimTime,
    pub access_type: AccessType,
}

/// A closed tracking session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackingSession {
    pub start_time: SimTime,
    pub stop_time: SimTime,
    /// Time of the observable event that triggered the stop, if any.
    pub event_time: Option<SimTime>,
    pub stop_event: Option<EventTag>,
    /// Records in the order the faults occurred.
    pub records: Vec<AccessRecord>,
}

impl TrackingSession {
    pub fn observation_time(&self) -> SimTime {
        self.stop_time.saturating_sub(self.start_time)
    }

    /// Index of the record for `gpa`, if the page was tracked.
    pub fn position_of(&self, gpa: Gpn) -> Option<usize> {
        self.records.iter().position(|r| r.gpa_page == gpa)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrackerError {
    #[error("a tracking session is already active")]
    AlreadyActive,
    #[error("no tracking session is active")]
    NotActive,
}

#[derive(Debug, Clone)]
struct Active {
    start: SimTime,
    records: Vec<AccessRecord>,
    stop: Option<(SimTime, EventTag, SimTime)>,
}

#[derive(Debug, Clone, Default)]
pub struct Tracker {
    active: Option<Active>,
}

impl Tracker {
    pub fn new() -> Self {
        Tracker::default()
    }

    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    /// Invalidates all mappings and opens a session at `at`.
    pub fn start(&mut self, mem: &mut GuestMemory, at: SimTime) -> Result<(), TrackerError> {
        if self.active.is_some() {
            return Err(TrackerError::AlreadyActive);
        }
        mem.mark_all_tracked();
        self.active = Some(Active {
            start: at,
            records: Vec::new(),
            stop: None,
        });
        Ok(())
    }

    /// Offers one guest access. Returns the new record if this was the first
    /// access to the page since tracking started.
    pub fn on_access(
        &mut self,
        mem: &mut GuestMemory,
        gpa: Gpn,
        access_type: AccessType,
        at: SimTime,
    ) -> Option<AccessRecord> {
        let active = self.active.as_mut()?;
        if at < active.start {
            return None;
        }
        if let Some((_, _, stop_time)) = active.stop {
            if at > stop_time {
                return None;
            }
        }
        if !mem.take_tracked(gpa) {
            return None;
        }
        let record = AccessRecord {
            gpa_page: gpa,
            time: at,
            access_type,
        };
        active.records.push(record);
        Some(record)
    }

    /// Requests a stop after an observable event. Accesses up to and
    /// including the returned stop time are still recorded.
    pub fn stop(
        &mut self,
        event_time: SimTime,
        tag: EventTag,
        detection_delay: SimTime,
    ) -> Result<SimTime, TrackerError> {
        let active = self.active.as_mut().ok_or(TrackerError::NotActive)?;
        if let Some((_, _, stop_time)) = active.stop {
            return Ok(stop_time);
        }
        let stop_time = event_time.max(active.start) + detection_delay;
        active.stop = Some((event_time, tag, stop_time));
        Ok(stop_time)
    }

    /// The pending stop time, once a stop was requested.
    pub fn stop_time(&self) -> Option<SimTime> {
        self.active.as_ref()?.stop.map(|(_, _, t)| t)
    }

    /// Closes the session and re-validates all mappings. Without a prior
    /// stop request the session ends at `now`.
    pub fn finish(
        &mut self,
        mem: &mut GuestMemory,
        now: SimTime,
    ) -> Result<TrackingSession, TrackerError> {
        let active = self.active.take().ok_or(TrackerError::NotActive)?;
        mem.clear_all_tracked();
        let (event_time, stop_event, stop_time) = match active.stop {
            Some((e, tag, s)) => (Some(e), Some(tag), s),
            None => (None, None, now.max(active.start)),
        };
        Ok(TrackingSession {
            start_time: active.start,
            stop_time,
            event_time,
            stop_event,
            records: active.records,
        })
    }
}
