//! Request arrivals under the load model.
//!
//! Client requests arrive as a Poisson process with `load_level` requests per
//! second. Each request is a web request with probability `web_probability`,
//! split between the two web servers and spread evenly over their resources,
//! and an SSH login otherwise. Independently the guest flushes dirty pages to
//! its disk image at a fixed cadence with bounded jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ActivityKind;
use crate::clock::SimTime;
use crate::seed::{derive_seed, splitmix64, unit_f64};

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("load level must be finite and nonnegative, got {0}")]
    LoadLevel(f64),
    #[error("request probabilities must be in [0, 1] and sum to 1")]
    Probabilities,
    #[error("at least one resource per server is required")]
    Resources,
    #[error("disk flush jitter must be below half the period")]
    FlushJitter,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    /// One request every `1 / load_level` seconds, exactly.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Requests per second.
    pub load_level: f64,
    pub process: ArrivalProcess,
    pub web_probability: f64,
    pub ssh_probability: f64,
    /// Share of web requests served by nginx; the rest go to Apache.
    pub nginx_share: f64,
    pub resource_count: u32,
    pub ssh_session_ms: f64,
    /// Disk image writes happen every period; `None` disables them.
    pub disk_flush_period_ms: Option<f64>,
    pub disk_flush_jitter_ms: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            load_level: 1.0,
            process: ArrivalProcess::Poisson,
            web_probability: 300.0 / 301.0,
            ssh_probability: 1.0 / 301.0,
            nginx_share: 0.5,
            resource_count: 11,
            ssh_session_ms: 120_000.0,
            disk_flush_period_ms: Some(4800.0),
            disk_flush_jitter_ms: 400.0,
        }
    }
}

impl WorkloadConfig {
    pub fn with_load(mut self, load_level: f64) -> Self {
        self.load_level = load_level;
        self
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.load_level.is_finite() && self.load_level >= 0.0) {
            return Err(WorkloadError::LoadLevel(self.load_level));
        }
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.web_probability)
            || !p_ok(self.ssh_probability)
            || !p_ok(self.nginx_share)
            || (self.web_probability + self.ssh_probability - 1.0).abs() > 1e-9
        {
            return Err(WorkloadError::Probabilities);
        }
        if self.resource_count == 0 {
            return Err(WorkloadError::Resources);
        }
        if let Some(period) = self.disk_flush_period_ms {
            if !(period > 0.0 && self.disk_flush_jitter_ms >= 0.0)
                || self.disk_flush_jitter_ms * 2.0 >= period
            {
                return Err(WorkloadError::FlushJitter);
            }
        }
        Ok(())
    }

    pub fn ssh_session(&self) -> SimTime {
        SimTime::from_ms_f64(self.ssh_session_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Arrival {
    pub time: SimTime,
    pub kind: ActivityKind,
    /// Index of the requested web resource.
    pub resource: u32,
}

/// One activity instance injected at `at`, outside the workload process.
pub fn trigger_activity(kind: ActivityKind, at: SimTime) -> Arrival {
    Arrival {
        time: at,
        kind,
        resource: 0,
    }
}

/// Endless, time-ordered arrival sequence starting at a given instant.
///
/// Request arrivals are memoryless, so starting the stream late yields a
/// valid sample of the same process. Disk flush times depend only on the
/// seed and the flush index, so they agree no matter where the stream
/// starts.
#[derive(Debug, Clone)]
pub struct ArrivalStream {
    config: WorkloadConfig,
    rng: ChaCha8Rng,
    seed: u64,
    next_request: Option<Arrival>,
    flush_index: u64,
    next_flush: Option<SimTime>,
    from: SimTime,
}

impl ArrivalStream {
    pub fn new(config: WorkloadConfig, seed: u64, from: SimTime) -> Result<Self, WorkloadError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x4152_5256]));
        let next_request = draw_request(&config, &mut rng, from, true);
        let mut stream = ArrivalStream {
            next_request,
            flush_index: 0,
            next_flush: None,
            from,
            seed,
            rng,
            config,
        };
        if let Some(period) = stream.config.disk_flush_period_ms {
            // Flush k happens near k * period; start with the first one that
            // can land at or after `from`.
            let k = ((from.as_ms_f64() - stream.config.disk_flush_jitter_ms) / period)
                .floor()
                .max(1.0) as u64;
            stream.flush_index = k;
            stream.next_flush = stream.flush_time_from(k);
        }
        Ok(stream)
    }

    fn flush_time(&self, k: u64) -> SimTime {
        let period = self.config.disk_flush_period_ms.unwrap_or(0.0);
        let jitter = self.config.disk_flush_jitter_ms;
        let u = unit_f64(splitmix64(derive_seed(&[self.seed, 0x464c_5553, k])));
        SimTime::from_ms_f64(k as f64 * period + (2.0 * u - 1.0) * jitter)
    }

    fn flush_time_from(&mut self, mut k: u64) -> Option<SimTime> {
        loop {
            let t = self.flush_time(k);
            if t >= self.from {
                self.flush_index = k;
                return Some(t);
            }
            k += 1;
        }
    }
}

fn draw_request(
    c: &WorkloadConfig,
    rng: &mut ChaCha8Rng,
    t: SimTime,
    first: bool,
) -> Option<Arrival> {
    let load = c.load_level;
    if load <= 0.0 {
        return None;
    }
    let time = match c.process {
        ArrivalProcess::Poisson => {
            let gap = Exp::new(load / 1000.0).expect("positive rate").sample(rng);
            t + SimTime::from_ms_f64(gap)
        }
        ArrivalProcess::Periodic => {
            let period = 1000.0 / load;
            if first {
                let k = (t.as_ms_f64() / period).ceil();
                SimTime::from_ms_f64(k * period)
            } else {
                t + SimTime::from_ms_f64(period)
            }
        }
    };
    let (kind, resource) = if rng.random::<f64>() < c.web_probability {
        let kind = if rng.random::<f64>() < c.nginx_share {
            ActivityKind::TlsHandshakeNginx
        } else {
            ActivityKind::TlsHandshakeApache
        };
        (kind, rng.random_range(0..c.resource_count))
    } else {
        (ActivityKind::SshHandshake, 0)
    };
    Some(Arrival {
        time,
        kind,
        resource,
    })
}

impl Iterator for ArrivalStream {
    type Item = Arrival;

    fn next(&mut self) -> Option<Arrival> {
        let take_flush = match (self.next_request, self.next_flush) {
            (None, None) => return None,
            (Some(_), None) => false,
            (None, Some(_)) => true,
            (Some(r), Some(f)) => f < r.time,
        };
        if take_flush {
            let t = self.next_flush.take()?;
            let k = self.flush_index + 1;
            self.next_flush = Some(self.flush_time(k));
            self.flush_index = k;
            Some(trigger_activity(ActivityKind::DiskWrite, t))
        } else {
            let current = self.next_request.take()?;
            self.next_request = draw_request(&self.config, &mut self.rng, current.time, false);
            Some(current)
        }
    }
}

/// All arrivals in `[0, horizon)`.
pub fn schedule_workload(
    config: &WorkloadConfig,
    horizon: SimTime,
    seed: u64,
) -> Result<Vec<Arrival>, WorkloadError> {
    Ok(ArrivalStream::new(config.clone(), seed, SimTime::ZERO)?
        .take_while(|a| a.time < horizon)
        .collect())
}

/// Merges two time-ordered arrival sequences; on equal times `a` goes first.
pub fn merge_arrivals<A, B>(a: A, b: B) -> impl Iterator<Item = Arrival>
where
    A: IntoIterator<Item = Arrival>,
    B: IntoIterator<Item = Arrival>,
{
    let mut a = a.into_iter().peekable();
    let mut b = b.into_iter().peekable();
    std::iter::from_fn(move || match (a.peek(), b.peek()) {
        (Some(x), Some(y)) if y.time < x.time => b.next(),
        (Some(_), _) => a.next(),
        (None, _) => b.next(),
    })
}
