//! Memory layout and activity templates.
//!
//! The guest is carved into named regions of contiguous pages. Templates
//! describe an activity as timed steps that touch pages of a region, chosen
//! by a selection rule, or the pages of a named secret. Steps that touch a
//! secret are its uses.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActivityKind, EventTag};
use crate::clock::SimTime;
use crate::mem_model::{AccessType, Gpn, GuestMemory, Perms};

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("region {0:?} defined twice")]
    DuplicateRegion(String),
    #[error("region {0:?} is empty")]
    EmptyRegion(String),
    #[error("unknown region {0:?}")]
    UnknownRegion(String),
    #[error("template {kind}: {msg}")]
    Invalid { kind: ActivityKind, msg: String },
    #[error("background process over {0:?}: rate must be positive")]
    BadRate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionKind {
    /// Executable pages; every access is an instruction fetch.
    Code,
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub pages: u64,
    pub kind: RegionKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub start: Gpn,
    pub pages: u64,
    pub kind: RegionKind,
}

impl Region {
    pub fn contains(&self, gpa: Gpn) -> bool {
        gpa >= self.start && gpa < self.start + self.pages
    }

    pub fn end(&self) -> Gpn {
        self.start + self.pages
    }
}

/// Regions laid out back to back from page 0, in definition order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    regions: Vec<Region>,
    index: HashMap<String, usize>,
}

impl Layout {
    pub fn new(specs: &[RegionSpec]) -> Result<Self, TemplateError> {
        let mut regions = Vec::with_capacity(specs.len());
        let mut index = HashMap::new();
        let mut start = 0;
        for spec in specs {
            if spec.pages == 0 {
                return Err(TemplateError::EmptyRegion(spec.name.clone()));
            }
            if index.insert(spec.name.clone(), regions.len()).is_some() {
                return Err(TemplateError::DuplicateRegion(spec.name.clone()));
            }
            regions.push(Region {
                name: spec.name.clone(),
                start,
                pages: spec.pages,
                kind: spec.kind,
            });
            start += spec.pages;
        }
        Ok(Layout { regions, index })
    }

    pub fn total_pages(&self) -> u64 {
        self.regions.last().map_or(0, Region::end)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn index_of(&self, name: &str) -> Result<usize, TemplateError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TemplateError::UnknownRegion(name.to_string()))
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.index.get(name).map(|&i| &self.regions[i])
    }

    pub fn region_of(&self, gpa: Gpn) -> Option<&Region> {
        let i = self.regions.partition_point(|r| r.end() <= gpa);
        self.regions.get(i).filter(|r| r.contains(gpa))
    }

    /// A zeroed guest sized for this layout with per-region permissions.
    pub fn build_memory(&self) -> GuestMemory {
        let mut mem = GuestMemory::new(self.total_pages());
        for r in &self.regions {
            let perms = match r.kind {
                RegionKind::Code => Perms::READ | Perms::EXECUTE,
                RegionKind::Data => Perms::READ | Perms::WRITE,
            };
            for gpa in r.start..r.end() {
                mem.set_perms(gpa, perms).expect("page inside layout");
            }
        }
        mem
    }
}

/// How a step picks pages inside its region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Select {
    /// The first `pages` pages of the region, every time.
    Fixed,
    /// `pages` distinct pages drawn uniformly per activity instance.
    Random,
    /// Newly allocated pages from a per-region cursor that wraps around.
    Fresh,
    /// The first `pages` pages of the slice serving the requested resource.
    Resource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub at_ms: f64,
    /// When set, the step's accesses are spread evenly over [at_ms, to_ms).
    #[serde(default)]
    pub to_ms: Option<f64>,
    #[serde(default)]
    pub region: Option<String>,
    #[serde(default = "one")]
    pub pages: u64,
    #[serde(default)]
    pub select: Option<Select>,
    /// Touch the pages of this secret instead of a region.
    #[serde(default)]
    pub secret: Option<String>,
    pub access: AccessType,
}

fn one() -> u64 {
    1
}

/// Delay between an observable event and the moment tracking actually
/// stops: `base + per_load * load_level + U(0, jitter)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionDelay {
    pub base_ms: f64,
    #[serde(default)]
    pub per_load_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
}

impl DetectionDelay {
    pub fn constant(ms: f64) -> Self {
        DetectionDelay {
            base_ms: ms,
            per_load_ms: 0.0,
            jitter_ms: 0.0,
        }
    }

    /// Delay for `load_level` given a uniform sample `u` in [0, 1).
    pub fn at(&self, load_level: f64, u: f64) -> SimTime {
        SimTime::from_ms_f64(self.base_ms + self.per_load_ms * load_level + self.jitter_ms * u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub end_event: EventTag,
    pub end_at_ms: f64,
    pub detection: DetectionDelay,
    pub steps: Vec<StepSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Region {
        region: usize,
        select: Select,
        pages: u64,
    },
    /// Every page of the secret, touched `repeats` times spread evenly
    /// over the step.
    Secret { name: String, repeats: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub at: SimTime,
    pub to: SimTime,
    pub target: Target,
    pub access: AccessType,
}

/// A validated template bound to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityTemplate {
    pub kind: ActivityKind,
    pub end_event: EventTag,
    pub end_offset: SimTime,
    pub detection: DetectionDelay,
    pub steps: Vec<Step>,
}

impl ActivityTemplate {
    pub fn compile(
        kind: ActivityKind,
        spec: &TemplateSpec,
        layout: &Layout,
    ) -> Result<Self, TemplateError> {
        let invalid = |msg: String| TemplateError::Invalid { kind, msg };
        let time = |ms: f64, what: &str| {
            if ms.is_finite() && ms >= 0.0 {
                Ok(SimTime::from_ms_f64(ms))
            } else {
                Err(invalid(format!("{what} {ms} must be a nonnegative time")))
            }
        };
        let mut steps = Vec::with_capacity(spec.steps.len());
        let mut last_at = SimTime::ZERO;
        for (i, s) in spec.steps.iter().enumerate() {
            let at = time(s.at_ms, "step start")?;
            let to = match s.to_ms {
                Some(ms) => time(ms, "step end")?,
                None => at,
            };
            if to < at {
                return Err(invalid(format!("step {i} ends before it starts")));
            }
            if at < last_at {
                return Err(invalid(format!("step {i} starts before step {}", i - 1)));
            }
            last_at = at;
            let target = match (&s.region, &s.secret) {
                (Some(name), None) => {
                    let region = layout.index_of(name)?;
                    let size = layout.regions()[region].pages;
                    if s.pages == 0 || s.pages > size {
                        return Err(invalid(format!(
                            "step {i} wants {} pages of {name:?} which has {size}",
                            s.pages
                        )));
                    }
                    let select = s
                        .select
                        .ok_or_else(|| invalid(format!("step {i} needs a select rule")))?;
                    Target::Region {
                        region,
                        select,
                        pages: s.pages,
                    }
                }
                (None, Some(name)) => Target::Secret {
                    name: name.clone(),
                    repeats: s.pages.max(1),
                },
                _ => {
                    return Err(invalid(format!(
                        "step {i} must name exactly one of region or secret"
                    )))
                }
            };
            steps.push(Step {
                at,
                to,
                target,
                access: s.access,
            });
        }
        let end_offset = time(spec.end_at_ms, "end event")?;
        let template = ActivityTemplate {
            kind,
            end_event: spec.end_event,
            end_offset,
            detection: spec.detection,
            steps,
        };
        if let Some(last_use) = template.last_use_offset() {
            if last_use >= end_offset {
                return Err(invalid("last secret use must precede the end event".into()));
            }
        }
        Ok(template)
    }

    /// Offset of the last secret use, if the template uses a secret.
    pub fn last_use_offset(&self) -> Option<SimTime> {
        self.steps
            .iter()
            .filter(|s| matches!(s.target, Target::Secret { .. }))
            .map(|s| s.to)
            .max()
    }

    /// Gap between the last secret use and the end event.
    pub fn critical_window(&self) -> Option<SimTime> {
        self.last_use_offset().map(|u| self.end_offset - u)
    }

    /// Offset of the last trace item, including the end event.
    pub fn duration(&self) -> SimTime {
        self.steps
            .iter()
            .map(|s| s.to)
            .max()
            .unwrap_or(SimTime::ZERO)
            .max(self.end_offset)
    }

    /// Names of the secrets this template touches.
    pub fn secrets(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().filter_map(|s| match &s.target {
            Target::Secret { name, .. } => Some(name.as_str()),
            Target::Region { .. } => None,
        })
    }
}

/// First-touch process over a region standing in for everything the guest
/// does besides the modeled activities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub region: String,
    /// Access rate over the whole region, in pages per second.
    pub rate_per_s: f64,
    /// Fraction of data-page touches that are writes.
    #[serde(default)]
    pub write_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub region: usize,
    pub rate_per_ms: f64,
    pub write_share: f64,
}

/// Layout, templates and background processes of one simulated guest.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub layout: Layout,
    pub templates: BTreeMap<ActivityKind, ActivityTemplate>,
    pub background: Vec<Background>,
}

impl World {
    pub fn new(
        regions: &[RegionSpec],
        templates: &BTreeMap<ActivityKind, TemplateSpec>,
        background: &[BackgroundSpec],
    ) -> Result<Self, TemplateError> {
        let layout = Layout::new(regions)?;
        let templates = templates
            .iter()
            .map(|(&kind, spec)| Ok((kind, ActivityTemplate::compile(kind, spec, &layout)?)))
            .collect::<Result<_, TemplateError>>()?;
        let background = background
            .iter()
            .map(|b| {
                if !(b.rate_per_s.is_finite() && b.rate_per_s > 0.0) {
                    return Err(TemplateError::BadRate(b.region.clone()));
                }
                Ok(Background {
                    region: layout.index_of(&b.region)?,
                    rate_per_ms: b.rate_per_s / 1000.0,
                    write_share: b.write_share.clamp(0.0, 1.0),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(World {
            layout,
            templates,
            background,
        })
    }

    pub fn template(&self, kind: ActivityKind) -> Option<&ActivityTemplate> {
        self.templates.get(&kind)
    }

    /// Longest template duration, the lookback needed to catch every
    /// activity still running at a given instant.
    pub fn max_activity_duration(&self) -> SimTime {
        self.templates
            .values()
            .map(ActivityTemplate::duration)
            .max()
            .unwrap_or(SimTime::ZERO)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regions() -> Vec<RegionSpec> {
        vec![
            RegionSpec {
                name: "text".into(),
                pages: 4,
                kind: RegionKind::Code,
            },
            RegionSpec {
                name: "heap".into(),
                pages: 10,
                kind: RegionKind::Data,
            },
        ]
    }

    fn step(at: f64, region: Option<&str>, secret: Option<&str>) -> StepSpec {
        StepSpec {
            at_ms: at,
            to_ms: None,
            region: region.map(String::from),
            pages: 1,
            select: region.map(|_| Select::Fixed),
            secret: secret.map(String::from),
            access: AccessType::Read,
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let layout = Layout::new(&regions()).unwrap();
        assert_eq!(layout.total_pages(), 14);
        assert_eq!(layout.region("heap").unwrap().start, 4);
        assert_eq!(layout.region_of(3).unwrap().name, "text");
        assert_eq!(layout.region_of(4).unwrap().name, "heap");
        assert!(layout.region_of(14).is_none());
        let mem = layout.build_memory();
        assert!(mem.slat_entry(0).unwrap().perms.contains(Perms::EXECUTE));
        assert!(!mem.slat_entry(5).unwrap().perms.contains(Perms::EXECUTE));
        let mut dup = regions();
        dup.push(dup[0].clone());
        assert_eq!(
            Layout::new(&dup),
            Err(TemplateError::DuplicateRegion("text".into()))
        );
    }

    #[test]
    fn use_must_precede_end() {
        let layout = Layout::new(&regions()).unwrap();
        let mut spec = TemplateSpec {
            end_event: EventTag::ChangeCipherSpec,
            end_at_ms: 5.0,
            detection: DetectionDelay::constant(1.0),
            steps: vec![step(0.0, Some("text"), None), step(4.0, None, Some("k"))],
        };
        let t = ActivityTemplate::compile(ActivityKind::TlsHandshakeNginx, &spec, &layout).unwrap();
        assert_eq!(t.critical_window(), Some(SimTime::from_ms(1)));
        assert_eq!(t.duration(), SimTime::from_ms(5));
        spec.end_at_ms = 4.0;
        assert!(
            ActivityTemplate::compile(ActivityKind::TlsHandshakeNginx, &spec, &layout).is_err()
        );
    }

    #[test]
    fn step_validation() {
        let layout = Layout::new(&regions()).unwrap();
        let base = TemplateSpec {
            end_event: EventTag::DiskImageWrite,
            end_at_ms: 5.0,
            detection: DetectionDelay::constant(1.0),
            steps: vec![],
        };
        let compile = |steps: Vec<StepSpec>| {
            let spec = TemplateSpec {
                steps,
                ..base.clone()
            };
            ActivityTemplate::compile(ActivityKind::DiskWrite, &spec, &layout)
        };
        assert!(compile(vec![step(0.0, Some("nowhere"), None)]).is_err());
        assert!(compile(vec![step(0.0, Some("text"), Some("k"))]).is_err());
        assert!(compile(vec![
            step(2.0, Some("text"), None),
            step(1.0, Some("text"), None)
        ])
        .is_err());
        let mut big = step(0.0, Some("text"), None);
        big.pages = 5;
        assert!(compile(vec![big]).is_err());
        assert!(compile(vec![step(0.0, Some("heap"), None)]).is_ok());
    }

    #[test]
    fn detection_delay_formula() {
        let d = DetectionDelay {
            base_ms: 8.0,
            per_load_ms: 0.5,
            jitter_ms: 2.0,
        };
        assert_eq!(d.at(4.0, 0.0), SimTime::from_ms(10));
        assert_eq!(d.at(4.0, 0.5), SimTime::from_ms(11));
    }
}
