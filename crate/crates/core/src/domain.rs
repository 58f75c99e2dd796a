//! Shared domain types: time-of-week keys, segment positions, traffic samples
//! and the site map that ties detector slots and probe segments to sections.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of 15-minute slots in a week.
pub const SLOTS_PER_WEEK: usize = 7 * 24 * 4;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("time key out of range: dow={dow} hod={hod} moh={moh}")]
    TimeKeyRange { dow: u8, hod: u8, moh: u8 },
    #[error("section id must be non-empty")]
    EmptySectionId,
    #[error("unknown segment position `{0}`")]
    UnknownPosition(String),
    #[error("unknown period `{0}`")]
    UnknownPeriod(String),
    #[error("invalid site map: {0}")]
    InvalidSiteMap(String),
    #[error("reading site map {path}: {source}")]
    SiteMapIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing site map {path}: {source}")]
    SiteMapJson {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Day-of-week / hour-of-day / quarter-of-hour encoding of a 15-minute slot.
///
/// Field order gives the lexicographic (dow, hod, moh) ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeKey {
    dow: u8,
    hod: u8,
    moh: u8,
}

impl TimeKey {
    /// `dow` is 1 (Sunday) ..= 7 (Saturday), `hod` 0..=23, `moh` 1..=4.
    pub fn new(dow: u8, hod: u8, moh: u8) -> Result<Self, DomainError> {
        if !(1..=7).contains(&dow) || hod > 23 || !(1..=4).contains(&moh) {
            return Err(DomainError::TimeKeyRange { dow, hod, moh });
        }
        Ok(Self { dow, hod, moh })
    }

    pub fn dow(self) -> u8 {
        self.dow
    }

    pub fn hod(self) -> u8 {
        self.hod
    }

    pub fn moh(self) -> u8 {
        self.moh
    }

    /// Position of the slot within the week, 0..672, Sunday 00:00 first.
    pub fn week_slot(self) -> usize {
        (self.dow as usize - 1) * 96 + self.hod as usize * 4 + (self.moh as usize - 1)
    }

    pub fn from_week_slot(slot: usize) -> Option<Self> {
        if slot >= SLOTS_PER_WEEK {
            return None;
        }
        Some(Self {
            dow: (slot / 96) as u8 + 1,
            hod: ((slot % 96) / 4) as u8,
            moh: (slot % 4) as u8 + 1,
        })
    }
}

impl fmt::Display for TimeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dow{}-{:02}h-q{}", self.dow, self.hod, self.moh)
    }
}

/// Encodes a wall-clock timestamp into its 15-minute time-of-week slot.
pub fn encode_time_key(timestamp: &NaiveDateTime) -> TimeKey {
    TimeKey {
        dow: timestamp.weekday().number_from_sunday() as u8,
        hod: timestamp.hour() as u8,
        moh: (timestamp.minute() / 15) as u8 + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentPosition {
    Upstream = 1,
    Downstream = 2,
    #[serde(rename = "onramp")]
    OnRamp = 3,
}

impl SegmentPosition {
    pub const ALL: [SegmentPosition; 3] = [Self::Upstream, Self::Downstream, Self::OnRamp];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::Upstream),
            2 => Some(Self::Downstream),
            3 => Some(Self::OnRamp),
            _ => None,
        }
    }

    /// Key used in site maps and sample files.
    pub fn key(self) -> &'static str {
        match self {
            Self::Upstream => "upstream",
            Self::Downstream => "downstream",
            Self::OnRamp => "onramp",
        }
    }

    /// Short label used in variable names (`Before_up_flow`).
    pub fn short(self) -> &'static str {
        match self {
            Self::Upstream => "up",
            Self::Downstream => "down",
            Self::OnRamp => "ramp",
        }
    }
}

impl fmt::Display for SegmentPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for SegmentPosition {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upstream" | "up" | "1" => Ok(Self::Upstream),
            "downstream" | "down" | "2" => Ok(Self::Downstream),
            "onramp" | "ramp" | "3" => Ok(Self::OnRamp),
            other => Err(DomainError::UnknownPosition(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SectionId(String);

impl SectionId {
    pub fn new(id: impl Into<String>) -> Result<Self, DomainError> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(DomainError::EmptySectionId);
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SectionId {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<SectionId> for String {
    fn from(value: SectionId) -> Self {
        value.0
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Before,
    After,
}

impl Period {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Before => "before",
            Self::After => "after",
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Period {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "before" => Ok(Self::Before),
            "after" => Ok(Self::After),
            other => Err(DomainError::UnknownPeriod(other.to_string())),
        }
    }
}

/// One 15-minute aggregate for a (section, position, week, slot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSample {
    pub section: SectionId,
    pub position: SegmentPosition,
    pub period: Period,
    pub week_index: u32,
    pub key: TimeKey,
    /// mph
    pub mean_speed: f64,
    /// percent, 0..=100
    pub occupancy: f64,
    /// veh/hr/ln
    pub flow_rate: f64,
    /// veh/mi/ln, before period only
    pub density: Option<f64>,
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    SpeedNegative,
    OccupancyRange,
    FlowNegative,
    DensityNegative,
    DensityOnlyInBefore,
    CoverageRange,
    WeekIndex,
    NonFinite,
}

impl Violation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SpeedNegative => "speed negative",
            Self::OccupancyRange => "occupancy range",
            Self::FlowNegative => "flow negative",
            Self::DensityNegative => "density negative",
            Self::DensityOnlyInBefore => "density only in Before",
            Self::CoverageRange => "coverage range",
            Self::WeekIndex => "week index",
            Self::NonFinite => "non-finite value",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Returns every violated sample invariant; empty means valid.
pub fn validate_sample(s: &TrafficSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let finite = [s.mean_speed, s.occupancy, s.flow_rate, s.coverage]
        .iter()
        .chain(s.density.iter())
        .all(|v| v.is_finite());
    if !finite {
        out.push(Violation::NonFinite);
    }
    if s.mean_speed < 0.0 {
        out.push(Violation::SpeedNegative);
    }
    if !(0.0..=100.0).contains(&s.occupancy) {
        out.push(Violation::OccupancyRange);
    }
    if s.flow_rate < 0.0 {
        out.push(Violation::FlowNegative);
    }
    if let Some(d) = s.density {
        if d < 0.0 {
            out.push(Violation::DensityNegative);
        }
        if s.period == Period::After {
            out.push(Violation::DensityOnlyInBefore);
        }
    }
    if !(0.0..=1.0).contains(&s.coverage) {
        out.push(Violation::CoverageRange);
    }
    if s.week_index < 1 {
        out.push(Violation::WeekIndex);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSite {
    pub lanes: u32,
    pub length_miles: f64,
    /// Loop slot numbers, one per instrumented lane.
    pub slots: Vec<u32>,
    pub probe_segment_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionSite {
    pub section_id: SectionId,
    pub station_id: u32,
    pub positions: BTreeMap<SegmentPosition, PositionSite>,
    #[serde(default)]
    pub excluded_slots: Vec<u32>,
}

/// Outcome of looking up a loop slot in the site map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotLookup<'a> {
    Mapped {
        section: &'a SectionId,
        position: SegmentPosition,
        lane: u32,
    },
    Excluded,
    Unmapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SiteMapDoc", into = "SiteMapDoc")]
pub struct SiteMap {
    sections: Vec<SectionSite>,
    slot_index: HashMap<(u32, u32), (usize, SegmentPosition, u32)>,
    excluded: HashSet<(u32, u32)>,
    segment_index: HashMap<String, (usize, SegmentPosition)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SiteMapDoc {
    sections: Vec<SectionSite>,
}

impl TryFrom<SiteMapDoc> for SiteMap {
    type Error = DomainError;

    fn try_from(doc: SiteMapDoc) -> Result<Self, Self::Error> {
        SiteMap::new(doc.sections)
    }
}

impl From<SiteMap> for SiteMapDoc {
    fn from(map: SiteMap) -> Self {
        SiteMapDoc { sections: map.sections }
    }
}

impl SiteMap {
    pub fn new(sections: Vec<SectionSite>) -> Result<Self, DomainError> {
        let invalid = |msg: String| Err(DomainError::InvalidSiteMap(msg));
        let mut slot_index = HashMap::new();
        let mut excluded = HashSet::new();
        let mut segment_index = HashMap::new();
        let mut ids = HashSet::new();
        for (idx, site) in sections.iter().enumerate() {
            if !ids.insert(site.section_id.clone()) {
                return invalid(format!("duplicate section `{}`", site.section_id));
            }
            if site.positions.is_empty() {
                return invalid(format!("section `{}` has no positions", site.section_id));
            }
            for (&position, pos) in &site.positions {
                if pos.lanes < 1 {
                    return invalid(format!("{}/{position}: lanes must be >= 1", site.section_id));
                }
                if !(pos.length_miles > 0.0 && pos.length_miles.is_finite()) {
                    return invalid(format!(
                        "{}/{position}: segment length must be > 0",
                        site.section_id
                    ));
                }
                for (lane, &slot) in pos.slots.iter().enumerate() {
                    if slot_index
                        .insert((site.station_id, slot), (idx, position, lane as u32 + 1))
                        .is_some()
                    {
                        return invalid(format!(
                            "station {} slot {slot} mapped twice",
                            site.station_id
                        ));
                    }
                }
                for seg in &pos.probe_segment_ids {
                    if segment_index.insert(seg.clone(), (idx, position)).is_some() {
                        return invalid(format!("probe segment {seg} mapped twice"));
                    }
                }
            }
            for &slot in &site.excluded_slots {
                if slot_index.contains_key(&(site.station_id, slot)) {
                    return invalid(format!(
                        "station {} slot {slot} is both mapped and excluded",
                        site.station_id
                    ));
                }
                excluded.insert((site.station_id, slot));
            }
        }
        Ok(Self {
            sections,
            slot_index,
            excluded,
            segment_index,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn load(path: &Path) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path).map_err(|source| DomainError::SiteMapIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text).map_err(|source| DomainError::SiteMapJson {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("site map serializes")
    }

    pub fn sections(&self) -> &[SectionSite] {
        &self.sections
    }

    pub fn section(&self, id: &SectionId) -> Option<&SectionSite> {
        self.sections.iter().find(|s| &s.section_id == id)
    }

    pub fn position(&self, id: &SectionId, position: SegmentPosition) -> Option<&PositionSite> {
        self.section(id).and_then(|s| s.positions.get(&position))
    }

    pub fn lookup_slot(&self, station_id: u32, slot: u32) -> SlotLookup<'_> {
        if let Some(&(idx, position, lane)) = self.slot_index.get(&(station_id, slot)) {
            SlotLookup::Mapped {
                section: &self.sections[idx].section_id,
                position,
                lane,
            }
        } else if self.excluded.contains(&(station_id, slot)) {
            SlotLookup::Excluded
        } else {
            SlotLookup::Unmapped
        }
    }

    pub fn lookup_segment(&self, segment_id: &str) -> Option<(&SectionId, SegmentPosition)> {
        self.segment_index
            .get(segment_id)
            .map(|&(idx, pos)| (&self.sections[idx].section_id, pos))
    }
}
