//! Loop-detector and probe-vehicle CSV ingestion, and aggregation of raw
//! records into 15-minute [`TrafficSample`]s.
//!
//! Loop records arrive every 20 seconds per detector slot (lane); probe
//! records arrive every minute per road segment. A slot becomes a sample
//! only when both sources cover it well enough (see [`AggregateConfig`]).

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    encode_time_key, Period, SectionId, SegmentPosition, SiteMap, SlotLookup, TimeKey,
    TrafficSample,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed header: missing column(s) {}", .missing.join(", "))]
    MalformedHeader { missing: Vec<String> },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("samples file line {line}: {message}")]
    BadSample { line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub id: String,
    pub timestamp: NaiveDateTime,
    pub station_id: u32,
    pub slot_number: u32,
    /// Vehicles counted in the 20-second interval.
    pub volume: u32,
    pub speed: f64,
    pub occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub timestamp: NaiveDateTime,
    pub segment_id: String,
    pub speed: f64,
    /// Minutes.
    pub travel_time: f64,
    /// 0..=1, from the optional `confidenceValue` column (percent).
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    Malformed(String),
    UnmappedSlot { station_id: u32, slot: u32 },
    ExcludedSlot { station_id: u32, slot: u32 },
    UnmappedSegment(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRow {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub rows: Vec<SkippedRow>,
}

impl SkipReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn malformed(&self) -> impl Iterator<Item = &SkippedRow> {
        self.rows
            .iter()
            .filter(|r| matches!(r.reason, SkipReason::Malformed(_)))
    }

    fn push(&mut self, line: u64, reason: SkipReason) {
        self.rows.push(SkippedRow { line, reason });
    }
}

/// Accepts `M/D/YYYY H:MM[:SS]` and ISO-8601 (`YYYY-MM-DDTHH:MM:SS`, space separator allowed).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 6] = [
        "%m/%d/%Y %H:%M",
        "%m/%d/%Y %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

struct Columns(Vec<usize>);

fn locate_columns(headers: &csv::StringRecord, required: &[&str]) -> Result<Columns, IngestError> {
    let mut idx = Vec::with_capacity(required.len());
    let mut missing = Vec::new();
    for name in required {
        match headers.iter().position(|h| h.trim() == *name) {
            Some(i) => idx.push(i),
            None => missing.push(name.to_string()),
        }
    }
    if missing.is_empty() {
        Ok(Columns(idx))
    } else {
        Err(IngestError::MalformedHeader { missing })
    }
}

fn field<'r>(record: &'r csv::StringRecord, col: usize, name: &str) -> Result<&'r str, String> {
    record
        .get(col)
        .map(str::trim)
        .ok_or_else(|| format!("missing field {name}"))
}

fn num<T: std::str::FromStr>(
    record: &csv::StringRecord,
    col: usize,
    name: &str,
) -> Result<T, String> {
    let raw = field(record, col, name)?;
    raw.parse::<T>()
        .map_err(|_| format!("{name}: cannot parse `{raw}`"))
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input)
}

pub(crate) const LOOP_COLUMNS: [&str; 7] = [
    "ID",
    "TimeStamp",
    "DetectorstationID",
    "SlotNumber",
    "Volume",
    "Speed",
    "Occupancy",
];

/// Parses 20-second loop-detector rows. Rows with unmapped or excluded slots
/// and malformed rows go to the skip report; only a bad header is fatal.
pub fn parse_loop_csv<R: Read>(
    input: R,
    map: &SiteMap,
) -> Result<(Vec<LoopRecord>, SkipReport), IngestError> {
    let mut rdr = reader(input);
    let cols = locate_columns(rdr.headers()?, &LOOP_COLUMNS)?.0;
    let mut out = Vec::new();
    let mut skips = SkipReport::default();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                skips.push(line, SkipReason::Malformed(e.to_string()));
                continue;
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        let parsed = (|| -> Result<LoopRecord, String> {
            let ts_raw = field(&record, cols[1], "TimeStamp")?;
            let timestamp =
                parse_timestamp(ts_raw).ok_or_else(|| format!("TimeStamp: cannot parse `{ts_raw}`"))?;
            let rec = LoopRecord {
                id: field(&record, cols[0], "ID")?.to_string(),
                timestamp,
                station_id: num(&record, cols[2], "DetectorstationID")?,
                slot_number: num(&record, cols[3], "SlotNumber")?,
                volume: num(&record, cols[4], "Volume")?,
                speed: num(&record, cols[5], "Speed")?,
                occupancy: num(&record, cols[6], "Occupancy")?,
            };
            if !(0.0..=100.0).contains(&rec.occupancy) {
                return Err(format!("Occupancy {} outside 0..=100", rec.occupancy));
            }
            if !rec.speed.is_finite() || rec.speed < 0.0 {
                return Err(format!("Speed {} invalid", rec.speed));
            }
            Ok(rec)
        })();
        match parsed {
            Err(msg) => skips.push(line, SkipReason::Malformed(msg)),
            Ok(rec) => match map.lookup_slot(rec.station_id, rec.slot_number) {
                SlotLookup::Mapped { .. } => out.push(rec),
                SlotLookup::Excluded => skips.push(
                    line,
                    SkipReason::ExcludedSlot {
                        station_id: rec.station_id,
                        slot: rec.slot_number,
                    },
                ),
                SlotLookup::Unmapped => skips.push(
                    line,
                    SkipReason::UnmappedSlot {
                        station_id: rec.station_id,
                        slot: rec.slot_number,
                    },
                ),
            },
        }
    }
    Ok((out, skips))
}

const PROBE_COLUMNS: [&str; 4] = ["timestamp", "SegmentID", "speed", "travelTimeMinutes"];

/// Parses one-minute probe rows; extra columns are ignored except
/// `confidenceValue`, which is kept when present.
pub fn parse_probe_csv<R: Read>(
    input: R,
    map: &SiteMap,
) -> Result<(Vec<ProbeRecord>, SkipReport), IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let cols = locate_columns(&headers, &PROBE_COLUMNS)?.0;
    let confidence_col = headers.iter().position(|h| h.trim() == "confidenceValue");
    let mut out = Vec::new();
    let mut skips = SkipReport::default();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                skips.push(line, SkipReason::Malformed(e.to_string()));
                continue;
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        let parsed = (|| -> Result<ProbeRecord, String> {
            let ts_raw = field(&record, cols[0], "timestamp")?;
            let timestamp =
                parse_timestamp(ts_raw).ok_or_else(|| format!("timestamp: cannot parse `{ts_raw}`"))?;
            let speed: f64 = num(&record, cols[2], "speed")?;
            let travel_time: f64 = num(&record, cols[3], "travelTimeMinutes")?;
            if !speed.is_finite() || speed < 0.0 {
                return Err(format!("speed {speed} invalid"));
            }
            if !travel_time.is_finite() || travel_time <= 0.0 {
                return Err(format!("travelTimeMinutes {travel_time} must be > 0"));
            }
            let confidence = match confidence_col {
                Some(c) if record.get(c).is_some_and(|v| !v.trim().is_empty()) => {
                    Some(num::<f64>(&record, c, "confidenceValue")? / 100.0)
                }
                _ => None,
            };
            Ok(ProbeRecord {
                timestamp,
                segment_id: field(&record, cols[1], "SegmentID")?.to_string(),
                speed,
                travel_time,
                confidence,
            })
        })();
        match parsed {
            Err(msg) => skips.push(line, SkipReason::Malformed(msg)),
            Ok(rec) if map.lookup_segment(&rec.segment_id).is_some() => out.push(rec),
            Ok(rec) => skips.push(line, SkipReason::UnmappedSegment(rec.segment_id)),
        }
    }
    Ok((out, skips))
}

pub fn write_loop_csv<W: Write>(out: W, records: &[LoopRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOOP_COLUMNS)?;
    for r in records {
        write_loop_row(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_loop_row<W: Write>(
    w: &mut csv::Writer<W>,
    r: &LoopRecord,
) -> Result<(), IngestError> {
    w.write_record([
        r.id.clone(),
        format_timestamp(&r.timestamp),
        r.station_id.to_string(),
        r.slot_number.to_string(),
        r.volume.to_string(),
        r.speed.to_string(),
        r.occupancy.to_string(),
    ])?;
    Ok(())
}

pub(crate) const PROBE_WRITE_COLUMNS: [&str; 5] = [
    "timestamp",
    "SegmentID",
    "speed",
    "confidenceValue",
    "travelTimeMinutes",
];

pub fn write_probe_csv<W: Write>(out: W, records: &[ProbeRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROBE_WRITE_COLUMNS)?;
    for r in records {
        write_probe_row(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_probe_row<W: Write>(
    w: &mut csv::Writer<W>,
    r: &ProbeRecord,
) -> Result<(), IngestError> {
    w.write_record([
        format_timestamp(&r.timestamp),
        r.segment_id.clone(),
        r.speed.to_string(),
        r.confidence.map(|c| (c * 100.0).to_string()).unwrap_or_default(),
        r.travel_time.to_string(),
    ])?;
    Ok(())
}

/// Coverage thresholds and the calendar filter applied during aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    /// Fraction of expected 20-second loop records per mapped lane.
    pub min_loop_coverage: f64,
    /// Distinct probe minutes required out of 15.
    pub min_probe_minutes: u32,
    /// Day-of-week codes kept (1 = Sunday).
    pub days: Vec<u8>,
    /// Half-open hour windows `[start, end)` kept.
    pub hour_windows: Vec<(u8, u8)>,
    pub loop_interval_secs: u32,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            min_loop_coverage: 0.8,
            min_probe_minutes: 10,
            days: vec![3, 4, 5],
            hour_windows: vec![(6, 9), (15, 19)],
            loop_interval_secs: 20,
        }
    }
}

impl AggregateConfig {
    pub fn keeps(&self, key: TimeKey) -> bool {
        self.days.contains(&key.dow())
            && self
                .hour_windows
                .iter()
                .any(|&(a, b)| key.hod() >= a && key.hod() < b)
    }

    /// Every time key passing the calendar filter, in order.
    pub fn calendar_keys(&self) -> Vec<TimeKey> {
        (0..crate::domain::SLOTS_PER_WEEK)
            .filter_map(TimeKey::from_week_slot)
            .filter(|k| self.keeps(*k))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    pub slots_kept: usize,
    pub slots_low_loop_coverage: usize,
    pub slots_low_probe_minutes: usize,
    pub records_outside_calendar: usize,
    pub records_unmapped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutput {
    pub samples: Vec<TrafficSample>,
    pub coverage: CoverageReport,
}

type SlotId = (SectionId, SegmentPosition, NaiveDate, TimeKey);

#[derive(Default)]
struct LoopAcc {
    volume: u64,
    occupancies: Vec<f64>,
}

#[derive(Default)]
struct ProbeAcc {
    speeds: Vec<f64>,
    minutes: u16,
}

fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Aggregates one period's raw records into 15-minute samples.
///
/// Speed is the probe mean over the slot, flow is the summed loop volume over
/// the slot and mapped lanes scaled to veh/hr/ln, occupancy is the mean over
/// all loop readings, and density (before period only) is flow / speed.
pub fn aggregate(
    loops: &[LoopRecord],
    probes: &[ProbeRecord],
    map: &SiteMap,
    period: Period,
    cfg: &AggregateConfig,
) -> AggregateOutput {
    let mut coverage = CoverageReport::default();
    let earliest = loops
        .iter()
        .map(|r| r.timestamp.date())
        .chain(probes.iter().map(|r| r.timestamp.date()))
        .min();
    let Some(earliest) = earliest else {
        return AggregateOutput {
            samples: Vec::new(),
            coverage,
        };
    };

    let mut loop_acc: HashMap<SlotId, LoopAcc> = HashMap::new();
    for r in loops {
        let key = encode_time_key(&r.timestamp);
        if !cfg.keeps(key) {
            coverage.records_outside_calendar += 1;
            continue;
        }
        let SlotLookup::Mapped { section, position, .. } = map.lookup_slot(r.station_id, r.slot_number)
        else {
            coverage.records_unmapped += 1;
            continue;
        };
        let acc = loop_acc
            .entry((section.clone(), position, r.timestamp.date(), key))
            .or_default();
        acc.volume += u64::from(r.volume);
        acc.occupancies.push(r.occupancy);
    }

    let mut probe_acc: HashMap<SlotId, ProbeAcc> = HashMap::new();
    for r in probes {
        let key = encode_time_key(&r.timestamp);
        if !cfg.keeps(key) {
            coverage.records_outside_calendar += 1;
            continue;
        }
        let Some((section, position)) = map.lookup_segment(&r.segment_id) else {
            coverage.records_unmapped += 1;
            continue;
        };
        let acc = probe_acc
            .entry((section.clone(), position, r.timestamp.date(), key))
            .or_default();
        acc.speeds.push(r.speed);
        acc.minutes |= 1 << (r.timestamp.minute() % 15);
    }

    let mut slots: BTreeMap<SlotId, (Option<LoopAcc>, Option<ProbeAcc>)> = BTreeMap::new();
    for (id, acc) in loop_acc {
        slots.entry(id).or_default().0 = Some(acc);
    }
    for (id, acc) in probe_acc {
        slots.entry(id).or_default().1 = Some(acc);
    }

    let records_per_lane = 900.0 / f64::from(cfg.loop_interval_secs.max(1));
    let mut samples = Vec::new();
    for ((section, position, date, key), (lp, pr)) in slots {
        let site = map
            .position(&section, position)
            .expect("slot ids come from the site map");
        let expected = records_per_lane * site.slots.len().max(1) as f64;
        let loop_cov = lp.as_ref().map_or(0.0, |l| l.occupancies.len() as f64 / expected);
        let minutes = pr.as_ref().map_or(0, |p| p.minutes.count_ones());
        let (Some(mut lp), Some(mut pr)) = (lp, pr) else {
            if loop_cov < cfg.min_loop_coverage || loop_cov == 0.0 {
                coverage.slots_low_loop_coverage += 1;
            } else {
                coverage.slots_low_probe_minutes += 1;
            }
            continue;
        };
        if loop_cov < cfg.min_loop_coverage {
            coverage.slots_low_loop_coverage += 1;
            continue;
        }
        if minutes < cfg.min_probe_minutes {
            coverage.slots_low_probe_minutes += 1;
            continue;
        }
        let mean_speed = sorted_mean(&mut pr.speeds);
        let occupancy = sorted_mean(&mut lp.occupancies);
        let flow_rate = lp.volume as f64 * 4.0 / f64::from(site.lanes);
        let density = match period {
            Period::Before if mean_speed > 0.0 => Some(flow_rate / mean_speed),
            _ => None,
        };
        let week_index = (date - earliest).num_days() as u32 / 7 + 1;
        debug_assert_eq!(date.weekday().number_from_sunday() as u8, key.dow());
        samples.push(TrafficSample {
            section,
            position,
            period,
            week_index,
            key,
            mean_speed,
            occupancy,
            flow_rate,
            density,
            coverage: loop_cov.min(minutes as f64 / 15.0).min(1.0),
        });
        coverage.slots_kept += 1;
    }
    samples.sort_by(|a, b| {
        (&a.section, a.position, a.week_index, a.key).cmp(&(&b.section, b.position, b.week_index, b.key))
    });
    AggregateOutput { samples, coverage }
}

pub const SAMPLE_COLUMNS: [&str; 12] = [
    "section",
    "position",
    "period",
    "week",
    "dow",
    "hod",
    "moh",
    "mean_speed",
    "occupancy",
    "flow_rate",
    "density",
    "coverage",
];

pub fn write_samples_csv<W: Write>(out: W, samples: &[TrafficSample]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLE_COLUMNS)?;
    for s in samples {
        w.write_record([
            s.section.to_string(),
            s.position.key().to_string(),
            s.period.as_str().to_string(),
            s.week_index.to_string(),
            s.key.dow().to_string(),
            s.key.hod().to_string(),
            s.key.moh().to_string(),
            s.mean_speed.to_string(),
            s.occupancy.to_string(),
            s.flow_rate.to_string(),
            s.density.map(|d| d.to_string()).unwrap_or_default(),
            s.coverage.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<TrafficSample>, IngestError> {
    let mut rdr = reader(input);
    let cols = locate_columns(rdr.headers()?, &SAMPLE_COLUMNS)?.0;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| IngestError::BadSample { line, message };
        let text = |i: usize| field(&rec, cols[i], SAMPLE_COLUMNS[i]).map_err(&bad);
        let key = TimeKey::new(
            num(&rec, cols[4], "dow").map_err(&bad)?,
            num(&rec, cols[5], "hod").map_err(&bad)?,
            num(&rec, cols[6], "moh").map_err(&bad)?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let density_raw = text(10)?;
        out.push(TrafficSample {
            section: SectionId::new(text(0)?).map_err(|e| bad(e.to_string()))?,
            position: text(1)?.parse().map_err(|e: crate::domain::DomainError| bad(e.to_string()))?,
            period: text(2)?.parse().map_err(|e: crate::domain::DomainError| bad(e.to_string()))?,
            week_index: num(&rec, cols[3], "week").map_err(&bad)?,
            key,
            mean_speed: num(&rec, cols[7], "mean_speed").map_err(&bad)?,
            occupancy: num(&rec, cols[8], "occupancy").map_err(&bad)?,
            flow_rate: num(&rec, cols[9], "flow_rate").map_err(&bad)?,
            density: if density_raw.is_empty() {
                None
            } else {
                Some(density_raw.parse().map_err(|_| bad(format!("density `{density_raw}`")))?)
            },
            coverage: num(&rec, cols[11], "coverage").map_err(&bad)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const SITE: &str = r#"{
      "sections": [{
        "section_id": "312",
        "station_id": 312,
        "positions": {
          "upstream": {"lanes": 3, "length_miles": 0.72, "slots": [33, 35, 37], "probe_segment_ids": ["1226240265"]},
          "onramp": {"lanes": 2, "length_miles": 0.26, "slots": [1, 2], "probe_segment_ids": ["1226240266"]},
          "downstream": {"lanes": 4, "length_miles": 0.27, "slots": [41, 42, 43, 44], "probe_segment_ids": ["1226240267"]}
        },
        "excluded_slots": [9, 10, 34, 36, 38]
      }]
    }"#;

    fn site() -> SiteMap {
        SiteMap::from_json_str(SITE).unwrap()
    }

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn loop_sample_row_parses_exactly() {
        let csv = "ID,TimeStamp,DetectorstationID,SlotNumber,Volume,Speed,Occupancy\n\
                   853115071,6/11/2019 6:00,312,33,8,66,12\n";
        let (recs, skips) = parse_loop_csv(csv.as_bytes(), &site()).unwrap();
        assert!(skips.is_empty());
        assert_eq!(
            recs,
            vec![LoopRecord {
                id: "853115071".into(),
                timestamp: ts("2019-06-11T06:00:00"),
                station_id: 312,
                slot_number: 33,
                volume: 8,
                speed: 66.0,
                occupancy: 12.0,
            }]
        );
    }

    #[test]
    fn loop_header_is_order_insensitive_but_required() {
        let csv = "Occupancy,Speed,Volume,SlotNumber,DetectorstationID,TimeStamp,ID\n12,66,8,33,312,6/11/2019 6:00,1\n";
        let (recs, _) = parse_loop_csv(csv.as_bytes(), &site()).unwrap();
        assert_eq!(recs[0].volume, 8);
        let bad = "ID,TimeStamp,DetectorstationID,SlotNumber,Volume,Speed\n";
        match parse_loop_csv(bad.as_bytes(), &site()) {
            Err(IngestError::MalformedHeader { missing }) => assert_eq!(missing, vec!["Occupancy"]),
            other => panic!("expected header error, got {other:?}"),
        }
        let lower = "id,TimeStamp,DetectorstationID,SlotNumber,Volume,Speed,Occupancy\n";
        assert!(parse_loop_csv(lower.as_bytes(), &site()).is_err());
    }

    #[test]
    fn empty_loop_file() {
        let csv = "ID,TimeStamp,DetectorstationID,SlotNumber,Volume,Speed,Occupancy\n";
        let (recs, skips) = parse_loop_csv(csv.as_bytes(), &site()).unwrap();
        assert!(recs.is_empty() && skips.is_empty());
    }

    #[test]
    fn excluded_and_malformed_rows_are_skipped_with_lines() {
        let csv = "ID,TimeStamp,DetectorstationID,SlotNumber,Volume,Speed,Occupancy\n\
                   1,6/11/2019 6:00,312,9,4,0,4\n\
                   1,6/11/2019 6:00,312,33,x,66,12\n\
                   1,6/11/2019 6:00,312,35,7,76,8\n\
                   1,6/11/2019 6:00,312,77,7,76,8\n\
                   1,6/11/2019 6:00,312,37,8,80,108\n";
        let (recs, skips) = parse_loop_csv(csv.as_bytes(), &site()).unwrap();
        assert_eq!(recs.len(), 1);
        let lines: Vec<(u64, &SkipReason)> = skips.rows.iter().map(|r| (r.line, &r.reason)).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], (2, &SkipReason::ExcludedSlot { station_id: 312, slot: 9 }));
        assert!(matches!(lines[1], (3, SkipReason::Malformed(_))));
        assert_eq!(lines[2], (5, &SkipReason::UnmappedSlot { station_id: 312, slot: 77 }));
        assert!(matches!(lines[3], (6, SkipReason::Malformed(_))));
        assert_eq!(skips.malformed().count(), 2);
    }

    #[test]
    fn probe_sample_row_parses_exactly() {
        let csv = "timestamp,SegmentID,type,speed,average,reference,score,confidenceValue,travelTimeMinutes\n\
                   4/16/2019 6:07,1226240265,XDS,50,63,63,30,32,0.49\n\
                   4/16/2019 6:07,9999,XDS,50,63,63,30,32,0.49\n";
        let (recs, skips) = parse_probe_csv(csv.as_bytes(), &site()).unwrap();
        assert_eq!(
            recs,
            vec![ProbeRecord {
                timestamp: ts("2019-04-16T06:07:00"),
                segment_id: "1226240265".into(),
                speed: 50.0,
                travel_time: 0.49,
                confidence: Some(0.32),
            }]
        );
        assert_eq!(skips.rows, vec![SkippedRow { line: 3, reason: SkipReason::UnmappedSegment("9999".into()) }]);
    }

    #[test]
    fn probe_rejects_nonpositive_travel_time() {
        let csv = "timestamp,SegmentID,speed,travelTimeMinutes\n4/16/2019 6:07,1226240265,50,0\n";
        let (recs, skips) = parse_probe_csv(csv.as_bytes(), &site()).unwrap();
        assert!(recs.is_empty());
        assert_eq!(skips.malformed().count(), 1);
    }

    #[test]
    fn timestamp_formats() {
        assert_eq!(ts("6/11/2019 6:00"), ts("2019-06-11T06:00:00"));
        assert_eq!(ts("06/11/2019 06:00:20"), ts("2019-06-11 06:00:20"));
        assert!(parse_timestamp("yesterday").is_none());
    }

    fn no_gate() -> AggregateConfig {
        AggregateConfig {
            min_loop_coverage: 0.0,
            min_probe_minutes: 0,
            ..AggregateConfig::default()
        }
    }

    fn loop_rec(t: &str, slot: u32, volume: u32, occ: f64) -> LoopRecord {
        LoopRecord {
            id: "1".into(),
            timestamp: ts(t),
            station_id: 312,
            slot_number: slot,
            volume,
            speed: 60.0,
            occupancy: occ,
        }
    }

    fn probe_rec(t: &str, seg: &str, speed: f64) -> ProbeRecord {
        ProbeRecord {
            timestamp: ts(t),
            segment_id: seg.into(),
            speed,
            travel_time: 0.5,
            confidence: None,
        }
    }

    #[test]
    fn flow_speed_density_arithmetic() {
        // 45 records of volume 5 spread across the 3 upstream lanes.
        let lanes = [33, 35, 37];
        let loops: Vec<LoopRecord> = (0..45)
            .map(|i| {
                let secs = (i / 3) * 20;
                let t = format!("2019-06-11T06:{:02}:{:02}", secs / 60, secs % 60);
                loop_rec(&t, lanes[i % 3], 5, 10.0)
            })
            .collect();
        let probes = vec![
            probe_rec("2019-06-11T06:01:00", "1226240265", 50.0),
            probe_rec("2019-06-11T06:02:00", "1226240265", 52.0),
            probe_rec("2019-06-11T06:03:00", "1226240265", 54.0),
        ];
        let out = aggregate(&loops, &probes, &site(), Period::Before, &no_gate());
        assert_eq!(out.samples.len(), 1);
        let s = &out.samples[0];
        let expected_flow = (45.0 * 5.0) * 4.0 / 3.0;
        assert_eq!(expected_flow, 300.0);
        assert_eq!(s.flow_rate, 300.0);
        assert_eq!(s.mean_speed, 52.0);
        assert!((s.density.unwrap() - 300.0 / 52.0).abs() < 1e-12);
        assert!((s.density.unwrap() - 5.769).abs() < 1e-3);
        assert_eq!(s.occupancy, 10.0);
        assert_eq!(s.key, TimeKey::new(3, 6, 1).unwrap());
        assert_eq!(s.week_index, 1);

        let after = aggregate(&loops, &probes, &site(), Period::After, &no_gate());
        assert_eq!(after.samples[0].density, None);
    }

    #[test]
    fn duplicate_probe_rows_each_count_once_in_the_mean() {
        let loops = vec![loop_rec("2019-06-11T06:00:00", 33, 5, 10.0)];
        let probes = vec![
            probe_rec("2019-06-11T06:07:00", "1226240265", 50.0),
            probe_rec("2019-06-11T06:07:00", "1226240265", 50.0),
            probe_rec("2019-06-11T06:08:00", "1226240265", 56.0),
        ];
        let out = aggregate(&loops, &probes, &site(), Period::Before, &no_gate());
        // Oracle: plain mean over all three retained rows.
        assert_eq!(out.samples[0].mean_speed, (50.0 + 50.0 + 56.0) / 3.0);
        // Two distinct minutes of 15; one loop record of 45 per lane is the binding minimum.
        let lanes = site().position(&out.samples[0].section, out.samples[0].position).unwrap().slots.len();
        assert!((out.samples[0].coverage - 1.0 / (45.0 * lanes as f64)).abs() < 1e-12);
    }

    #[test]
    fn zero_speed_slot_has_no_density() {
        let loops = vec![loop_rec("2019-06-11T06:00:00", 33, 5, 90.0)];
        let probes = vec![probe_rec("2019-06-11T06:00:00", "1226240265", 0.0)];
        let out = aggregate(&loops, &probes, &site(), Period::Before, &no_gate());
        assert_eq!(out.samples[0].mean_speed, 0.0);
        assert_eq!(out.samples[0].density, None);
    }

    #[test]
    fn coverage_gates_and_calendar_filter() {
        let loops = vec![
            loop_rec("2019-06-11T06:00:00", 33, 5, 10.0),
            // Monday and a midday slot are outside the protocol calendar.
            loop_rec("2019-06-10T06:00:00", 33, 5, 10.0),
            loop_rec("2019-06-11T12:00:00", 33, 5, 10.0),
        ];
        let probes: Vec<ProbeRecord> = (0..12)
            .map(|m| probe_rec(&format!("2019-06-11T06:{m:02}:00"), "1226240265", 60.0))
            .collect();
        let out = aggregate(&loops, &probes, &site(), Period::Before, &AggregateConfig::default());
        assert!(out.samples.is_empty());
        assert_eq!(out.coverage.slots_low_loop_coverage, 1);
        assert_eq!(out.coverage.records_outside_calendar, 2);
    }

    #[test]
    fn week_index_counts_from_earliest_date() {
        let loops = vec![
            loop_rec("2019-06-11T06:00:00", 33, 5, 10.0),
            loop_rec("2019-06-18T06:00:00", 33, 5, 10.0),
            loop_rec("2019-06-20T06:00:00", 33, 5, 10.0),
        ];
        let probes = vec![
            probe_rec("2019-06-11T06:00:00", "1226240265", 60.0),
            probe_rec("2019-06-18T06:00:00", "1226240265", 60.0),
            probe_rec("2019-06-20T06:00:00", "1226240265", 60.0),
        ];
        let out = aggregate(&loops, &probes, &site(), Period::After, &no_gate());
        let weeks: Vec<u32> = out.samples.iter().map(|s| s.week_index).collect();
        assert_eq!(weeks, vec![1, 2, 2]);
    }

    #[test]
    fn samples_csv_round_trip() {
        let loops = vec![loop_rec("2019-06-11T06:00:00", 33, 5, 10.0)];
        let probes = vec![probe_rec("2019-06-11T06:00:00", "1226240265", 61.3)];
        let out = aggregate(&loops, &probes, &site(), Period::Before, &no_gate());
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &out.samples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "section,position,period,week,dow,hod,moh,mean_speed,occupancy,flow_rate,density,coverage\n"
        ));
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), out.samples);
    }

    fn arb_loop() -> impl Strategy<Value = LoopRecord> {
        (0u32..3, 0u32..45, 0u32..30, 0.0f64..100.0, 0.0f64..90.0, 0usize..3).prop_map(
            |(day, step, volume, occ, speed, lane)| LoopRecord {
                id: "7".into(),
                timestamp: ts("2019-06-11T06:00:00")
                    + chrono::Duration::days(i64::from(day))
                    + chrono::Duration::seconds(i64::from(step) * 20),
                station_id: 312,
                slot_number: [33, 35, 37][lane],
                volume,
                speed,
                occupancy: occ,
            },
        )
    }

    proptest! {
        #[test]
        fn loop_csv_round_trip(recs in proptest::collection::vec(arb_loop(), 0..20)) {
            let mut buf = Vec::new();
            write_loop_csv(&mut buf, &recs).unwrap();
            let (back, skips) = parse_loop_csv(buf.as_slice(), &site()).unwrap();
            prop_assert!(skips.is_empty());
            prop_assert_eq!(back, recs);
        }

        #[test]
        fn aggregation_ignores_record_order(
            recs in proptest::collection::vec(arb_loop(), 1..40),
            seed in any::<u64>()
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let probes: Vec<ProbeRecord> = (0..3)
                .map(|d| probe_rec(&format!("2019-06-1{}T06:05:00", 1 + d), "1226240265", 50.0 + d as f64))
                .collect();
            let a = aggregate(&recs, &probes, &site(), Period::Before, &no_gate());
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut probes_rev = probes.clone();
            probes_rev.reverse();
            let b = aggregate(&shuffled, &probes_rev, &site(), Period::Before, &no_gate());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn halving_volume_halves_flow(recs in proptest::collection::vec(arb_loop(), 1..40)) {
            let doubled: Vec<LoopRecord> = recs.iter().map(|r| LoopRecord { volume: r.volume * 2, ..r.clone() }).collect();
            let probes: Vec<ProbeRecord> = (0..3)
                .map(|d| probe_rec(&format!("2019-06-1{}T06:05:00", 1 + d), "1226240265", 50.0))
                .collect();
            let full = aggregate(&doubled, &probes, &site(), Period::After, &no_gate());
            let half = aggregate(&recs, &probes, &site(), Period::After, &no_gate());
            for (f, h) in full.samples.iter().zip(&half.samples) {
                prop_assert_eq!(f.flow_rate / 2.0, h.flow_rate);
            }
        }
    }
}
