//! Temporal correction (time-of-week averaging across weeks) and pairing of
//! before-period inputs with after-period targets into feature rows.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Period, SectionId, SegmentPosition, TimeKey, TrafficSample};

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("temporal correction needs at least one sample")]
    EmptyInput,
    #[error("samples mix sections, positions or periods")]
    MixedGroup,
    #[error("row has {got} values, roster has {expected}")]
    RosterLength { expected: usize, got: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("features file line {line}: {message}")]
    BadRow { line: u64, message: String },
    #[error("features file is missing bookkeeping column `{0}`")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub mean_speed: f64,
    pub occupancy: f64,
    pub flow_rate: f64,
    pub density: Option<f64>,
    pub weeks_used: u32,
}

/// Time-of-week averages for one section, position and period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedProfile {
    pub section: SectionId,
    pub position: SegmentPosition,
    pub period: Period,
    pub entries: BTreeMap<TimeKey, ProfileEntry>,
}

/// Averages each time key over the weeks in which it was observed.
///
/// Keys missing in some weeks are divided by the number of weeks present,
/// recorded as `weeks_used`. Density is averaged over the weeks that carry it.
pub fn temporal_correct(samples: &[TrafficSample]) -> Result<CorrectedProfile, CorrectionError> {
    let first = samples.first().ok_or(CorrectionError::EmptyInput)?;
    let mut by_key: BTreeMap<TimeKey, Vec<&TrafficSample>> = BTreeMap::new();
    for s in samples {
        if s.section != first.section || s.position != first.position || s.period != first.period {
            return Err(CorrectionError::MixedGroup);
        }
        by_key.entry(s.key).or_default().push(s);
    }
    let entries = by_key
        .into_iter()
        .map(|(key, mut weeks)| {
            weeks.sort_by_key(|s| s.week_index);
            let n = weeks.len() as f64;
            let mean = |f: fn(&TrafficSample) -> f64| weeks.iter().map(|s| f(s)).sum::<f64>() / n;
            let densities: Vec<f64> = weeks.iter().filter_map(|s| s.density).collect();
            let density = (!densities.is_empty())
                .then(|| densities.iter().sum::<f64>() / densities.len() as f64);
            let entry = ProfileEntry {
                mean_speed: mean(|s| s.mean_speed),
                occupancy: mean(|s| s.occupancy),
                flow_rate: mean(|s| s.flow_rate),
                density,
                weeks_used: weeks.len() as u32,
            };
            (key, entry)
        })
        .collect();
    Ok(CorrectedProfile {
        section: first.section.clone(),
        position: first.position,
        period: first.period,
        entries,
    })
}

/// Groups samples by (section, position, period) and corrects each group.
pub fn correct_all(samples: &[TrafficSample]) -> Vec<CorrectedProfile> {
    let mut groups: BTreeMap<(SectionId, SegmentPosition, Period), Vec<TrafficSample>> =
        BTreeMap::new();
    for s in samples {
        groups
            .entry((s.section.clone(), s.position, s.period))
            .or_default()
            .push(s.clone());
    }
    groups
        .values()
        .map(|g| temporal_correct(g).expect("non-empty homogeneous group"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variable {
    MeanSpeed,
    Occupancy,
    Flow,
    Density,
}

impl Variable {
    pub fn label(self) -> &'static str {
        match self {
            Self::MeanSpeed => "mean_speed",
            Self::Occupancy => "occupancy",
            Self::Flow => "flow",
            Self::Density => "density",
        }
    }

    fn read(self, e: &ProfileEntry) -> Option<f64> {
        match self {
            Self::MeanSpeed => Some(e.mean_speed),
            Self::Occupancy => Some(e.occupancy),
            Self::Flow => Some(e.flow_rate),
            Self::Density => e.density,
        }
    }
}

/// `Before_up_mean_speed`-style column name.
pub fn column_name(period: Period, position: SegmentPosition, var: Variable) -> String {
    let p = match period {
        Period::Before => "Before",
        Period::After => "After",
    };
    format!("{p}_{}_{}", position.short(), var.label())
}

use SegmentPosition::{Downstream as Down, OnRamp as Ramp, Upstream as Up};
use Variable::{Density, Flow, MeanSpeed, Occupancy};

const TIME_COLUMNS: [&str; 3] = ["DOW", "HOD", "MOH"];

/// Before-period inputs after the three time encodings. Downstream occupancy
/// is not an input.
const INPUT_VARS: [(SegmentPosition, Variable); 11] = [
    (Up, MeanSpeed),
    (Ramp, MeanSpeed),
    (Down, MeanSpeed),
    (Up, Occupancy),
    (Ramp, Occupancy),
    (Up, Flow),
    (Ramp, Flow),
    (Down, Flow),
    (Up, Density),
    (Ramp, Density),
    (Down, Density),
];

/// Options controlling the pairing roster.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairingOptions {
    /// Adds `After_down_occupancy` as a ninth target.
    pub include_down_occupancy: bool,
}

impl PairingOptions {
    fn target_vars(self) -> Vec<(SegmentPosition, Variable)> {
        let mut v = vec![(Up, MeanSpeed), (Ramp, MeanSpeed), (Down, MeanSpeed), (Up, Occupancy), (Ramp, Occupancy)];
        if self.include_down_occupancy {
            v.push((Down, Occupancy));
        }
        v.extend([(Up, Flow), (Ramp, Flow), (Down, Flow)]);
        v
    }

    pub fn target_names(self) -> Vec<String> {
        self.target_vars()
            .into_iter()
            .map(|(p, v)| column_name(Period::After, p, v))
            .collect()
    }
}

pub fn input_names() -> Vec<String> {
    TIME_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(INPUT_VARS.iter().map(|&(p, v)| column_name(Period::Before, p, v)))
        .collect()
}

/// One (section, time key) observation: before-period inputs and after-period targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub section: SectionId,
    pub key: TimeKey,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 when fewer than two rows.
    pub sd: f64,
}

impl ColumnStats {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self { mean: 0.0, sd: 0.0 };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd }
    }
}

/// Feature rows sharing one column roster, with per-column statistics kept
/// in sync with the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_names: Vec<String>,
    target_names: Vec<String>,
    rows: Vec<FeatureRow>,
    input_stats: Vec<ColumnStats>,
    target_stats: Vec<ColumnStats>,
}

impl Dataset {
    pub fn new(
        input_names: Vec<String>,
        target_names: Vec<String>,
        rows: Vec<FeatureRow>,
    ) -> Result<Self, CorrectionError> {
        for r in &rows {
            if r.inputs.len() != input_names.len() {
                return Err(CorrectionError::RosterLength { expected: input_names.len(), got: r.inputs.len() });
            }
            if r.targets.len() != target_names.len() {
                return Err(CorrectionError::RosterLength { expected: target_names.len(), got: r.targets.len() });
            }
        }
        let mut d = Self {
            input_names,
            target_names,
            rows,
            input_stats: Vec::new(),
            target_stats: Vec::new(),
        };
        d.recompute();
        Ok(d)
    }

    fn recompute(&mut self) {
        let rows = &self.rows;
        self.input_stats = (0..self.input_names.len())
            .map(|j| ColumnStats::of(rows.iter().map(move |r| r.inputs[j])))
            .collect();
        self.target_stats = (0..self.target_names.len())
            .map(|j| ColumnStats::of(rows.iter().map(move |r| r.targets[j])))
            .collect();
    }

    pub fn push(&mut self, row: FeatureRow) -> Result<(), CorrectionError> {
        if row.inputs.len() != self.input_names.len() || row.targets.len() != self.target_names.len() {
            return Err(CorrectionError::RosterLength {
                expected: self.input_names.len() + self.target_names.len(),
                got: row.inputs.len() + row.targets.len(),
            });
        }
        self.rows.push(row);
        self.recompute();
        Ok(())
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn input_stats(&self) -> &[ColumnStats] {
        &self.input_stats
    }

    pub fn target_stats(&self) -> &[ColumnStats] {
        &self.target_stats
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.input_names.iter().position(|n| n == name)
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.target_names.iter().position(|n| n == name)
    }

    pub fn target_column(&self, name: &str) -> Result<Vec<f64>, CorrectionError> {
        let j = self
            .target_index(name)
            .ok_or_else(|| CorrectionError::UnknownColumn(name.to_string()))?;
        Ok(self.rows.iter().map(|r| r.targets[j]).collect())
    }

    pub fn input_rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.inputs.clone()).collect()
    }

    /// Distinct sections in sorted order.
    pub fn sections(&self) -> Vec<SectionId> {
        self.rows
            .iter()
            .map(|r| r.section.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn filter(&self, keep: impl Fn(&FeatureRow) -> bool) -> Dataset {
        let rows = self.rows.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(self.input_names.clone(), self.target_names.clone(), rows)
            .expect("roster unchanged")
    }

    /// Keeps only the named input columns, in this dataset's roster order.
    pub fn select_inputs(&self, names: &[String]) -> Result<Dataset, CorrectionError> {
        for n in names {
            if self.input_index(n).is_none() {
                return Err(CorrectionError::UnknownColumn(n.clone()));
            }
        }
        let keep: Vec<usize> = (0..self.input_names.len())
            .filter(|&j| names.contains(&self.input_names[j]))
            .collect();
        let rows = self
            .rows
            .iter()
            .map(|r| FeatureRow {
                inputs: keep.iter().map(|&j| r.inputs[j]).collect(),
                ..r.clone()
            })
            .collect();
        Dataset::new(keep.iter().map(|&j| self.input_names[j].clone()).collect(), self.target_names.clone(), rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutput {
    pub rows: Vec<FeatureRow>,
    /// Keys present in some profile but not in all required ones.
    pub dropped_keys: usize,
}

fn find<'a>(
    profiles: &'a [CorrectedProfile],
    section: &SectionId,
    period: Period,
    position: SegmentPosition,
) -> Option<&'a CorrectedProfile> {
    profiles
        .iter()
        .find(|p| &p.section == section && p.period == period && p.position == position)
}

fn key_inputs(key: TimeKey, before: &[Option<&CorrectedProfile>; 3]) -> Option<Vec<f64>> {
    let mut inputs = vec![f64::from(key.dow()), f64::from(key.hod()), f64::from(key.moh())];
    for &(pos, var) in &INPUT_VARS {
        let profile = before[pos as usize - 1]?;
        inputs.push(var.read(profile.entries.get(&key)?)?);
    }
    Some(inputs)
}

fn before_profiles<'a>(
    profiles: &'a [CorrectedProfile],
    section: &SectionId,
) -> [Option<&'a CorrectedProfile>; 3] {
    SegmentPosition::ALL.map(|p| find(profiles, section, Period::Before, p))
}

fn all_keys<'a>(profiles: impl Iterator<Item = &'a CorrectedProfile>) -> BTreeSet<TimeKey> {
    profiles.flat_map(|p| p.entries.keys().copied()).collect()
}

/// Joins one section's before and after profiles by time key.
///
/// A row is produced only for keys present in every required before entry
/// (with density) and every after target; other keys are dropped and counted.
pub fn pair_before_after(
    before: &[CorrectedProfile],
    after: &[CorrectedProfile],
    section: &SectionId,
    options: PairingOptions,
) -> PairOutput {
    let b = before_profiles(before, section);
    let a = SegmentPosition::ALL.map(|p| find(after, section, Period::After, p));
    let keys = all_keys(b.iter().chain(a.iter()).flatten().copied());
    let target_vars = options.target_vars();
    let mut rows = Vec::new();
    let mut dropped = 0;
    for key in keys {
        let targets: Option<Vec<f64>> = target_vars
            .iter()
            .map(|&(pos, var)| var.read(a[pos as usize - 1]?.entries.get(&key)?))
            .collect();
        match (key_inputs(key, &b), targets) {
            (Some(inputs), Some(targets)) => rows.push(FeatureRow {
                section: section.clone(),
                key,
                inputs,
                targets,
            }),
            _ => dropped += 1,
        }
    }
    PairOutput { rows, dropped_keys: dropped }
}

/// Input rows for a section observed only in the before period.
pub fn before_inputs(before: &[CorrectedProfile], section: &SectionId) -> Vec<(TimeKey, Vec<f64>)> {
    let b = before_profiles(before, section);
    all_keys(b.iter().flatten().copied())
        .into_iter()
        .filter_map(|k| key_inputs(k, &b).map(|v| (k, v)))
        .collect()
}

/// Pairs every section that has both periods into one dataset.
pub fn build_dataset(profiles: &[CorrectedProfile], options: PairingOptions) -> (Dataset, usize) {
    let sections: BTreeSet<&SectionId> = profiles.iter().map(|p| &p.section).collect();
    let mut rows = Vec::new();
    let mut dropped = 0;
    for s in sections {
        let out = pair_before_after(profiles, profiles, s, options);
        rows.extend(out.rows);
        dropped += out.dropped_keys;
    }
    let d = Dataset::new(input_names(), options.target_names(), rows).expect("pairing fills the roster");
    (d, dropped)
}

pub const PROFILE_COLUMNS: [&str; 11] = [
    "section", "position", "period", "dow", "hod", "moh", "mean_speed", "occupancy", "flow_rate", "density",
    "weeks_used",
];

pub fn write_profiles_csv<W: Write>(out: W, profiles: &[CorrectedProfile]) -> Result<(), CorrectionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROFILE_COLUMNS)?;
    for p in profiles {
        for (k, e) in &p.entries {
            w.write_record([
                p.section.to_string(),
                p.position.key().to_string(),
                p.period.as_str().to_string(),
                k.dow().to_string(),
                k.hod().to_string(),
                k.moh().to_string(),
                e.mean_speed.to_string(),
                e.occupancy.to_string(),
                e.flow_rate.to_string(),
                e.density.map(|d| d.to_string()).unwrap_or_default(),
                e.weeks_used.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct ProfileRow {
    section: String,
    position: String,
    period: String,
    dow: u8,
    hod: u8,
    moh: u8,
    mean_speed: f64,
    occupancy: f64,
    flow_rate: f64,
    density: Option<f64>,
    weeks_used: u32,
}

pub fn read_profiles_csv<R: Read>(input: R) -> Result<Vec<CorrectedProfile>, CorrectionError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut map: BTreeMap<(SectionId, SegmentPosition, Period), BTreeMap<TimeKey, ProfileEntry>> =
        BTreeMap::new();
    for rec in rdr.deserialize::<ProfileRow>() {
        let r = rec?;
        let bad = |m: String| CorrectionError::BadRow { line: 0, message: m };
        let section = SectionId::new(r.section).map_err(|e| bad(e.to_string()))?;
        let position: SegmentPosition = r.position.parse().map_err(|e: crate::domain::DomainError| bad(e.to_string()))?;
        let period: Period = r.period.parse().map_err(|e: crate::domain::DomainError| bad(e.to_string()))?;
        let key = TimeKey::new(r.dow, r.hod, r.moh).map_err(|e| bad(e.to_string()))?;
        map.entry((section, position, period)).or_default().insert(
            key,
            ProfileEntry {
                mean_speed: r.mean_speed,
                occupancy: r.occupancy,
                flow_rate: r.flow_rate,
                density: r.density,
                weeks_used: r.weeks_used,
            },
        );
    }
    Ok(map
        .into_iter()
        .map(|((section, position, period), entries)| CorrectedProfile { section, position, period, entries })
        .collect())
}

const BOOKKEEPING: [&str; 4] = ["section", "dow", "hod", "moh"];

/// Writes `section,dow,hod,moh` followed by the input and target columns.
pub fn write_features_csv<W: Write>(out: W, d: &Dataset) -> Result<(), CorrectionError> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = BOOKKEEPING
        .iter()
        .copied()
        .chain(d.input_names().iter().map(String::as_str))
        .chain(d.target_names().iter().map(String::as_str))
        .collect();
    w.write_record(&header)?;
    for r in d.rows() {
        let mut rec = vec![
            r.section.to_string(),
            r.key.dow().to_string(),
            r.key.hod().to_string(),
            r.key.moh().to_string(),
        ];
        rec.extend(r.inputs.iter().chain(&r.targets).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a features file. Columns starting with `After_` are targets, every
/// other non-bookkeeping column is an input; a file without targets is valid.
pub fn read_features_csv<R: Read>(input: R) -> Result<Dataset, CorrectionError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorrectionError::MissingColumn(name.to_string()))
    };
    let book = [pos("section")?, pos("dow")?, pos("hod")?, pos("moh")?];
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if book.contains(&i) {
            continue;
        }
        if h.starts_with("After_") {
            targets.push(i);
        } else {
            inputs.push(i);
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| CorrectionError::BadRow { line, message };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let parse = |i: usize| -> Result<f64, CorrectionError> {
            get(i).parse::<f64>().map_err(|_| bad(format!("column {}: `{}`", &headers[i], get(i))))
        };
        let small = |i: usize| -> Result<u8, CorrectionError> {
            get(i).parse::<u8>().map_err(|_| bad(format!("column {}: `{}`", &headers[i], get(i))))
        };
        rows.push(FeatureRow {
            section: SectionId::new(get(book[0])).map_err(|e| bad(e.to_string()))?,
            key: TimeKey::new(small(book[1])?, small(book[2])?, small(book[3])?).map_err(|e| bad(e.to_string()))?,
            inputs: inputs.iter().map(|&i| parse(i)).collect::<Result<_, _>>()?,
            targets: targets.iter().map(|&i| parse(i)).collect::<Result<_, _>>()?,
        });
    }
    Dataset::new(
        inputs.iter().map(|&i| headers[i].to_string()).collect(),
        targets.iter().map(|&i| headers[i].to_string()).collect(),
        rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sid() -> SectionId {
        SectionId::new("190").unwrap()
    }

    fn s(week: u32, key: TimeKey, speed: f64) -> TrafficSample {
        TrafficSample {
            section: sid(),
            position: Up,
            period: Period::Before,
            week_index: week,
            key,
            mean_speed: speed,
            occupancy: speed / 10.0,
            flow_rate: speed * 20.0,
            density: Some(speed / 3.0),
            coverage: 1.0,
        }
    }

    fn k(h: u8, q: u8) -> TimeKey {
        TimeKey::new(3, h, q).unwrap()
    }

    #[test]
    fn four_week_mean() {
        let samples: Vec<_> = [60.0, 62.0, 64.0, 58.0]
            .iter()
            .enumerate()
            .map(|(w, &v)| s(w as u32 + 1, k(6, 1), v))
            .collect();
        let p = temporal_correct(&samples).unwrap();
        let e = p.entries[&k(6, 1)];
        assert_eq!(e.mean_speed, 61.0);
        assert_eq!(e.weeks_used, 4);
    }

    #[test]
    fn single_week_identity() {
        let p = temporal_correct(&[s(1, k(6, 1), 57.3)]).unwrap();
        let e = p.entries[&k(6, 1)];
        assert_eq!(e.mean_speed, 57.3);
        assert_eq!(e.flow_rate, 57.3 * 20.0);
        assert_eq!(e.weeks_used, 1);
    }

    #[test]
    fn missing_week_divides_by_available_weeks() {
        let p = temporal_correct(&[s(1, k(6, 1), 60.0), s(3, k(6, 1), 64.0)]).unwrap();
        let e = p.entries[&k(6, 1)];
        assert_eq!(e.mean_speed, 62.0);
        assert_eq!(e.weeks_used, 2);
    }

    #[test]
    fn density_averaged_where_present() {
        let mut a = s(1, k(6, 1), 60.0);
        a.density = None;
        let p = temporal_correct(&[a, s(2, k(6, 1), 30.0)]).unwrap();
        assert_eq!(p.entries[&k(6, 1)].density, Some(10.0));
    }

    #[test]
    fn correction_errors() {
        assert!(matches!(temporal_correct(&[]), Err(CorrectionError::EmptyInput)));
        let mut other = s(1, k(6, 1), 1.0);
        other.position = Ramp;
        assert!(matches!(
            temporal_correct(&[s(1, k(6, 1), 1.0), other]),
            Err(CorrectionError::MixedGroup)
        ));
    }

    proptest! {
        #[test]
        fn correction_is_idempotent_on_single_week(vals in proptest::collection::vec(0.0f64..100.0, 1..20)) {
            let samples: Vec<_> = vals.iter().enumerate()
                .map(|(i, &v)| s(1, TimeKey::from_week_slot(200 + i).unwrap(), v))
                .collect();
            let p = temporal_correct(&samples).unwrap();
            for smp in &samples {
                prop_assert_eq!(p.entries[&smp.key].mean_speed, smp.mean_speed);
                prop_assert_eq!(p.entries[&smp.key].density, smp.density);
            }
        }

        #[test]
        fn correction_commutes_with_unit_change(vals in proptest::collection::vec(0.0f64..100.0, 1..8)) {
            const KMH: f64 = 1.609344;
            let mph: Vec<_> = vals.iter().enumerate().map(|(w, &v)| s(w as u32 + 1, k(7, 2), v)).collect();
            let kmh: Vec<_> = mph.iter().map(|x| TrafficSample { mean_speed: x.mean_speed * KMH, ..x.clone() }).collect();
            let a = temporal_correct(&mph).unwrap().entries[&k(7, 2)].mean_speed * KMH;
            let b = temporal_correct(&kmh).unwrap().entries[&k(7, 2)].mean_speed;
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12));
        }
    }

    fn profile(period: Period, pos: SegmentPosition, keys: &[TimeKey]) -> CorrectedProfile {
        CorrectedProfile {
            section: sid(),
            position: pos,
            period,
            entries: keys
                .iter()
                .map(|&key| {
                    let base = key.week_slot() as f64;
                    (
                        key,
                        ProfileEntry {
                            mean_speed: 50.0 + base % 7.0 + pos as u8 as f64,
                            occupancy: 8.0 + pos as u8 as f64,
                            flow_rate: 1000.0 + base,
                            density: (period == Period::Before).then_some(20.0 + pos as u8 as f64),
                            weeks_used: 4,
                        },
                    )
                })
                .collect(),
        }
    }

    fn all_positions(period: Period, keys: &[TimeKey]) -> Vec<CorrectedProfile> {
        SegmentPosition::ALL.iter().map(|&p| profile(period, p, keys)).collect()
    }

    #[test]
    fn pairing_intersects_keys() {
        let (a, b, c, d) = (k(6, 1), k(6, 2), k(6, 3), k(6, 4));
        let before = all_positions(Period::Before, &[a, b, c]);
        let after = all_positions(Period::After, &[b, c, d]);
        let out = pair_before_after(&before, &after, &sid(), PairingOptions::default());
        let keys: Vec<TimeKey> = out.rows.iter().map(|r| r.key).collect();
        assert_eq!(keys, vec![b, c]);
        assert_eq!(out.dropped_keys, 2);
        let row = &out.rows[0];
        assert_eq!(row.inputs.len(), 14);
        assert_eq!(row.targets.len(), 8);
        assert_eq!(&row.inputs[..3], &[3.0, 6.0, 2.0]);
    }

    #[test]
    fn protocol_calendar_gives_84_rows() {
        let keys = crate::ingest::AggregateConfig::default().calendar_keys();
        assert_eq!(keys.len(), 3 * 7 * 4);
        let out = pair_before_after(
            &all_positions(Period::Before, &keys),
            &all_positions(Period::After, &keys),
            &sid(),
            PairingOptions::default(),
        );
        assert_eq!(out.rows.len(), 84);
    }

    #[test]
    fn roster_names_and_no_downstream_occupancy_input() {
        let names = input_names();
        assert_eq!(names.len(), 14);
        assert_eq!(names[3], "Before_up_mean_speed");
        assert_eq!(names[13], "Before_down_density");
        assert!(!names.iter().any(|n| n == "Before_down_occupancy"));
        let targets = PairingOptions::default().target_names();
        assert_eq!(
            targets,
            [
                "After_up_mean_speed", "After_ramp_mean_speed", "After_down_mean_speed",
                "After_up_occupancy", "After_ramp_occupancy",
                "After_up_flow", "After_ramp_flow", "After_down_flow",
            ]
        );
        let with_down = PairingOptions { include_down_occupancy: true }.target_names();
        assert_eq!(with_down.len(), 9);
    }

    #[test]
    fn missing_before_density_drops_row() {
        let keys = [k(6, 1), k(6, 2)];
        let mut before = all_positions(Period::Before, &keys);
        before[0].entries.get_mut(&k(6, 1)).unwrap().density = None;
        let out = pair_before_after(&before, &all_positions(Period::After, &keys), &sid(), PairingOptions::default());
        assert_eq!(out.rows.len(), 1);
        let min_entries = before.iter().map(|p| p.entries.len()).min().unwrap();
        assert!(out.rows.len() <= min_entries);
    }

    #[test]
    fn dataset_stats_and_selection() {
        let keys = [k(6, 1), k(6, 2), k(6, 3)];
        let out = pair_before_after(
            &all_positions(Period::Before, &keys),
            &all_positions(Period::After, &keys),
            &sid(),
            PairingOptions::default(),
        );
        let mut d = Dataset::new(input_names(), PairingOptions::default().target_names(), out.rows).unwrap();
        let hod = d.input_index("MOH").unwrap();
        assert_eq!(d.input_stats()[hod], ColumnStats { mean: 2.0, sd: 1.0 });
        let extra = FeatureRow { key: k(6, 4), inputs: { let mut v = d.rows()[0].inputs.clone(); v[hod] = 4.0; v }, ..d.rows()[0].clone() };
        d.push(extra).unwrap();
        assert_eq!(d.input_stats()[hod].mean, 2.5);
        let picked = d.select_inputs(&["Before_up_flow".into(), "DOW".into()]).unwrap();
        assert_eq!(picked.input_names(), ["DOW", "Before_up_flow"]);
        assert!(d.select_inputs(&["nope".into()]).is_err());

        let mut buf = Vec::new();
        write_features_csv(&mut buf, &d).unwrap();
        let back = read_features_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn profiles_csv_round_trip() {
        let keys = [k(6, 1), k(15, 4)];
        let mut ps = all_positions(Period::Before, &keys);
        ps.extend(all_positions(Period::After, &keys));
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &ps).unwrap();
        let mut back = read_profiles_csv(buf.as_slice()).unwrap();
        back.sort_by_key(|p| (p.period, p.position));
        ps.sort_by_key(|p| (p.period, p.position));
        assert_eq!(back, ps);
    }
}
