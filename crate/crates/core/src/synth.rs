//! Seeded synthetic before/after corpus with known ground truth.
//!
//! Each section has latent traits (lanes, free-flow speed, capacity, demand
//! level, ramp share, metering effect). Before-period 15-minute values come
//! from a two-peak demand profile pushed through a logistic congestion curve;
//! occupancy is density times a slot-varying effective vehicle length.
//! After-period values are a documented function of the before values and the
//! section traits, in one of two regimes:
//!
//! * `linear`: `after = base + Σ_j effect_j · z_j + ε`, with `z_j` the
//!   week-averaged observed before inputs standardized over the whole corpus
//!   and `ε` a residual with sd `target_rel` times the sd of the systematic
//!   part. After-period observations add their own measurement noise.
//! * `piecewise`: ramp metering switches on where upstream density exceeds
//!   60% of the section's critical density; the switch raises mainline speed
//!   and flow, holds ramp flow back and queues the ramp, scaled by the
//!   section's metering effect. The metering effect grows with ramp share.
//!
//! The last section is the held-out section; `domain_shift` moves its traits
//! away from the training sections' distribution by that many trait standard
//! deviations. 1.0 is the moderate setting.
//!
//! Weekly observations add measurement noise to the latent values. Raw loop
//! and probe records are built so that ingest aggregation reproduces each
//! weekly slot value exactly: volumes are integers split with carried
//! rounding, and per-record jitter is re-centered within the slot.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{input_names, ColumnStats};
use crate::domain::{
    Period, PositionSite, SectionId, SectionSite, SegmentPosition, SiteMap, TimeKey, TrafficSample,
};
use crate::ingest::{write_loop_row, write_probe_row, IngestError, LoopRecord, ProbeRecord, LOOP_COLUMNS, PROBE_WRITE_COLUMNS};

/// Documented "moderate" domain-shift setting.
pub const MODERATE_SHIFT: f64 = 1.0;

const RECORDS_PER_LANE: usize = 45;
const PROBE_CONFIDENCE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Linear,
    #[default]
    Piecewise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Weekly probe speed noise, mph.
    pub speed_sd: f64,
    /// Weekly occupancy noise as a fraction of the latent value.
    pub occupancy_rel: f64,
    /// Weekly flow noise as a fraction of the latent value.
    pub flow_rel: f64,
    /// After-period residual as a fraction of the systematic target sd.
    pub target_rel: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { speed_sd: 1.0, occupancy_rel: 0.03, flow_rel: 0.02, target_rel: 0.05 }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self { speed_sd: 0.0, occupancy_rel: 0.0, flow_rel: 0.0, target_rel: 0.0 }
    }

    fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("speed_sd", self.speed_sd),
            ("occupancy_rel", self.occupancy_rel),
            ("flow_rel", self.flow_rel),
            ("target_rel", self.target_rel),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("noise {name} must be >= 0")));
            }
        }
        if self.occupancy_rel >= 0.3 || self.flow_rel >= 0.3 {
            return Err(SynthError::Config("relative noise must be < 0.3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_sections: usize,
    pub weeks: u32,
    pub regime: Regime,
    pub domain_shift: f64,
    pub noise: NoiseConfig,
    /// Tuesday starting each period.
    pub before_start: NaiveDate,
    pub after_start: NaiveDate,
    /// Day-of-week codes, 1 = Sunday.
    pub days: Vec<u8>,
    /// `[start, end)` hours.
    pub hour_windows: Vec<(u8, u8)>,
    /// Probe minutes dropped per slot are drawn from `0..=max_dropped_minutes`.
    pub max_dropped_minutes: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sections: 14,
            weeks: 4,
            regime: Regime::Piecewise,
            domain_shift: MODERATE_SHIFT,
            noise: NoiseConfig::default(),
            before_start: NaiveDate::from_ymd_opt(2019, 5, 7).expect("valid date"),
            after_start: NaiveDate::from_ymd_opt(2019, 9, 3).expect("valid date"),
            days: vec![3, 4, 5],
            hour_windows: vec![(6, 9), (15, 19)],
            max_dropped_minutes: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_sections < 2 {
            return Err(SynthError::Config("n_sections must be >= 2".into()));
        }
        if self.weeks < 1 {
            return Err(SynthError::Config("weeks must be >= 1".into()));
        }
        if !self.domain_shift.is_finite() {
            return Err(SynthError::Config("domain_shift must be finite".into()));
        }
        if self.days.is_empty() || self.days.iter().any(|d| !(1..=7).contains(d)) {
            return Err(SynthError::Config("days must be non-empty codes in 1..=7".into()));
        }
        if self.hour_windows.is_empty() || self.hour_windows.iter().any(|&(a, b)| a >= b || b > 24) {
            return Err(SynthError::Config("hour windows must be non-empty [start, end) within 0..24".into()));
        }
        if self.max_dropped_minutes > 5 {
            return Err(SynthError::Config("max_dropped_minutes must be <= 5".into()));
        }
        for (name, d) in [("before_start", self.before_start), ("after_start", self.after_start)] {
            if d.format("%u").to_string() != "2" {
                return Err(SynthError::Config(format!("{name} must be a Tuesday")));
            }
        }
        self.noise.validate()
    }

    pub fn keys(&self) -> Vec<TimeKey> {
        let mut out = Vec::new();
        for &d in &self.days {
            for &(a, b) in &self.hour_windows {
                for h in a..b {
                    for q in 1..=4 {
                        out.push(TimeKey::new(d, h, q).expect("validated calendar"));
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// Latent traits of one section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionLatent {
    pub section: SectionId,
    pub station_id: u32,
    pub lanes_up: u32,
    pub lanes_down: u32,
    pub lanes_ramp: u32,
    pub free_flow_speed: f64,
    /// veh/hr/ln
    pub capacity: f64,
    /// Peak demand as a fraction of capacity.
    pub demand: f64,
    pub am_peak: f64,
    pub pm_peak: f64,
    /// Ramp flow per ramp lane relative to upstream flow per lane.
    pub ramp_share: f64,
    /// Effective vehicle length offset, ft.
    pub length_offset: f64,
    /// Standard-normal type score; the held-out section is moved along it.
    pub section_type: f64,
    /// Scale of the after-period metering response.
    pub metering_effect: f64,
    /// Upstream density (veh/mi/ln) above which metering engages after the change.
    pub meter_on_density: f64,
}

/// Mean and sd of each trait's sampling distribution, plus the direction the
/// held-out section is pushed.
struct TraitDist {
    mean: f64,
    sd: f64,
    shift_sign: f64,
}

const FREE_FLOW: TraitDist = TraitDist { mean: 65.0, sd: 2.5, shift_sign: -1.0 };
const CAPACITY: TraitDist = TraitDist { mean: 2000.0, sd: 80.0, shift_sign: -1.0 };
const DEMAND: TraitDist = TraitDist { mean: 0.85, sd: 0.06, shift_sign: 1.0 };
const RAMP_SHARE: TraitDist = TraitDist { mean: 0.45, sd: 0.08, shift_sign: 1.0 };

/// Correlation between the section type and each type-linked trait.
const TYPE_LOADING: f64 = 0.75;
/// Ramp speed factor when the mainline is at a standstill.
const MERGE_FRICTION_FLOOR: f64 = 0.75;

/// Typical ramp-to-mainline per-lane flow ratio.
const RAMP_RATIO_REF: f64 = 0.27;

/// Per-target linear-regime effects, in target units per input sd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTruth {
    pub inputs: Vec<String>,
    pub input_means: Vec<f64>,
    pub input_sds: Vec<f64>,
    /// target → input → effect
    pub effects: BTreeMap<String, BTreeMap<String, f64>>,
    pub base: BTreeMap<String, f64>,
    pub residual_sd: BTreeMap<String, f64>,
}

/// Sparse effect table of the linear regime.
const LINEAR_EFFECTS: [(&str, &[(&str, f64)]); 9] = [
    ("After_up_mean_speed", &[("Before_up_mean_speed", 5.0), ("Before_up_flow", -1.5), ("HOD", 1.2)]),
    ("After_ramp_mean_speed", &[("Before_ramp_mean_speed", 4.0), ("Before_ramp_occupancy", -1.5)]),
    ("After_down_mean_speed", &[("Before_down_mean_speed", 5.0), ("Before_ramp_flow", -2.0)]),
    ("After_up_occupancy", &[("Before_up_occupancy", 3.0), ("Before_up_mean_speed", -1.2)]),
    ("After_ramp_occupancy", &[("Before_ramp_occupancy", 2.5), ("Before_up_density", 1.5)]),
    ("After_down_occupancy", &[("Before_down_density", 2.0), ("Before_up_occupancy", 1.0)]),
    ("After_up_flow", &[("Before_up_flow", 250.0), ("MOH", 110.0)]),
    ("After_ramp_flow", &[("Before_ramp_flow", 150.0), ("Before_up_density", -120.0)]),
    ("After_down_flow", &[("Before_down_flow", 260.0), ("Before_ramp_flow", 140.0), ("DOW", 105.0)]),
];

/// After-period target names in generation order: up/ramp/down speed,
/// up/ramp/down occupancy, up/ramp/down flow.
pub const AFTER_NAMES: [&str; 9] = [
    "After_up_mean_speed",
    "After_ramp_mean_speed",
    "After_down_mean_speed",
    "After_up_occupancy",
    "After_ramp_occupancy",
    "After_down_occupancy",
    "After_up_flow",
    "After_ramp_flow",
    "After_down_flow",
];

/// One latent 15-minute state at a position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub speed: f64,
    pub occupancy: f64,
    /// veh/hr/ln, already a multiple of 4 / lanes.
    pub flow: f64,
}

/// A fully specified corpus: traits, site map and latent states.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SynthConfig,
    pub sections: Vec<SectionLatent>,
    pub site_map: SiteMap,
    pub keys: Vec<TimeKey>,
    /// `[section][position index][key index]`, positions in `SegmentPosition::ALL` order.
    before: Vec<[Vec<SlotState>; 3]>,
    after: Vec<[Vec<SlotState>; 3]>,
    pub linear_truth: Option<LinearTruth>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive seed derivation for independent sub-streams.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn pos_index(p: SegmentPosition) -> usize {
    SegmentPosition::ALL.iter().position(|&q| q == p).expect("known position")
}

fn lanes(s: &SectionLatent, p: SegmentPosition) -> u32 {
    match p {
        SegmentPosition::Upstream => s.lanes_up,
        SegmentPosition::Downstream => s.lanes_down,
        SegmentPosition::OnRamp => s.lanes_ramp,
    }
}

/// Rounds a per-lane flow to the nearest whole number of vehicles per slot.
fn quantize_flow(flow: f64, lanes: u32) -> f64 {
    let vehicles = (flow.max(0.0) * lanes as f64 / 4.0).round();
    vehicles * 4.0 / lanes as f64
}

fn slot_hour(key: TimeKey) -> f64 {
    key.hod() as f64 + (key.moh() as f64 - 0.5) / 4.0
}

fn bump(t: f64, center: f64, width: f64) -> f64 {
    (-(t - center).powi(2) / (2.0 * width * width)).exp()
}

/// Speed falls smoothly from free flow toward 55% of it as flow nears capacity.
fn congested_speed(free_flow: f64, flow: f64, capacity: f64) -> f64 {
    let x = (flow / capacity - 0.8) / 0.06;
    free_flow * (1.0 - 0.45 / (1.0 + (-x).exp()))
}

/// Effective vehicle length in feet; varies by slot so occupancy is not a
/// fixed multiple of density.
fn vehicle_length(s: &SectionLatent, key: TimeKey) -> f64 {
    let t = slot_hour(key);
    18.0 + s.length_offset + 2.5 * (t * 1.3).sin() + 0.8 * (key.dow() as f64 * 2.1).cos()
}

/// Ramp speed factor from arterial platoons and signal timing at the ramp
/// entrance; varies by slot independently of mainline state.
fn ramp_entry_delay(key: TimeKey) -> f64 {
    let t = slot_hour(key);
    1.0 - 0.09 * (1.0 + (t * 2.7 + key.dow() as f64 * 1.7).sin())
}

fn occupancy_from(density: f64, length_ft: f64) -> f64 {
    (density * length_ft / 5280.0 * 100.0).clamp(0.0, 100.0)
}

fn draw_sections(cfg: &SynthConfig) -> Vec<SectionLatent> {
    let n = cfg.n_sections;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 1, i as u64]));
            let held_out = i == n - 1;
            let shift = if held_out { cfg.domain_shift } else { 0.0 };
            let mut normal = || -> f64 { rng.sample::<f64, _>(StandardNormal).clamp(-2.5, 2.5) };
            // Section type: drives the metering response and, partially, the
            // traits visible in before-period data.
            let section_type = normal() + shift;
            let mixed = |own: f64| TYPE_LOADING * section_type + (1.0 - TYPE_LOADING * TYPE_LOADING).sqrt() * own;
            let free_flow_speed = FREE_FLOW.mean + FREE_FLOW.sd * FREE_FLOW.shift_sign * mixed(normal());
            let ramp_share = (RAMP_SHARE.mean + RAMP_SHARE.sd * mixed(normal())).clamp(0.15, 0.9);
            let length_offset = 1.2 * mixed(normal());
            let capacity = CAPACITY.mean + CAPACITY.sd * (normal() + shift * CAPACITY.shift_sign);
            let demand = (DEMAND.mean + DEMAND.sd * (normal() + shift * DEMAND.shift_sign)).clamp(0.5, 1.1);
            let am_peak = rng.random_range(0.35..0.6);
            let pm_peak = rng.random_range(0.4..0.65);
            let lanes_up = rng.random_range(2..=4);
            let lanes_down = lanes_up + rng.random_range(0..=1);
            let lanes_ramp = rng.random_range(1..=2);
            let idio: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-2.0, 2.0);
            let metering_effect = (0.3 + 0.08 * section_type + 0.01 * idio).clamp(0.05, 0.7);
            let meter_on_density = 26.0 - 2.0 * section_type;
            SectionLatent {
                section: SectionId::new(format!("S{:02}", i + 1)).expect("non-empty"),
                station_id: 300 + i as u32 + 1,
                lanes_up,
                lanes_down,
                lanes_ramp,
                free_flow_speed,
                capacity,
                demand,
                am_peak,
                pm_peak,
                ramp_share,
                length_offset,
                section_type,
                metering_effect,
                meter_on_density,
            }
        })
        .collect()
}

fn build_site_map(sections: &[SectionLatent]) -> SiteMap {
    let sites = sections
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let positions = SegmentPosition::ALL
                .iter()
                .map(|&p| {
                    let l = lanes(s, p);
                    let base = 20 + 10 * p.code() as u32;
                    (
                        p,
                        PositionSite {
                            lanes: l,
                            length_miles: 0.5,
                            slots: (1..=l).map(|k| base + k).collect(),
                            probe_segment_ids: vec![format!("{}", 1_226_240_000u64 + 10 * i as u64 + p.code() as u64)],
                        },
                    )
                })
                .collect();
            SectionSite {
                section_id: s.section.clone(),
                station_id: s.station_id,
                positions,
                excluded_slots: Vec::new(),
            }
        })
        .collect();
    SiteMap::new(sites).expect("generated site map is consistent")
}

/// Latent before-period states of one section over `keys`.
fn before_states(s: &SectionLatent, keys: &[TimeKey]) -> [Vec<SlotState>; 3] {
    let mut out: [Vec<SlotState>; 3] = Default::default();
    for &key in keys {
        let t = slot_hour(key);
        let day = 1.0 + 0.02 * (key.dow() as f64 - 3.0);
        let shape = 0.45 + s.am_peak * bump(t, 7.5, 0.8) + s.pm_peak * bump(t, 17.25, 1.0);
        let up_flow = quantize_flow(s.capacity * s.demand * shape * day, s.lanes_up);
        let ramp_shape = 0.5 + 0.5 * bump(t, 7.1, 0.7) + 0.45 * bump(t, 16.8, 0.9);
        let ramp_flow = quantize_flow(s.ramp_share * s.capacity * s.demand * ramp_shape * 0.6, s.lanes_ramp);
        let down_flow = quantize_flow(
            (up_flow * s.lanes_up as f64 + ramp_flow * s.lanes_ramp as f64) / s.lanes_down as f64,
            s.lanes_down,
        );
        let length = vehicle_length(s, key);
        let state = |flow: f64, free_flow: f64, capacity: f64| {
            let speed = congested_speed(free_flow, flow, capacity);
            SlotState { speed, occupancy: occupancy_from(flow / speed, length), flow }
        };
        let up = state(up_flow, s.free_flow_speed, s.capacity);
        // Merge friction: ramp traffic slows with the mainline.
        let friction = MERGE_FRICTION_FLOOR + (1.0 - MERGE_FRICTION_FLOOR) * up.speed / s.free_flow_speed;
        let friction = friction * ramp_entry_delay(key);
        out[pos_index(SegmentPosition::Upstream)].push(up);
        out[pos_index(SegmentPosition::Downstream)].push(state(down_flow, s.free_flow_speed - 1.5, s.capacity * 1.02));
        out[pos_index(SegmentPosition::OnRamp)].push(state(ramp_flow, s.free_flow_speed * 0.62 * friction, 1500.0));
    }
    out
}

/// Before inputs in roster order from latent states.
fn latent_inputs(key: TimeKey, b: [&SlotState; 3]) -> Vec<f64> {
    let (up, down, ramp) = (b[0], b[1], b[2]);
    vec![
        key.dow() as f64,
        key.hod() as f64,
        key.moh() as f64,
        up.speed,
        ramp.speed,
        down.speed,
        up.occupancy,
        ramp.occupancy,
        up.flow,
        ramp.flow,
        down.flow,
        up.flow / up.speed,
        ramp.flow / ramp.speed,
        down.flow / down.speed,
    ]
}

/// Systematic piecewise-regime after values, in `AFTER_NAMES` order.
///
/// Depends on the section through `metering_effect` and `meter_on_density`;
/// everything else is a function of the before-period state.
fn piecewise_after(s: &SectionLatent, b: [&SlotState; 3]) -> [f64; 9] {
    let (up, down, ramp) = (b[0], b[1], b[2]);
    let k = up.flow / up.speed;
    let on = if k > s.meter_on_density { 1.0 } else { 0.0 };
    let severity = ((k - s.meter_on_density) / 10.0).clamp(0.0, 1.5);
    let g = s.metering_effect * (ramp.flow / up.flow.max(1.0)) / RAMP_RATIO_REF;
    let lift = on * g * (0.5 + severity);
    let hold = on * g.min(0.9);
    let up_flow = up.flow * (1.0 + 0.2 * lift);
    let ramp_flow = ramp.flow * (1.0 - 0.6 * hold);
    let down_flow = (up_flow * s.lanes_up as f64 + ramp_flow * s.lanes_ramp as f64) / s.lanes_down as f64;
    [
        up.speed + 20.0 * lift - (1.0 - on) * 0.5,
        ramp.speed * (1.0 - 0.6 * hold),
        down.speed + 12.0 * lift,
        up.occupancy * (1.0 - 0.4 * lift.min(1.5)),
        ramp.occupancy * (1.0 + 2.0 * hold),
        down.occupancy * (1.0 - 0.25 * lift.min(1.5)),
        up_flow,
        ramp_flow,
        down_flow,
    ]
}

#[allow(clippy::too_many_arguments)]
fn observe_state(
    cfg: &SynthConfig,
    lanes: u32,
    lat: &SlotState,
    period: Period,
    si: usize,
    p: SegmentPosition,
    week: u32,
    k: usize,
) -> (SlotState, u32, ChaCha8Rng) {
    let n = &cfg.noise;
    let seed = derive_seed(&[cfg.seed, 3, si as u64, p.code() as u64, period as u64, week as u64, k as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
    let zo: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
    let zf: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
    let dropped = rng.random_range(0..=cfg.max_dropped_minutes);
    let state = SlotState {
        speed: (lat.speed + n.speed_sd * zs).max(3.0),
        occupancy: (lat.occupancy * (1.0 + n.occupancy_rel * zo)).clamp(0.0, 100.0),
        flow: quantize_flow(lat.flow * (1.0 + n.flow_rel * zf), lanes),
    };
    (state, dropped, rng)
}

/// Before inputs as the pipeline sees them: weekly observations averaged
/// over weeks, density averaged per week.
fn observed_inputs(cfg: &SynthConfig, s: &SectionLatent, si: usize, before: &[Vec<SlotState>; 3], keys: &[TimeKey]) -> Vec<Vec<f64>> {
    let w = cfg.weeks as f64;
    keys.iter()
        .enumerate()
        .map(|(k, &key)| {
            let mut avg = [SlotState { speed: 0.0, occupancy: 0.0, flow: 0.0 }; 3];
            let mut dens = [0.0; 3];
            for (pi, &p) in SegmentPosition::ALL.iter().enumerate() {
                for week in 1..=cfg.weeks {
                    let (o, _, _) = observe_state(cfg, lanes(s, p), &before[pi][k], Period::Before, si, p, week, k);
                    avg[pi].speed += o.speed / w;
                    avg[pi].occupancy += o.occupancy / w;
                    avg[pi].flow += o.flow / w;
                    dens[pi] += o.flow / o.speed / w;
                }
            }
            let mut row = latent_inputs(key, [&avg[0], &avg[1], &avg[2]]);
            row[11..14].copy_from_slice(&[dens[0], dens[2], dens[1]]);
            row
        })
        .collect()
}

fn sd_of(v: &[f64]) -> f64 {
    ColumnStats::of(v.iter().copied()).sd
}

impl Corpus {
    pub fn build(cfg: &SynthConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        let keys = cfg.keys();
        let sections = draw_sections(cfg);
        let site_map = build_site_map(&sections);
        let before: Vec<[Vec<SlotState>; 3]> = sections.iter().map(|s| before_states(s, &keys)).collect();

        let names: Vec<String> = input_names();
        let mut inputs = Vec::new();
        for b in &before {
            for (k, &key) in keys.iter().enumerate() {
                inputs.push(latent_inputs(key, [&b[0][k], &b[1][k], &b[2][k]]));
            }
        }
        let systematic: Vec<[f64; 9]>;
        let mut linear_truth = None;
        match cfg.regime {
            Regime::Piecewise => {
                systematic = sections
                    .iter()
                    .zip(&before)
                    .flat_map(|(s, b)| (0..keys.len()).map(move |k| piecewise_after(s, [&b[0][k], &b[1][k], &b[2][k]])))
                    .collect();
            }
            Regime::Linear => {
                // The truth is linear in the inputs the pipeline will see.
                inputs = sections
                    .iter()
                    .zip(&before)
                    .enumerate()
                    .flat_map(|(si, (s, b))| observed_inputs(cfg, s, si, b, &keys))
                    .collect();
                let stats: Vec<ColumnStats> =
                    (0..names.len()).map(|j| ColumnStats::of(inputs.iter().map(|r| r[j]))).collect();
                let before_means: BTreeMap<&str, f64> = [
                    ("After_up_mean_speed", 3),
                    ("After_ramp_mean_speed", 4),
                    ("After_down_mean_speed", 5),
                    ("After_up_occupancy", 6),
                    ("After_ramp_occupancy", 7),
                    ("After_up_flow", 8),
                    ("After_ramp_flow", 9),
                    ("After_down_flow", 10),
                ]
                .into_iter()
                .map(|(n, j)| (n, stats[j].mean))
                .collect();
                let down_occ_mean = before
                    .iter()
                    .flat_map(|b| b[1].iter().map(|s| s.occupancy))
                    .sum::<f64>()
                    / (before.len() * keys.len()) as f64;
                let mut effects = BTreeMap::new();
                let mut base = BTreeMap::new();
                for (target, list) in LINEAR_EFFECTS {
                    let row: BTreeMap<String, f64> = names
                        .iter()
                        .map(|n| (n.clone(), list.iter().find(|(m, _)| m == n).map_or(0.0, |(_, e)| *e)))
                        .collect();
                    effects.insert(target.to_string(), row);
                    base.insert(target.to_string(), before_means.get(target).copied().unwrap_or(down_occ_mean));
                }
                let mut lin: Vec<[f64; 9]> = inputs
                    .iter()
                    .map(|x| {
                        let mut out = [0.0; 9];
                        for (o, name) in out.iter_mut().zip(AFTER_NAMES) {
                            let eff = &effects[name];
                            *o = base[name]
                                + names
                                    .iter()
                                    .enumerate()
                                    .map(|(j, n)| eff[n] * (x[j] - stats[j].mean) / stats[j].sd)
                                    .sum::<f64>();
                        }
                        out
                    })
                    .collect();
                // Raise a target's base where its range would hit the physical floor,
                // so clamping never bends the linear relation.
                for (v, name) in AFTER_NAMES.iter().enumerate() {
                    let col: Vec<f64> = lin.iter().map(|r| r[v]).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let floor = if v < 3 { 3.0 + 3.0 * cfg.noise.speed_sd } else { 0.0 };
                    let shift = (floor + 0.5 * sd_of(&col) - lo).max(0.0);
                    if shift > 0.0 {
                        lin.iter_mut().for_each(|r| r[v] += shift);
                        *base.get_mut(*name).expect("every target has a base") += shift;
                    }
                }
                systematic = lin;
                linear_truth = Some(LinearTruth {
                    inputs: names.clone(),
                    input_means: stats.iter().map(|s| s.mean).collect(),
                    input_sds: stats.iter().map(|s| s.sd).collect(),
                    effects,
                    base,
                    residual_sd: BTreeMap::new(),
                });
            }
        }

        // Residual noise relative to each target's systematic spread.
        let target_sd: Vec<f64> = (0..9).map(|v| sd_of(&systematic.iter().map(|r| r[v]).collect::<Vec<_>>())).collect();
        if let Some(t) = linear_truth.as_mut() {
            for (v, name) in AFTER_NAMES.iter().enumerate() {
                t.residual_sd.insert(name.to_string(), cfg.noise.target_rel * target_sd[v]);
            }
        }
        let mut after: Vec<[Vec<SlotState>; 3]> = Vec::with_capacity(sections.len());
        for (si, s) in sections.iter().enumerate() {
            let mut pos: [Vec<SlotState>; 3] = Default::default();
            for k in 0..keys.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 2, si as u64, k as u64]));
                let mut v = systematic[si * keys.len() + k];
                for (j, x) in v.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *x += cfg.noise.target_rel * target_sd[j] * e;
                }
                let speed = |x: f64| x.max(3.0);
                let occ = |x: f64| x.clamp(0.0, 100.0);
                pos[pos_index(SegmentPosition::Upstream)]
                    .push(SlotState { speed: speed(v[0]), occupancy: occ(v[3]), flow: quantize_flow(v[6], s.lanes_up) });
                pos[pos_index(SegmentPosition::OnRamp)]
                    .push(SlotState { speed: speed(v[1]), occupancy: occ(v[4]), flow: quantize_flow(v[7], s.lanes_ramp) });
                pos[pos_index(SegmentPosition::Downstream)]
                    .push(SlotState { speed: speed(v[2]), occupancy: occ(v[5]), flow: quantize_flow(v[8], s.lanes_down) });
            }
            after.push(pos);
        }
        Ok(Self { config: cfg.clone(), sections, site_map, keys, before, after, linear_truth })
    }

    pub fn held_out(&self) -> &SectionId {
        &self.sections.last().expect("n_sections >= 2").section
    }

    pub fn latent(&self, period: Period, section: usize, position: SegmentPosition, key_index: usize) -> SlotState {
        let src = match period {
            Period::Before => &self.before,
            Period::After => &self.after,
        };
        src[section][pos_index(position)][key_index]
    }

    fn period_start(&self, period: Period) -> NaiveDate {
        match period {
            Period::Before => self.config.before_start,
            Period::After => self.config.after_start,
        }
    }

    fn slot_start(&self, period: Period, week: u32, key: TimeKey) -> NaiveDateTime {
        let date = self.period_start(period)
            + Duration::days(7 * (week as i64 - 1) + key.dow() as i64 - 3);
        let time = NaiveTime::from_hms_opt(key.hod() as u32, (key.moh() as u32 - 1) * 15, 0).expect("valid");
        date.and_time(time)
    }

    /// Weekly observation of one slot: noisy state, dropped probe minutes and
    /// the slot's own random stream for record-level jitter.
    fn observe(&self, period: Period, si: usize, p: SegmentPosition, week: u32, k: usize) -> (SlotState, u32, ChaCha8Rng) {
        let lat = self.latent(period, si, p, k);
        observe_state(&self.config, lanes(&self.sections[si], p), &lat, period, si, p, week, k)
    }

    fn sample_for(&self, period: Period, si: usize, p: SegmentPosition, week: u32, k: usize) -> TrafficSample {
        let (state, dropped, _) = self.observe(period, si, p, week, k);
        TrafficSample {
            section: self.sections[si].section.clone(),
            position: p,
            period,
            week_index: week,
            key: self.keys[k],
            mean_speed: state.speed,
            occupancy: state.occupancy,
            flow_rate: state.flow,
            density: match period {
                Period::Before if state.speed > 0.0 => Some(state.flow / state.speed),
                _ => None,
            },
            coverage: ((15 - dropped) as f64 / 15.0).min(1.0),
        }
    }

    /// Weekly slot aggregates for both periods, equal to what ingest would
    /// produce from the raw streams.
    pub fn samples(&self) -> Vec<TrafficSample> {
        let mut out = Vec::new();
        for period in [Period::Before, Period::After] {
            for si in 0..self.sections.len() {
                for &p in &SegmentPosition::ALL {
                    for week in 1..=self.config.weeks {
                        for k in 0..self.keys.len() {
                            out.push(self.sample_for(period, si, p, week, k));
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| {
            (a.period as u8, &a.section, a.position, a.week_index, a.key)
                .cmp(&(b.period as u8, &b.section, b.position, b.week_index, b.key))
        });
        out
    }

    /// Streams raw loop and probe CSVs for one period.
    pub fn write_raw<L: Write, P: Write>(&self, period: Period, loops: L, probes: P) -> Result<RawCounts, SynthError> {
        let mut lw = csv::Writer::from_writer(loops);
        let mut pw = csv::Writer::from_writer(probes);
        lw.write_record(LOOP_COLUMNS)?;
        pw.write_record(PROBE_WRITE_COLUMNS)?;
        let mut counts = RawCounts::default();
        let mut next_id: u64 = 850_000_000;
        for week in 1..=self.config.weeks {
            for k in 0..self.keys.len() {
                let start = self.slot_start(period, week, self.keys[k]);
                for (si, s) in self.sections.iter().enumerate() {
                    for &p in &SegmentPosition::ALL {
                        let (state, dropped, mut rng) = self.observe(period, si, p, week, k);
                        let site = self.site_map.position(&s.section, p).expect("generated");
                        let l = site.lanes as usize;
                        let vehicles = (state.flow * l as f64 / 4.0).round() as u64;
                        let n_rec = l * RECORDS_PER_LANE;
                        let jitter: Vec<f64> = (0..n_rec)
                            .map(|_| rng.random_range(-1.0..1.0) * 0.1 * state.occupancy.min(100.0 - state.occupancy))
                            .collect();
                        let jbar = jitter.iter().sum::<f64>() / n_rec as f64;
                        for (lane, &slot) in site.slots.iter().enumerate() {
                            let lane_total = carried(vehicles, lane, l);
                            for r in 0..RECORDS_PER_LANE {
                                let rec = LoopRecord {
                                    id: next_id.to_string(),
                                    timestamp: start + Duration::seconds(20 * r as i64),
                                    station_id: s.station_id,
                                    slot_number: slot,
                                    volume: carried(lane_total, r, RECORDS_PER_LANE) as u32,
                                    speed: state.speed.round(),
                                    occupancy: state.occupancy + jitter[lane * RECORDS_PER_LANE + r] - jbar,
                                };
                                next_id += 1;
                                write_loop_row(&mut lw, &rec)?;
                                counts.loop_rows += 1;
                            }
                        }
                        let mut minutes: Vec<u32> = (0..15).collect();
                        for _ in 0..dropped {
                            let i = rng.random_range(0..minutes.len());
                            minutes.remove(i);
                        }
                        let mj: Vec<f64> = minutes
                            .iter()
                            .map(|_| rng.random_range(-1.0..1.0) * (2.0 * self.config.noise.speed_sd).min(0.3 * state.speed))
                            .collect();
                        let mbar = mj.iter().sum::<f64>() / mj.len() as f64;
                        for (&m, j) in minutes.iter().zip(&mj) {
                            let speed = state.speed + j - mbar;
                            let rec = ProbeRecord {
                                timestamp: start + Duration::minutes(m as i64),
                                segment_id: site.probe_segment_ids[0].clone(),
                                speed,
                                travel_time: site.length_miles / speed * 60.0,
                                confidence: Some(PROBE_CONFIDENCE),
                            };
                            write_probe_row(&mut pw, &rec)?;
                            counts.probe_rows += 1;
                        }
                    }
                }
            }
        }
        lw.flush()?;
        pw.flush()?;
        Ok(counts)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.config.clone(),
            held_out_section: self.held_out().clone(),
            moderate_shift: MODERATE_SHIFT,
            sections: self.sections.clone(),
            regime_description: match self.config.regime {
                Regime::Linear => "after = base + sum_j effect_j * (x_j - mean_j) / sd_j + N(0, (target_rel * sd_systematic)^2), x the week-averaged observed before inputs; effects in target units per input sd".into(),
                Regime::Piecewise => "k = up_flow / up_speed; on = k > 26; severity = clamp((k - 26) / 10, 0, 1.5); \
                     g = metering_effect * (ramp_flow / up_flow) / 0.27; lift = on g (0.5 + severity); hold = on min(g, 0.9); \
                     up_speed += 20 lift - 0.5 (1 - on); ramp_speed *= 1 - 0.6 hold; down_speed += 12 lift; \
                     up_occ *= 1 - 0.4 min(lift, 1.5); ramp_occ *= 1 + 2 hold; down_occ *= 1 - 0.25 min(lift, 1.5); \
                     up_flow *= 1 + 0.2 lift; ramp_flow *= 1 - 0.6 hold; down_flow = lane-weighted sum of up and ramp flow; \
                     plus N(0, (target_rel * sd_systematic)^2); metering_effect = clamp(0.3 + 0.08 c + 0.01 z, 0.05, 0.7); meter_on_density = 26 - 2 c; \\
                     c = section type ~ N(0,1) (+ domain_shift for the held-out section); free-flow speed, ramp share and \\
                     vehicle-length offset load 0.75 on c".into(),
            },
            linear_truth: self.linear_truth.clone(),
        }
    }

    /// Writes `site_map.json`, `manifest.json` and raw CSVs under `before/` and `after/`.
    pub fn write_all(&self, dir: &Path) -> Result<RawCounts, SynthError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("site_map.json"), self.site_map.to_json_pretty())?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        let mut total = RawCounts::default();
        for period in [Period::Before, Period::After] {
            let sub = dir.join(period.as_str());
            std::fs::create_dir_all(&sub)?;
            let loops = BufWriter::new(File::create(sub.join("loops.csv"))?);
            let probes = BufWriter::new(File::create(sub.join("probes.csv"))?);
            let c = self.write_raw(period, loops, probes)?;
            total.loop_rows += c.loop_rows;
            total.probe_rows += c.probe_rows;
        }
        Ok(total)
    }
}

/// Share `part` of `total` items split across `parts` with carried rounding.
fn carried(total: u64, part: usize, parts: usize) -> u64 {
    let hi = (total as u128 * (part as u128 + 1)) / parts as u128;
    let lo = (total as u128 * part as u128) / parts as u128;
    (hi - lo) as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCounts {
    pub loop_rows: u64,
    pub probe_rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub held_out_section: SectionId,
    pub moderate_shift: f64,
    pub sections: Vec<SectionLatent>,
    pub regime_description: String,
    pub linear_truth: Option<LinearTruth>,
}
