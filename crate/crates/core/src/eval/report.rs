use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loso::FoldOutcome;
use super::metrics::{Metric, Scores};
use super::EvalError;
use crate::domain::SectionId;
use crate::ridge::TargetKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub target: String,
    pub model: String,
    pub section: SectionId,
    pub scores: Scores,
}

/// Scores per (target, model, held-out section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub config_hash: String,
    pub runs: usize,
    /// Column order for targets and models.
    pub targets: Vec<String>,
    pub models: Vec<String>,
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self { seed, config_hash: config_hash.into(), runs: 1, targets: Vec::new(), models: Vec::new(), records: Vec::new() }
    }

    pub fn push_folds(&mut self, folds: &[FoldOutcome]) {
        for f in folds {
            if !self.targets.contains(&f.target) {
                self.targets.push(f.target.clone());
            }
            if !self.models.contains(&f.model) {
                self.models.push(f.model.clone());
            }
            self.records.push(MetricRecord {
                target: f.target.clone(),
                model: f.model.clone(),
                section: f.section.clone(),
                scores: f.scores,
            });
        }
        self.normalize();
    }

    /// Sorts records by target order, model order, then section.
    pub fn normalize(&mut self) {
        let ti = |t: &str| self.targets.iter().position(|x| x == t).unwrap_or(usize::MAX);
        let mi = |m: &str| self.models.iter().position(|x| x == m).unwrap_or(usize::MAX);
        let mut recs = std::mem::take(&mut self.records);
        recs.sort_by(|a, b| {
            (ti(&a.target), mi(&a.model), &a.section).cmp(&(ti(&b.target), mi(&b.model), &b.section))
        });
        self.records = recs;
    }

    pub fn sections(&self) -> Vec<SectionId> {
        self.records.iter().map(|r| r.section.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn get(&self, target: &str, model: &str, section: &SectionId) -> Option<&Scores> {
        self.records
            .iter()
            .find(|r| r.target == target && r.model == model && &r.section == section)
            .map(|r| &r.scores)
    }

    /// Mean of each metric over the sections of one (target, model).
    pub fn mean(&self, target: &str, model: &str, metric: Metric) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.target == target && r.model == model)
            .map(|r| r.scores.get(metric))
            .collect::<Option<_>>()?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Element-wise mean of reports from repeated runs with the same layout.
    pub fn average(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
        let first = reports.first().ok_or(EvalError::EmptyInput)?;
        let mut out = first.clone();
        out.runs = reports.iter().map(|r| r.runs).sum();
        for (i, rec) in out.records.iter_mut().enumerate() {
            let all: Vec<&Scores> = reports
                .iter()
                .map(|r| {
                    r.records
                        .get(i)
                        .filter(|o| o.target == rec.target && o.model == rec.model && o.section == rec.section)
                        .map(|o| &o.scores)
                        .ok_or_else(|| EvalError::ReportMismatch("runs have different layouts".into()))
                })
                .collect::<Result<_, _>>()?;
            let n = all.len() as f64;
            rec.scores.mae = all.iter().map(|s| s.mae).sum::<f64>() / n;
            rec.scores.rmse = all.iter().map(|s| s.rmse).sum::<f64>() / n;
            rec.scores.mape = all.iter().map(|s| s.mape).sum::<Option<f64>>().map(|m| m / n);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn header(&self) -> String {
        format!("# seed={} config_hash={} runs={}\n", self.seed, self.config_hash, self.runs)
    }
}

fn kind_name(k: TargetKind) -> &'static str {
    match k {
        TargetKind::Speed => "speed",
        TargetKind::Occupancy => "occupancy",
        TargetKind::Flow => "flow",
    }
}

/// Segment label of an `After_<pos>_<var>` target.
pub fn location(target: &str) -> &str {
    match target.split('_').nth(1) {
        Some("up") => "upstream",
        Some("ramp") => "on-ramp",
        Some("down") => "downstream",
        _ => target,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Rows = sections, columns = `target|model`, plus a mean row.
pub fn metric_csv(r: &MetricReport, metric: Metric) -> String {
    let mut out = r.header();
    let cols: Vec<(&String, &String)> = r.targets.iter().flat_map(|t| r.models.iter().map(move |m| (t, m))).collect();
    out.push_str("section");
    for (t, m) in &cols {
        let _ = write!(out, ",{t}|{m}");
    }
    out.push('\n');
    for s in r.sections() {
        out.push_str(s.as_str());
        for (t, m) in &cols {
            let _ = write!(out, ",{}", cell(r.get(t, m, &s).and_then(|x| x.get(metric))));
        }
        out.push('\n');
    }
    out.push_str("mean");
    for (t, m) in &cols {
        let _ = write!(out, ",{}", cell(r.mean(t, m, metric)));
    }
    out.push('\n');
    out
}

/// Location × model rows against section columns for one variable kind.
pub fn kind_table_csv(r: &MetricReport, kind: TargetKind, metric: Metric) -> Option<String> {
    let targets: Vec<&String> = r.targets.iter().filter(|t| TargetKind::of(t) == Some(kind)).collect();
    if targets.is_empty() {
        return None;
    }
    let sections = r.sections();
    let mut out = r.header();
    out.push_str("location,model");
    for s in &sections {
        let _ = write!(out, ",{}", s.as_str());
    }
    out.push_str(",mean\n");
    for t in targets {
        for m in &r.models {
            let _ = write!(out, "{},{m}", location(t));
            for s in &sections {
                let _ = write!(out, ",{}", cell(r.get(t, m, s).and_then(|x| x.get(metric))));
            }
            let _ = writeln!(out, ",{}", cell(r.mean(t, m, metric)));
        }
    }
    Some(out)
}

/// Long-format plot data: metric value per section, location and model.
pub fn plot_csv(r: &MetricReport, kind: TargetKind, metric: Metric) -> Option<String> {
    let mut out = r.header();
    out.push_str("section,location,model,value\n");
    let mut any = false;
    for rec in r.records.iter().filter(|x| TargetKind::of(&x.target) == Some(kind)) {
        any = true;
        let _ = writeln!(
            out,
            "{},{},{},{}",
            rec.section.as_str(),
            location(&rec.target),
            rec.model,
            cell(rec.scores.get(metric))
        );
    }
    any.then_some(out)
}

/// Writes every report artifact into `dir`; returns the paths written.
pub fn emit_report(r: &MetricReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if r.records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    std::fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String)> = Vec::new();
    for metric in Metric::ALL {
        files.push((format!("{}.csv", metric.as_str()), metric_csv(r, metric)));
        for kind in [TargetKind::Speed, TargetKind::Occupancy, TargetKind::Flow] {
            if let Some(t) = kind_table_csv(r, kind, metric) {
                files.push((format!("table_{}_{}.csv", kind_name(kind), metric.as_str()), t));
            }
            if let Some(p) = plot_csv(r, kind, metric) {
                files.push((format!("plot_{}_{}.csv", kind_name(kind), metric.as_str()), p));
            }
        }
    }
    files.push(("report.json".into(), r.to_json()?));
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Fold wall-clock times, kept apart from the deterministic report files.
/// Wall-clock seconds per fold; kept out of the metric files so those stay reproducible.
pub fn timings_csv(folds: &[FoldOutcome]) -> String {
    let mut out = String::from("target,model,section,seconds\n");
    for f in folds {
        let _ = writeln!(out, "{},{},{},{:.6}", f.target, f.model, f.section.as_str(), f.seconds);
    }
    out
}
