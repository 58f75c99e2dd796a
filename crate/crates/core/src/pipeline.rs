//! Stage orchestration: one function per command, each reading its inputs
//! from and writing its outputs to the run's output directory.
//!
//! Layout under `out`:
//!
//! | file | written by |
//! |---|---|
//! | `data/` (site map, raw CSVs, manifest) | `synth` |
//! | `samples.csv`, `coverage.json`, `skipped.csv` | `ingest` |
//! | `profiles.csv` | `correct` |
//! | `features.csv` | `pair` |
//! | `ridge_coefficients.csv`, `selection.json` | `ridge` |
//! | `models/<section>/<target>.json` | `train` |
//! | `predictions.csv` | `predict` |
//! | `evaluation.json`, `fold_predictions.csv`, `timings.csv` | `evaluate` |
//! | `grid/` | `grid-search` |
//! | `report/` | `report` |
//!
//! Every CSV starts with `# seed=<seed> config_hash=<hash>`; JSON artifacts
//! carry the same two fields. `timings.csv` is the only file whose content
//! varies between identical runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correction::{
    before_inputs, build_dataset, correct_all, input_names, read_features_csv, read_profiles_csv,
    write_features_csv, write_profiles_csv, CorrectionError, Dataset, PairingOptions,
};
use crate::domain::{DomainError, Period, SectionId, SiteMap};
use crate::eval::{
    emit_report, grid_search, loso_cv, timings_csv, EvalError, FoldOutcome, GridModel, GridSpec, MetricReport,
    ModelSpec,
};
use crate::ingest::{
    aggregate, parse_loop_csv, parse_probe_csv, read_samples_csv, write_samples_csv, AggregateConfig,
    CoverageReport, IngestError, SkipReason,
};
use crate::ridge::{averaged_fit, filter_variables, write_coefficient_table, RidgeConfig, RidgeError, SelectionResult, Thresholds};
use crate::synth::{Corpus, SynthConfig, SynthError};
use crate::transfer::{two_stage_fit, TransferConfig, TransferError, TransferModel};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{what} not found: {path}")]
    MissingInput { what: &'static str, path: PathBuf },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{path}: {source}")]
    Ingest {
        path: PathBuf,
        #[source]
        source: IngestError,
    },
    #[error("{path}: {source}")]
    Correction {
        path: PathBuf,
        #[source]
        source: CorrectionError,
    },
    #[error(transparent)]
    Ridge(#[from] RidgeError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// 1 for bad configuration or inputs, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::MissingInput { .. } | Error::Domain(_) => 1,
            Error::Ingest { source: IngestError::MalformedHeader { .. }, .. } => 1,
            Error::Json { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Raw input locations; unset paths default to the `synth` layout under `out/data`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub site_map: Option<PathBuf>,
    pub before_loops: Option<PathBuf>,
    pub before_probes: Option<PathBuf>,
    pub after_loops: Option<PathBuf>,
    pub after_probes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transfer,
    SourceOnly,
    Knn,
}

/// Every configurable decision of a run. Loaded from JSON; command-line flags win.
///
/// `seed` is the only seed: it overrides the nested ridge, transfer and synth seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Evaluation repeats with seeds `seed, seed + 1, …`; scores are averaged.
    pub runs: usize,
    /// Worker threads; all cores when unset.
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub inputs: InputPaths,
    pub aggregate: AggregateConfig,
    pub pairing: PairingOptions,
    pub ridge: RidgeConfig,
    pub thresholds: Thresholds,
    /// Models see only ridge-selected inputs when true.
    pub select_variables: bool,
    pub transfer: TransferConfig,
    pub models: Vec<ModelKind>,
    pub knn_k: usize,
    pub grid: GridSpec,
    pub grid_models: Vec<GridModel>,
    /// Caps grid points by seeded subsampling.
    pub budget: Option<usize>,
    /// `pipeline` also runs `grid-search` when true.
    pub pipeline_grid_search: bool,
    /// Targets to model; all when empty.
    pub targets: Vec<String>,
    /// Section predicted by `train`/`predict`; the last section when unset.
    pub section: Option<String>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 1,
            jobs: None,
            out: PathBuf::from("out"),
            inputs: InputPaths::default(),
            aggregate: AggregateConfig::default(),
            pairing: PairingOptions::default(),
            ridge: RidgeConfig::default(),
            thresholds: Thresholds::default(),
            select_variables: true,
            transfer: TransferConfig::default(),
            models: vec![ModelKind::Transfer, ModelKind::SourceOnly, ModelKind::Knn],
            knn_k: 5,
            grid: GridSpec::default(),
            grid_models: vec![GridModel::Transfer],
            budget: None,
            pipeline_grid_search: false,
            targets: Vec::new(),
            section: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput { what: "config file", path: path.to_path_buf() });
        }
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }

    /// Copies `seed` into every nested seed.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.ridge.seed = c.seed;
        c.transfer.seed = c.seed;
        c.synth.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.runs == 0 {
            return bad("runs must be >= 1".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be >= 1".into());
        }
        if self.ridge.lambda_grid.is_empty() || self.ridge.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambda_grid must be non-empty, finite and >= 0".into());
        }
        if self.ridge.folds < 2 || self.ridge.runs == 0 || !(self.ridge.subsample > 0.0 && self.ridge.subsample <= 1.0) {
            return bad("ridge needs folds >= 2, runs >= 1 and subsample in (0, 1]".into());
        }
        for (kind, v) in [("speed", self.thresholds.speed), ("occupancy", self.thresholds.occupancy), ("flow", self.thresholds.flow)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("threshold {kind} must be finite and >= 0"));
            }
        }
        self.transfer.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.grid.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.synth.validate().map_err(|e| Error::Validation(e.to_string()))?;
        if self.models.is_empty() {
            return bad("models must not be empty".into());
        }
        if self.knn_k == 0 {
            return bad("knn_k must be >= 1".into());
        }
        if self.budget == Some(0) {
            return bad("budget must be >= 1".into());
        }
        if self.aggregate.days.is_empty() || self.aggregate.hour_windows.is_empty() {
            return bad("calendar days and hour windows must be non-empty".into());
        }
        let known = PairingOptions { include_down_occupancy: true }.target_names();
        if let Some(t) = self.targets.iter().find(|t| !known.contains(t)) {
            return bad(format!("unknown target {t:?}"));
        }
        Ok(())
    }

    /// Hash of the settings that affect numeric outputs; paths and thread count excluded.
    pub fn config_hash(&self) -> String {
        let mut c = self.effective();
        c.out = PathBuf::new();
        c.jobs = None;
        c.inputs = InputPaths::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn site_map_path(&self) -> PathBuf {
        self.inputs.site_map.clone().unwrap_or_else(|| self.data_dir().join("site_map.json"))
    }

    pub fn raw_paths(&self, period: Period) -> (PathBuf, PathBuf) {
        let dir = self.data_dir().join(period.as_str());
        let (l, p) = match period {
            Period::Before => (&self.inputs.before_loops, &self.inputs.before_probes),
            Period::After => (&self.inputs.after_loops, &self.inputs.after_probes),
        };
        (
            l.clone().unwrap_or_else(|| dir.join("loops.csv")),
            p.clone().unwrap_or_else(|| dir.join("probes.csv")),
        )
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Seed and config hash of a run, stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self { seed: cfg.seed, config_hash: cfg.config_hash() }
    }

    pub fn csv_header(&self) -> String {
        format!("# seed={} config_hash={}\n", self.seed, self.config_hash)
    }
}

/// JSON artifact with provenance fields next to the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub seed: u64,
    pub config_hash: String,
    pub data: T,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn open(path: &Path, what: &'static str) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::MissingInput { what, path: path.to_path_buf() });
    }
    File::open(path).map(BufReader::new).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_csv_artifact(
    path: &Path,
    prov: &Provenance,
    body: impl FnOnce(&mut Vec<u8>) -> std::result::Result<(), Error>,
) -> Result<()> {
    let mut buf = prov.csv_header().into_bytes();
    body(&mut buf)?;
    write_file(path, &buf)
}

fn write_json_artifact<T: Serialize>(path: &Path, prov: &Provenance, data: T) -> Result<()> {
    let a = Artifact { seed: prov.seed, config_hash: prov.config_hash.clone(), data };
    let text = serde_json::to_string_pretty(&a).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    write_file(path, text.as_bytes())
}

fn read_json_artifact<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput { what, path: path.to_path_buf() });
    }
    let text = read_text(path)?;
    serde_json::from_str::<Artifact<T>>(&text)
        .map(|a| a.data)
        .map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn correction_err(path: &Path) -> impl FnOnce(CorrectionError) -> Error + '_ {
    move |source| Error::Correction { path: path.to_path_buf(), source }
}

fn ingest_err(path: &Path) -> impl FnOnce(IngestError) -> Error + '_ {
    move |source| Error::Ingest { path: path.to_path_buf(), source }
}

/// Sets the global worker count; later calls are ignored.
pub fn init_pool(jobs: Option<usize>) {
    if let Some(n) = jobs {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialised");
        }
    }
}

/// Generates a synthetic corpus under `out/data`.
pub fn synth(cfg: &RunConfig) -> Result<String> {
    let cfg = cfg.effective();
    let corpus = Corpus::build(&cfg.synth)?;
    let dir = cfg.data_dir();
    let counts = corpus.write_all(&dir)?;
    Ok(format!(
        "synth: {} sections, {} loop rows, {} probe rows, held-out {} -> {}",
        corpus.sections.len(),
        counts.loop_rows,
        counts.probe_rows,
        corpus.held_out().as_str(),
        dir.display()
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub before: CoverageReport,
    pub after: CoverageReport,
    pub skipped_rows: usize,
}

/// Raw loop and probe CSVs → 15-minute samples.
pub fn ingest(cfg: &RunConfig) -> Result<String> {
    let prov = Provenance::of(cfg);
    let map_path = cfg.site_map_path();
    if !map_path.exists() {
        return Err(Error::MissingInput { what: "site map", path: map_path });
    }
    let map = SiteMap::load(&map_path)?;
    let mut samples = Vec::new();
    let mut skipped = String::from("file,line,reason\n");
    let mut coverage = Vec::new();
    let mut n_skipped = 0;
    for period in [Period::Before, Period::After] {
        let (lp, pp) = cfg.raw_paths(period);
        let (loops, ls) = parse_loop_csv(open(&lp, "loop file")?, &map).map_err(ingest_err(&lp))?;
        let (probes, ps) = parse_probe_csv(open(&pp, "probe file")?, &map).map_err(ingest_err(&pp))?;
        for (path, report) in [(&lp, &ls), (&pp, &ps)] {
            for row in &report.rows {
                n_skipped += 1;
                let reason = match &row.reason {
                    SkipReason::Malformed(m) => format!("malformed: {m}"),
                    other => format!("{other:?}"),
                };
                let _ = writeln!(skipped, "{},{},\"{}\"", path.display(), row.line, reason.replace('"', "'"));
            }
        }
        let out = aggregate(&loops, &probes, &map, period, &cfg.aggregate);
        samples.extend(out.samples);
        coverage.push(out.coverage);
    }
    let n = samples.len();
    let path = cfg.path("samples.csv");
    write_csv_artifact(&path, &prov, |buf| write_samples_csv(buf, &samples).map_err(ingest_err(&path)))?;
    write_file(&cfg.path("skipped.csv"), format!("{}{skipped}", prov.csv_header()).as_bytes())?;
    let after = coverage.pop().expect("two periods");
    let before = coverage.pop().expect("two periods");
    write_json_artifact(&cfg.path("coverage.json"), &prov, IngestSummary { before, after, skipped_rows: n_skipped })?;
    Ok(format!("ingest: {n} samples, {n_skipped} rows skipped -> {}", path.display()))
}

/// Samples → per-(section, position, period) time-of-week profiles.
pub fn correct(cfg: &RunConfig) -> Result<String> {
    let prov = Provenance::of(cfg);
    let src = cfg.path("samples.csv");
    let samples = read_samples_csv(open(&src, "samples file")?).map_err(ingest_err(&src))?;
    let profiles = correct_all(&samples);
    let path = cfg.path("profiles.csv");
    write_csv_artifact(&path, &prov, |buf| write_profiles_csv(buf, &profiles).map_err(correction_err(&path)))?;
    Ok(format!("correct: {} samples -> {} profiles -> {}", samples.len(), profiles.len(), path.display()))
}

/// Profiles → feature rows.
pub fn pair(cfg: &RunConfig) -> Result<String> {
    let prov = Provenance::of(cfg);
    let src = cfg.path("profiles.csv");
    let profiles = read_profiles_csv(open(&src, "profiles file")?).map_err(correction_err(&src))?;
    let (d, dropped) = build_dataset(&profiles, cfg.pairing);
    let path = cfg.path("features.csv");
    write_csv_artifact(&path, &prov, |buf| write_features_csv(buf, &d).map_err(correction_err(&path)))?;
    Ok(format!(
        "pair: {} rows over {} sections, {dropped} keys dropped -> {}",
        d.len(),
        d.sections().len(),
        path.display()
    ))
}

fn load_features(cfg: &RunConfig) -> Result<Dataset> {
    let src = cfg.path("features.csv");
    read_features_csv(open(&src, "features file")?).map_err(correction_err(&src))
}

fn targets_of(cfg: &RunConfig, d: &Dataset) -> Result<Vec<String>> {
    if cfg.targets.is_empty() {
        return Ok(d.target_names().to_vec());
    }
    for t in &cfg.targets {
        if d.target_index(t).is_none() {
            return Err(Error::Validation(format!("target {t:?} is not in features.csv")));
        }
    }
    Ok(d.target_names().iter().filter(|t| cfg.targets.contains(t)).cloned().collect())
}

/// Ridge coefficients and threshold selection per target.
pub fn ridge(cfg: &RunConfig) -> Result<String> {
    let cfg = cfg.effective();
    let prov = Provenance::of(&cfg);
    let d = load_features(&cfg)?;
    let coeffs = targets_of(&cfg, &d)?
        .iter()
        .map(|t| averaged_fit(&d, t, &cfg.ridge))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let sel = filter_variables(&coeffs, &cfg.thresholds)?;
    let path = cfg.path("ridge_coefficients.csv");
    write_csv_artifact(&path, &prov, |buf| write_coefficient_table(buf, d.input_names(), &sel).map_err(Error::from))?;
    write_json_artifact(&cfg.path("selection.json"), &prov, &sel)?;
    let counts: Vec<String> = sel
        .targets
        .iter()
        .map(|(t, s)| format!("{t}={}{}", s.selected.len(), if s.fallback { "*" } else { "" }))
        .collect();
    Ok(format!("ridge: selected {} -> {}", counts.join(" "), path.display()))
}

fn selection(cfg: &RunConfig) -> Result<Option<SelectionResult>> {
    if !cfg.select_variables {
        return Ok(None);
    }
    read_json_artifact(&cfg.path("selection.json"), "selection file (run `ridge` first)").map(Some)
}

fn roster_for(sel: &Option<SelectionResult>, target: &str, d: &Dataset) -> Vec<String> {
    sel.as_ref()
        .and_then(|s| s.selected_in_order(target, d.input_names()))
        .unwrap_or_else(|| d.input_names().to_vec())
}

fn target_section(cfg: &RunConfig, sections: &[SectionId]) -> Result<SectionId> {
    match &cfg.section {
        Some(s) => SectionId::new(s.clone()).map_err(|e| Error::Validation(e.to_string())),
        None => sections.last().cloned().ok_or_else(|| Error::Validation("no sections in features.csv".into())),
    }
}

fn project(full: &[String], rows: &[Vec<f64>], roster: &[String]) -> Vec<Vec<f64>> {
    let idx: Vec<usize> = roster.iter().map(|n| full.iter().position(|f| f == n).expect("roster subset")).collect();
    rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect()
}

fn model_path(cfg: &RunConfig, section: &SectionId, target: &str) -> PathBuf {
    cfg.out.join("models").join(section.as_str()).join(format!("{target}.json"))
}

/// Trains one transfer model per target for the chosen section, using every
/// other paired section as source and the section's before inputs as target.
pub fn train(cfg: &RunConfig) -> Result<String> {
    let cfg = cfg.effective();
    let prov = Provenance::of(&cfg);
    let d = load_features(&cfg)?;
    let sel = selection(&cfg)?;
    let src = cfg.path("profiles.csv");
    let profiles = read_profiles_csv(open(&src, "profiles file")?).map_err(correction_err(&src))?;
    let section = target_section(&cfg, &d.sections())?;
    let target_rows: Vec<Vec<f64>> = before_inputs(&profiles, &section).into_iter().map(|(_, r)| r).collect();
    if target_rows.is_empty() {
        return Err(Error::Validation(format!("section {} has no before-period inputs", section.as_str())));
    }
    let source = d.filter(|r| r.section != section);
    let mut lines = Vec::new();
    for target in targets_of(&cfg, &d)? {
        let roster = roster_for(&sel, &target, &d);
        let sx = project(d.input_names(), &source.input_rows(), &roster);
        let tx = project(&input_names(), &target_rows, &roster);
        let y = source.target_column(&target).map_err(correction_err(&cfg.path("features.csv")))?;
        let model = two_stage_fit(&target, &roster, &sx, &y, &tx, &cfg.transfer)?;
        lines.push(format!("{target}: step {} of {}", model.best_step, cfg.transfer.steps));
        write_json_artifact(&model_path(&cfg, &section, &target), &prov, &model)?;
    }
    Ok(format!("train: section {} ({} source rows), {}", section.as_str(), source.len(), lines.join(", ")))
}

/// Applies the trained models to the section's before inputs.
pub fn predict(cfg: &RunConfig) -> Result<String> {
    let cfg = cfg.effective();
    let prov = Provenance::of(&cfg);
    let src = cfg.path("profiles.csv");
    let profiles = read_profiles_csv(open(&src, "profiles file")?).map_err(correction_err(&src))?;
    let d = load_features(&cfg)?;
    let section = target_section(&cfg, &d.sections())?;
    let rows = before_inputs(&profiles, &section);
    let full = input_names();
    let all_rows: Vec<Vec<f64>> = rows.iter().map(|(_, r)| r.clone()).collect();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for target in targets_of(&cfg, &d)? {
        let model: TransferModel = read_json_artifact(&model_path(&cfg, &section, &target), "model file (run `train` first)")?;
        let x = project(&full, &all_rows, &model.roster);
        columns.push((target, model.predict(&model.roster.clone(), &x)?));
    }
    let mut out = prov.csv_header();
    out.push_str("section,DOW,HOD,MOH");
    for (t, _) in &columns {
        let _ = write!(out, ",{t}");
    }
    out.push('\n');
    for (i, (key, _)) in rows.iter().enumerate() {
        let _ = write!(out, "{},{},{},{}", section.as_str(), key.dow(), key.hod(), key.moh());
        for (_, v) in &columns {
            let _ = write!(out, ",{}", v[i]);
        }
        out.push('\n');
    }
    let path = cfg.path("predictions.csv");
    write_file(&path, out.as_bytes())?;
    Ok(format!("predict: {} rows x {} targets for {} -> {}", rows.len(), columns.len(), section.as_str(), path.display()))
}

fn specs(cfg: &RunConfig) -> Vec<ModelSpec> {
    cfg.models
        .iter()
        .map(|m| match m {
            ModelKind::Transfer => ModelSpec::Transfer(cfg.transfer),
            ModelKind::SourceOnly => ModelSpec::source_only_like(&cfg.transfer),
            ModelKind::Knn => ModelSpec::Knn { k: cfg.knn_k },
        })
        .collect()
}

/// Leave-one-section-out scores for every target and model, averaged over `runs`.
pub fn evaluate(cfg: &RunConfig) -> Result<String> {
    let cfg = cfg.effective();
    let prov = Provenance::of(&cfg);
    let d = load_features(&cfg)?;
    let sel = selection(&cfg)?;
    let targets = targets_of(&cfg, &d)?;
    let mut reports = Vec::new();
    let mut first_run: Vec<FoldOutcome> = Vec::new();
    let mut all_folds: Vec<FoldOutcome> = Vec::new();
    for run in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(run as u64);
        let mut report = MetricReport::new(cfg.seed, prov.config_hash.clone());
        for target in &targets {
            let roster = roster_for(&sel, target, &d);
            let dt = d.select_inputs(&roster).map_err(correction_err(&cfg.path("features.csv")))?;
            for spec in specs(&cfg) {
                let folds = loso_cv(&dt, target, &spec, seed)?;
                log::info!("evaluate run {run} {target} {}: {} folds", spec.label(), folds.len());
                report.push_folds(&folds);
                if run == 0 {
                    first_run.extend(folds.iter().cloned());
                }
                all_folds.extend(folds);
            }
        }
        reports.push(report);
    }
    let report = MetricReport::average(&reports)?;
    let path = cfg.path("evaluation.json");
    write_file(&path, report.to_json()?.as_bytes())?;
    let mut preds = prov.csv_header();
    preds.push_str("target,model,section,row,actual,predicted\n");
    for f in &first_run {
        for (i, (a, p)) in f.actual.iter().zip(&f.predicted).enumerate() {
            let _ = writeln!(preds, "{},{},{},{i},{a},{p}", f.target, f.model, f.section.as_str());
        }
    }
    write_file(&cfg.path("fold_predictions.csv"), preds.as_bytes())?;
    write_file(&cfg.path("timings.csv"), format!("{}{}", prov.csv_header(), timings_csv(&all_folds)).as_bytes())?;
    let folds = report.sections().len();
    Ok(format!(
        "evaluate: {} targets x {} models x {folds} folds x {} runs -> {}",
        targets.len(),
        report.models.len(),
        cfg.runs,
        path.display()
    ))
}

/// Grid search per configured model and target.
pub fn grid(cfg: &RunConfig) -> Result<String> {
    let cfg = cfg.effective();
    let prov = Provenance::of(&cfg);
    let d = load_features(&cfg)?;
    let sel = selection(&cfg)?;
    let mut best = BTreeMap::new();
    let mut evaluated = 0;
    for &model in &cfg.grid_models {
        for target in targets_of(&cfg, &d)? {
            let roster = roster_for(&sel, &target, &d);
            let dt = d.select_inputs(&roster).map_err(correction_err(&cfg.path("features.csv")))?;
            let res = grid_search(&dt, &target, model, &cfg.grid, &cfg.transfer, cfg.seed, cfg.budget)?;
            evaluated += res.rows.len();
            let mut out = prov.csv_header();
            out.push_str("max_depth,n_estimators,n_neighbors,mean_mae,mean_rmse,best\n");
            let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
            for (i, r) in res.rows.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    opt(r.max_depth),
                    opt(r.n_estimators),
                    opt(r.n_neighbors),
                    r.mean_mae,
                    r.mean_rmse,
                    u8::from(i == res.best)
                );
            }
            let name = format!("{model:?}").to_lowercase();
            write_file(&cfg.out.join("grid").join(format!("{name}_{target}.csv")), out.as_bytes())?;
            best.insert(format!("{name}/{target}"), res.best_row().clone());
        }
    }
    let path = cfg.out.join("grid").join("best.json");
    write_json_artifact(&path, &prov, &best)?;
    Ok(format!("grid-search: {evaluated} combinations evaluated -> {}", path.display()))
}

/// Writes metric tables, plot data and the JSON summary from `evaluation.json`.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let src = cfg.path("evaluation.json");
    if !src.exists() {
        return Err(Error::MissingInput { what: "evaluation file (run `evaluate` first)", path: src });
    }
    let report = MetricReport::from_json(&read_text(&src)?)?;
    let dir = cfg.path("report");
    let files = emit_report(&report, &dir)?;
    Ok(format!("report: {} files -> {}", files.len(), dir.display()))
}

/// Every stage from raw data to report, each reading the previous stage's files.
pub fn pipeline(cfg: &RunConfig) -> Result<String> {
    let mut stages: Vec<fn(&RunConfig) -> Result<String>> = vec![ingest, correct, pair, ridge, train, predict, evaluate];
    if cfg.pipeline_grid_search {
        stages.push(grid);
    }
    stages.push(report);
    let mut last = String::new();
    for stage in stages {
        last = stage(cfg)?;
        log::info!("{last}");
    }
    Ok(format!("pipeline: done; {last}"))
}
