//! Experiment runner: scenario configs in, run directories and comparison
//! tables out.
//!
//! A run directory looks like
//!
//! ```text
//! <name>/
//!   config.toml        the full configuration, defaults filled in
//!   run.json           fingerprint, format versions, resolved model spec
//!   aggregate.json     mean ± half-range per metric, expansion and parameter totals
//!   aggregate.csv
//!   seed-<s>/
//!     summary.json     metrics, parameter counts, expansions
//!     matrix.csv       every recorded accuracy cell
//!     polar.csv        per-stage accuracy rings
//!     stages.jsonl     one stage report per line
//!     model.ckpt       final model
//! ```
//!
//! Directories are assembled under a temporary name and renamed into place
//! once every sub-run has finished, so a failed run leaves nothing behind.

mod config;
mod manifest;
mod run;

pub use config::{class_similarities, DataSource, Method, ModelConfig, Profile, RunConfig, ScenarioConfig, SimilarityOverride, StagePlan};
pub use manifest::{ingest_external, CaptureEntry, IngestReport, LabelRule, Manifest};
pub use run::{model_spec, resolve_dataset, run_methods, SeedRun, StageRecord};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::incremental::IncrementalError;
use crate::ingest::IngestError;
use crate::metrics::{aggregate, Aggregate, Metrics, MetricsError};
use crate::nn::{ModelSpec, NnError};
use crate::synth::SynthError;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "PRIME_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Parse(String),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("output directory {0} already exists")]
    Exists(PathBuf),
    #[error("{0}: stored fingerprint does not match its configuration")]
    Tampered(PathBuf),
    #[error("runs cover different scenarios: {first} vs {other}")]
    ScenarioMismatch { first: PathBuf, other: PathBuf },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("flow {flow} matches conflicting labels {labels:?}")]
    ConflictingLabels { flow: String, labels: Vec<String> },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Incremental(#[from] IncrementalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_string(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("run artifacts serialize to JSON")
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    serde_json::from_str(&read_string(path)?).map_err(|e| HarnessError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// SHA-256 over the scenario and seed list: two runs with equal fingerprints
/// saw the same data, splits and seeds.
pub fn fingerprint(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(&(&cfg.scenario, &cfg.seeds)).expect("scenario serializes");
    Sha256::digest(canonical.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub fingerprint: String,
    pub crate_version: String,
    pub dataset_version: u32,
    pub checkpoint_version: u32,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics: Metrics,
    pub params_base: usize,
    pub params_final: usize,
    pub expansions: usize,
}

impl From<&SeedRun> for SeedSummary {
    fn from(r: &SeedRun) -> Self {
        Self {
            seed: r.seed,
            metrics: r.metrics,
            params_base: r.params_base,
            params_final: r.params_final,
            expansions: r.expansions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub method: Method,
    pub aggregate: Aggregate,
    pub expansions_total: usize,
    pub expansions_max: usize,
    pub params_base: usize,
    pub params_final_max: usize,
}

impl MethodSummary {
    pub fn from_seeds(name: &str, method: Method, seeds: &[SeedSummary]) -> Result<Self, HarnessError> {
        let metrics: Vec<Metrics> = seeds.iter().map(|s| s.metrics).collect();
        Ok(Self {
            name: name.to_string(),
            method,
            aggregate: aggregate(&metrics)?,
            expansions_total: seeds.iter().map(|s| s.expansions).sum(),
            expansions_max: seeds.iter().map(|s| s.expansions).max().unwrap_or(0),
            params_base: seeds.iter().map(|s| s.params_base).max().unwrap_or(0),
            params_final_max: seeds.iter().map(|s| s.params_final).max().unwrap_or(0),
        })
    }

    pub fn csv_header() -> &'static str {
        "name,method,runs,aa_mean,aa_half_range,bwt_mean,bwt_half_range,fwt_mean,fwt_half_range,fa_mean,fa_half_range,expansions_total,expansions_max,params_base,params_final_max"
    }

    pub fn csv_row(&self) -> String {
        let a = &self.aggregate;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.method,
            a.runs,
            a.aa.mean,
            a.aa.half_range,
            a.bwt.mean,
            a.bwt.half_range,
            a.fwt.mean,
            a.fwt.half_range,
            a.fa.mean,
            a.fa.half_range,
            self.expansions_total,
            self.expansions_max,
            self.params_base,
            self.params_final_max
        )
    }
}

/// Validates `cfg`, runs every seed and writes the run directory under
/// `out_root`. Nothing is left on disk unless every sub-run succeeds.
pub fn run_scenario(cfg: &RunConfig, out_root: &Path) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    let final_dir = out_root.join(&cfg.name);
    if final_dir.exists() {
        return Err(HarnessError::Exists(final_dir));
    }
    let data = resolve_dataset(cfg)?;
    let runs = run_methods(cfg, &data, &[cfg.method])?.remove(0);
    fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    let tmp = out_root.join(format!(".{}.partial-{}", cfg.name, std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    let written = write_run(&tmp, cfg, &model_spec(cfg, &data), &runs);
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, &final_dir).map_err(io_err(&final_dir))?;
    Ok(final_dir)
}

fn write_run(dir: &Path, cfg: &RunConfig, spec: &ModelSpec, runs: &[SeedRun]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
    let manifest = RunManifest {
        name: cfg.name.clone(),
        method: cfg.method,
        seeds: cfg.seeds.clone(),
        fingerprint: fingerprint(cfg),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_version: crate::ingest::dataset::DATASET_VERSION,
        checkpoint_version: crate::nn::checkpoint::CHECKPOINT_VERSION,
        model: spec.clone(),
    };
    write_file(&dir.join("run.json"), to_json(&manifest))?;
    let mut summaries = Vec::new();
    for run in runs {
        let sub = dir.join(format!("seed-{}", run.seed));
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let summary = SeedSummary::from(run);
        write_file(&sub.join("summary.json"), to_json(&summary))?;
        write_file(&sub.join("matrix.csv"), run.matrix.to_csv())?;
        write_file(&sub.join("polar.csv"), run.matrix.polar_csv())?;
        let mut lines = String::new();
        for s in &run.stages {
            lines.push_str(&serde_json::to_string(s).expect("stage records serialize"));
            lines.push('\n');
        }
        write_file(&sub.join("stages.jsonl"), lines)?;
        crate::nn::checkpoint::save(&sub.join("model.ckpt"), &run.model, None)?;
        summaries.push(summary);
    }
    let agg = MethodSummary::from_seeds(&cfg.name, cfg.method, &summaries)?;
    write_file(&dir.join("aggregate.json"), to_json(&agg))?;
    write_file(&dir.join("aggregate.csv"), format!("{}\n{}\n", MethodSummary::csv_header(), agg.csv_row()))?;
    Ok(())
}

/// Reads a run directory back, checking its fingerprint and recomputing the
/// aggregate from the per-seed summaries.
pub fn load_run(dir: &Path) -> Result<(RunManifest, MethodSummary), HarnessError> {
    let manifest: RunManifest = from_json(&dir.join("run.json"))?;
    let cfg = RunConfig::from_toml(&read_string(&dir.join("config.toml"))?)?;
    if fingerprint(&cfg) != manifest.fingerprint || cfg.seeds != manifest.seeds || cfg.method != manifest.method {
        return Err(HarnessError::Tampered(dir.to_path_buf()));
    }
    let seeds: Vec<SeedSummary> = manifest
        .seeds
        .iter()
        .map(|s| from_json(&dir.join(format!("seed-{s}")).join("summary.json")))
        .collect::<Result<_, _>>()?;
    let summary = MethodSummary::from_seeds(&manifest.name, manifest.method, &seeds)?;
    Ok((manifest, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fingerprint: String,
    pub rows: Vec<MethodSummary>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", MethodSummary::csv_header());
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = ["run", "method", "AA", "BWT", "FWT", "FA", "expansions", "params base -> final"];
        let rows: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                let a = &r.aggregate;
                [
                    r.name.clone(),
                    r.method.to_string(),
                    a.aa.to_string(),
                    a.bwt.to_string(),
                    a.fwt.to_string(),
                    a.fa.to_string(),
                    r.expansions_total.to_string(),
                    format!("{} -> {}", r.params_base, r.params_final_max),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: Vec<&str>| -> String {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(header.to_vec());
        out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
        for row in &rows {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
        }
        out
    }
}

/// One row per run directory. All directories must share a scenario.
pub fn compare(dirs: &[PathBuf]) -> Result<Comparison, HarnessError> {
    let mut rows = Vec::new();
    let mut first: Option<(PathBuf, String)> = None;
    for dir in dirs {
        let (manifest, summary) = load_run(dir)?;
        match &first {
            None => first = Some((dir.clone(), manifest.fingerprint.clone())),
            Some((path, fp)) if *fp != manifest.fingerprint => {
                return Err(HarnessError::ScenarioMismatch {
                    first: path.clone(),
                    other: dir.clone(),
                })
            }
            Some(_) => {}
        }
        rows.push(summary);
    }
    let fingerprint = first.map(|(_, fp)| fp).ok_or_else(|| HarnessError::Parse("no run directories given".into()))?;
    Ok(Comparison { fingerprint, rows })
}

/// Default output root: `$PRIME_OUT`, or `runs` in the working directory.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
