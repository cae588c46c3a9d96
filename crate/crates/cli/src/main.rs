//! `prime`: data generation, ingestion, experiment runs and reports.
//!
//! Progress is logged to stderr as one JSON object per line; results go to
//! files and a short human-readable summary to stdout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use prime_core::harness::{self, Manifest, Method, RunConfig};
use prime_core::ingest::Dataset;
use prime_core::nn::checkpoint;
use prime_core::synth::{make_profiles, sample_dataset};

#[derive(Parser)]
#[command(name = "prime", version, about = "Plasticity-aware incremental learning for encrypted traffic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Gen {
        #[arg(long, default_value_t = 14)]
        classes: usize,
        /// 0 draws classes independently, 1 makes them identical.
        #[arg(long, default_value_t = 0.3)]
        similarity: f64,
        #[arg(long, default_value_t = 300)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 784)]
        n_b: usize,
        #[arg(long, default_value_t = 32)]
        n_p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Label flows from a pcap directory (or relabel a dataset file).
    Ingest {
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a scenario from a TOML config.
    Run {
        config: PathBuf,
        /// Overrides any config path, e.g. `--set train.epochs=5`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        name: Option<String>,
        /// Output root; defaults to $PRIME_OUT or ./runs.
        #[arg(long, env = "PRIME_OUT")]
        out_root: Option<PathBuf>,
        /// Only validate the configuration.
        #[arg(long)]
        check: bool,
    },
    /// Compare run directories of the same scenario.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump a checkpoint, dataset, stage log or run directory as JSON.
    Inspect { path: PathBuf },
}

fn log(event: serde_json::Value) {
    eprintln!("{event}");
}

/// Writes to stdout; a reader that closed the pipe early (`| head`) is not an
/// error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        log(json!({"event": "error", "message": format!("{e:#}")}));
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            classes,
            similarity,
            samples_per_class,
            n_b,
            n_p,
            seed,
            out,
            csv,
        } => {
            let profiles = make_profiles(classes, similarity, seed)?;
            let ds = sample_dataset(&profiles, samples_per_class, n_b, n_p, seed)?;
            ds.save(&out)?;
            if let Some(path) = csv {
                ds.write_csv(fs::File::create(&path).with_context(|| path.display().to_string())?)?;
            }
            log(json!({"event": "generated", "path": out, "rows": ds.len(), "classes": ds.num_classes()}));
            Ok(())
        }
        Command::Ingest { input, manifest, out, csv } => {
            let text = fs::read_to_string(&manifest).with_context(|| manifest.display().to_string())?;
            let manifest = Manifest::from_toml(&text)?;
            let (ds, report) = harness::ingest_external(&input, &manifest)?;
            for w in &report.warnings {
                log(json!({"event": "warning", "message": w}));
            }
            ds.save(&out)?;
            if let Some(path) = csv {
                ds.write_csv(fs::File::create(&path).with_context(|| path.display().to_string())?)?;
            }
            log(json!({"event": "ingested", "path": out, "report": report}));
            emit(&format!("{} flows, {} labeled, {} unlabeled (excluded)\n", report.flows, report.labeled, report.unlabeled))
        }
        Command::Run {
            config,
            overrides,
            method,
            seeds,
            name,
            out_root,
            check,
        } => {
            let cfg = load_config(&config, &overrides, method, seeds, name)?;
            if let Err(harness::HarnessError::Invalid(problems)) = cfg.validate() {
                for p in &problems {
                    log(json!({"event": "config_problem", "message": p}));
                }
                bail!("{} configuration problem(s)", problems.len());
            }
            if check {
                return emit("configuration is valid\n");
            }
            let root = out_root.unwrap_or_else(harness::default_output_root);
            log(json!({"event": "run_started", "name": cfg.name, "method": cfg.method, "seeds": cfg.seeds}));
            let dir = harness::run_scenario(&cfg, &root)?;
            let (_, summary) = harness::load_run(&dir)?;
            log(json!({"event": "run_finished", "dir": dir, "aggregate": summary.aggregate}));
            let a = &summary.aggregate;
            emit(&format!(
                "{}: AA {}  BWT {}  FWT {}  FA {}  expansions {}\n",
                dir.display(),
                a.aa,
                a.bwt,
                a.fwt,
                a.fa,
                summary.expansions_total
            ))
        }
        Command::Compare { runs, csv } => {
            let cmp = harness::compare(&runs)?;
            emit(&cmp.to_table())?;
            if let Some(path) = csv {
                fs::write(&path, cmp.to_csv()).with_context(|| path.display().to_string())?;
            }
            Ok(())
        }
        Command::Inspect { path } => {
            emit(&format!("{}\n", serde_json::to_string_pretty(&inspect(&path)?)?))
        }
    }
}

fn load_config(path: &Path, overrides: &[String], method: Option<Method>, seeds: Option<Vec<u64>>, name: Option<String>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut value: toml::Value = toml::from_str(&text).with_context(|| path.display().to_string())?;
    for o in overrides {
        let (key, raw) = o.split_once('=').with_context(|| format!("override {o:?} is not PATH=VALUE"))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map(|mut t| t.remove("v").expect("key v present"))
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)?;
    }
    let mut cfg = RunConfig::from_toml(&toml::to_string(&value)?)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(n) = name {
        cfg.name = n;
    }
    Ok(cfg)
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty override path {key:?}"))?;
    let mut node = root;
    for p in parts {
        let table = node.as_table_mut().with_context(|| format!("{key}: {p} is not a table"))?;
        node = table.entry(p).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .with_context(|| format!("{key}: parent is not a table"))?
        .insert(last.to_string(), value);
    Ok(())
}

fn inspect(path: &Path) -> Result<serde_json::Value> {
    if path.is_dir() {
        let (manifest, summary) = harness::load_run(path)?;
        return Ok(json!({"run": manifest, "summary": summary}));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    match ext {
        "ckpt" => {
            let (model, _) = checkpoint::load(path)?;
            let mut partitions: BTreeMap<String, (usize, bool)> = BTreeMap::new();
            for (_, b) in model.params().iter() {
                let e = partitions.entry(b.partition.label()).or_insert((0, true));
                e.0 += b.value.len();
                e.1 &= b.frozen;
            }
            let heads: Vec<_> = model
                .heads()
                .iter()
                .map(|h| json!({"task": h.task, "classes": h.classes, "reads": h.in_width}))
                .collect();
            Ok(json!({
                "spec": model.spec(),
                "hidden_widths": model.hidden_widths(),
                "generation": model.generation(),
                "parameters": model.param_count(),
                "partitions": partitions.into_iter().map(|(k, (n, frozen))| json!({"partition": k, "parameters": n, "frozen": frozen})).collect::<Vec<_>>(),
                "heads": heads,
            }))
        }
        "jsonl" => {
            let text = fs::read_to_string(path)?;
            let lines: Vec<serde_json::Value> = text.lines().filter(|l| !l.is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
            Ok(serde_json::Value::Array(lines))
        }
        _ => {
            let ds = Dataset::load(path).with_context(|| format!("{} is not a checkpoint, stage log, run directory or dataset", path.display()))?;
            let mut counts = vec![0usize; ds.num_classes()];
            let mut unlabeled = 0;
            for l in ds.labels() {
                match l {
                    Some(c) => counts[*c] += 1,
                    None => unlabeled += 1,
                }
            }
            Ok(json!({
                "rows": ds.len(),
                "n_b": ds.n_b,
                "n_p": ds.n_p,
                "normalizers": ds.normalizers,
                "classes": ds.class_names.iter().zip(&counts).map(|(n, c)| json!({"name": n, "rows": c})).collect::<Vec<_>>(),
                "unlabeled": unlabeled,
            }))
        }
    }
}
