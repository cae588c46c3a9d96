//! Labeling external data through a manifest.
//!
//! ```toml
//! n_b = 784
//! n_p = 32
//! classes = ["chat", "streaming"]     # optional fixed class order
//!
//! [[capture]]                          # every flow of one capture file
//! file = "hangouts_chat1.pcap"
//! label = "chat"
//!
//! [[rule]]                             # flows matching all given fields
//! label = "streaming"
//! port = 1935
//! protocol = "tcp"
//!
//! [group]                              # dataset input: class name -> label
//! "vpn_skype_chat" = "chat"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::net::IpAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::ingest::{assemble_flows, extract_features, parse_pcap, Dataset, FlowRecord, Normalizers, Protocol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureEntry {
    pub file: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub label: String,
    /// Matches either endpoint's port.
    #[serde(default)]
    pub port: Option<u16>,
    /// Matches either endpoint's address.
    #[serde(default)]
    pub address: Option<IpAddr>,
    #[serde(default)]
    pub protocol: Option<Protocol>,
}

impl LabelRule {
    fn matches(&self, flow: &FlowRecord) -> bool {
        let k = &flow.key;
        self.port.is_none_or(|p| k.low.port == p || k.high.port == p)
            && self.address.is_none_or(|a| k.low.addr == a || k.high.addr == a)
            && self.protocol.is_none_or(|p| k.protocol == p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_n_b")]
    pub n_b: usize,
    #[serde(default = "default_n_p")]
    pub n_p: usize,
    #[serde(default = "default_timeout")]
    pub idle_timeout: f64,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub capture: Vec<CaptureEntry>,
    #[serde(default)]
    pub rule: Vec<LabelRule>,
    #[serde(default)]
    pub group: BTreeMap<String, String>,
}

fn default_n_b() -> usize {
    784
}

fn default_n_p() -> usize {
    32
}

fn default_timeout() -> f64 {
    crate::ingest::DEFAULT_IDLE_TIMEOUT
}

impl Default for Manifest {
    fn default() -> Self {
        toml::from_str("").expect("empty manifest parses")
    }
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let m: Manifest = toml::from_str(text).map_err(|e| HarnessError::Manifest(e.to_string()))?;
        let mut problems = Vec::new();
        if m.n_b == 0 || m.n_p == 0 {
            problems.push("n_b and n_p must be positive".to_string());
        }
        if !(m.idle_timeout.is_finite() && m.idle_timeout > 0.0) {
            problems.push("idle_timeout must be positive".to_string());
        }
        if m.classes.iter().collect::<BTreeSet<_>>().len() != m.classes.len() {
            problems.push("classes must be distinct".to_string());
        }
        if m.rule.iter().any(|r| r.port.is_none() && r.address.is_none() && r.protocol.is_none()) {
            problems.push("every rule needs at least one of port, address, protocol".to_string());
        }
        if problems.is_empty() {
            Ok(m)
        } else {
            Err(HarnessError::Manifest(problems.join("; ")))
        }
    }

    fn assigns_nothing(&self) -> bool {
        self.capture.is_empty() && self.rule.is_empty() && self.group.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub files: usize,
    pub flows: usize,
    pub labeled: usize,
    /// Flows (or dataset rows) no manifest entry labeled; they are excluded.
    pub unlabeled: usize,
    pub per_class: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

/// Labels the flows of every capture in a directory (or the rows of a
/// dataset file) and returns them as a dataset.
pub fn ingest_external(input: &Path, manifest: &Manifest) -> Result<(Dataset, IngestReport), HarnessError> {
    let mut report = IngestReport::default();
    if manifest.assigns_nothing() {
        report.warnings.push("manifest assigns no labels; every flow is excluded".into());
    }
    let labeled: Vec<(String, Vec<f64>)>;
    let (n_b, n_p, norm);
    if input.is_dir() {
        (n_b, n_p, norm) = (manifest.n_b, manifest.n_p, Normalizers::default());
        labeled = label_captures(input, manifest, &mut report)?;
    } else {
        let ds = Dataset::load(input)?;
        (n_b, n_p, norm) = (ds.n_b, ds.n_p, ds.normalizers);
        report.files = 1;
        let mut rows = Vec::new();
        for i in 0..ds.len() {
            report.flows += 1;
            let name = ds.label(i).map(|l| ds.class_names[l].as_str());
            match name.and_then(|n| manifest.group.get(n)) {
                Some(label) => rows.push((label.clone(), ds.row(i).to_vec())),
                None => report.unlabeled += 1,
            }
        }
        labeled = rows;
    }
    let mut classes = manifest.classes.clone();
    let extra: BTreeSet<&String> = labeled.iter().map(|(l, _)| l).filter(|l| !classes.contains(l)).collect();
    classes.extend(extra.into_iter().cloned());
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut ds = Dataset::new(n_b, n_p, norm, classes.clone());
    for (label, row) in &labeled {
        ds.push_row(Some(index[label.as_str()]), row)?;
        *report.per_class.entry(label.clone()).or_default() += 1;
    }
    report.labeled = labeled.len();
    if ds.is_empty() && !manifest.assigns_nothing() {
        report.warnings.push("no flow matched the manifest".into());
    }
    Ok((ds, report))
}

fn label_captures(dir: &Path, manifest: &Manifest, report: &mut IngestReport) -> Result<Vec<(String, Vec<f64>)>, HarnessError> {
    let io = |e| HarnessError::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pcap" || x == "cap"))
        .collect();
    files.sort();
    let known: BTreeSet<&str> = files.iter().filter_map(|p| p.file_name()?.to_str()).collect();
    for c in &manifest.capture {
        if !known.contains(c.file.as_str()) {
            report.warnings.push(format!("capture {} listed in the manifest was not found", c.file));
        }
    }
    let norm = Normalizers::default();
    let mut out = Vec::new();
    for path in files {
        report.files += 1;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let file = File::open(&path).map_err(|e| HarnessError::Io {
            path: path.clone(),
            source: e,
        })?;
        let packets = parse_pcap(BufReader::new(file))?.collect::<Result<Vec<_>, _>>()?;
        let assembly = assemble_flows(packets, manifest.idle_timeout, manifest.n_b);
        let capture_labels: Vec<&str> = manifest.capture.iter().filter(|c| c.file == name).map(|c| c.label.as_str()).collect();
        for flow in &assembly.flows {
            report.flows += 1;
            let mut labels: BTreeSet<&str> = capture_labels.iter().copied().collect();
            labels.extend(manifest.rule.iter().filter(|r| r.matches(flow)).map(|r| r.label.as_str()));
            match labels.len() {
                0 => report.unlabeled += 1,
                1 => {
                    let label = labels.into_iter().next().expect("one label").to_string();
                    let fv = extract_features(flow, manifest.n_b, manifest.n_p, &norm);
                    out.push((label, fv.to_row()));
                }
                _ => {
                    return Err(HarnessError::ConflictingLabels {
                        flow: format!("{name}: {}", flow.key),
                        labels: labels.into_iter().map(String::from).collect(),
                    })
                }
            }
        }
    }
    Ok(out)
}
