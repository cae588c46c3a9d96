//! Run configuration: one TOML file describes a scenario, a method and every
//! knob of the modules it drives. Unknown keys are rejected and validation
//! reports every problem at once.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::incremental::{EwcConfig, PrimeConfig, TrainConfig};
use crate::nn::{ModelSpec, Pooling};
use crate::synth::plan_from_sizes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Base,
    Lwf,
    Ewc,
    Prime,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::Lwf, Method::Ewc, Method::Prime];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Lwf => "lwf",
            Method::Ewc => "ewc",
            Method::Prime => "prime",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected base, lwf, ewc or prime)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Flows simulated from per-class profiles.
    Synthetic {
        classes: usize,
        similarity: f64,
        samples_per_class: usize,
        n_b: usize,
        n_p: usize,
        seed: u64,
        /// Per-class replacements of `similarity`.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        similarity_override: Vec<SimilarityOverride>,
    },
    /// A dataset file written by `gen` or `ingest`.
    Dataset { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityOverride {
    pub classes: Vec<usize>,
    pub similarity: f64,
}

/// Similarity of every class after applying the overrides.
pub fn class_similarities(classes: usize, similarity: f64, overrides: &[SimilarityOverride]) -> Vec<f64> {
    let mut out = vec![similarity; classes];
    for o in overrides {
        for &c in &o.classes {
            if let Some(slot) = out.get_mut(c) {
                *slot = o.similarity;
            }
        }
    }
    out
}

/// Stage plan given either as class counts (`[10, 2, 2]` takes classes in id
/// order) or as explicit class lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StagePlan {
    Sizes(Vec<usize>),
    Classes(Vec<Vec<usize>>),
}

impl StagePlan {
    pub fn resolve(&self) -> Vec<Vec<usize>> {
        match self {
            StagePlan::Sizes(s) => plan_from_sizes(s),
            StagePlan::Classes(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub source: DataSource,
    pub stages: StagePlan,
    /// Train / validation / test fractions per class.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    let (a, b, c) = crate::synth::DEFAULT_SPLIT;
    [a, b, c]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Attention dim 64, 2 heads, hidden [64, 32].
    #[default]
    Desk,
    /// Full-scale attention dim 912 and hidden [256, 64].
    Full,
}

/// Model knobs; anything left out comes from the chosen profile. The input
/// sizes always come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub profile: Profile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_token: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Pooling>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

impl ModelConfig {
    pub fn spec(&self, n_b: usize, n_p: usize) -> ModelSpec {
        let mut s = match self.profile {
            Profile::Desk => ModelSpec::desk(n_b, n_p),
            Profile::Full => ModelSpec::full(n_b, n_p),
        };
        if let Some(v) = self.payload_token {
            s.payload_token = v;
        }
        if let Some(v) = self.d_model {
            s.d_model = v;
        }
        if let Some(v) = self.heads {
            s.heads = v;
        }
        if let Some(v) = self.ff_dim {
            s.ff_dim = v;
        }
        if let Some(v) = self.pooling {
            s.pooling = v;
        }
        if let Some(v) = &self.hidden {
            s.hidden = v.clone();
        }
        if let Some(v) = self.dropout {
            s.dropout = v;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the run directory.
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Training of the first stage (backbone included).
    #[serde(default)]
    pub base_train: TrainConfig,
    /// Training of every later stage.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prime: PrimeConfig,
    #[serde(default)]
    pub ewc: EwcConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    /// Input sizes implied by the scenario, when known without reading data.
    pub fn declared_input(&self) -> Option<(usize, usize)> {
        match &self.scenario.source {
            DataSource::Synthetic { n_b, n_p, .. } => Some((*n_b, *n_p)),
            DataSource::Dataset { .. } => None,
        }
    }

    /// Every problem in the configuration; empty when it is valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.is_empty() || self.name.starts_with('.') || self.name.contains(['/', '\\']) {
            out.push(format!("name {:?} must be a plain directory name", self.name));
        }
        if self.seeds.is_empty() {
            out.push("seeds must list at least one seed".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            out.push("seeds must be distinct".into());
        }
        let sc = &self.scenario;
        let mut known_classes = None;
        if let DataSource::Synthetic {
            classes,
            similarity,
            samples_per_class,
            n_b,
            n_p,
            similarity_override,
            ..
        } = &sc.source
        {
            if *classes < 2 {
                out.push("scenario.source.classes must be at least 2".into());
            }
            if !(0.0..=1.0).contains(similarity) {
                out.push("scenario.source.similarity must lie in [0, 1]".into());
            }
            for o in similarity_override {
                if !(0.0..=1.0).contains(&o.similarity) {
                    out.push(format!("scenario.source.similarity_override: {} outside [0, 1]", o.similarity));
                }
                if let Some(c) = o.classes.iter().find(|&&c| c >= *classes) {
                    out.push(format!("scenario.source.similarity_override: class {c} does not exist"));
                }
            }
            if *samples_per_class == 0 {
                out.push("scenario.source.samples_per_class must be positive".into());
            }
            if *n_b == 0 || *n_p == 0 {
                out.push("scenario.source.n_b and n_p must be positive".into());
            }
            known_classes = Some(*classes);
        }
        let plan = sc.stages.resolve();
        if plan.len() < 2 {
            out.push(format!("scenario.stages needs at least 2 stages, got {}", plan.len()));
        }
        let mut seen = BTreeSet::new();
        for (i, stage) in plan.iter().enumerate() {
            if stage.is_empty() {
                out.push(format!("scenario.stages: stage {} has no classes", i + 1));
            }
            for &c in stage {
                if !seen.insert(c) {
                    out.push(format!("scenario.stages: class {c} appears in more than one stage"));
                }
                if known_classes.is_some_and(|k| c >= k) {
                    out.push(format!("scenario.stages: class {c} does not exist"));
                }
            }
        }
        let [a, b, c] = sc.split;
        if a <= 0.0 || b < 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            out.push(format!("scenario.split {:?} must be non-negative, sum to 1 and keep train and test non-empty", sc.split));
        }
        let (n_b, n_p) = self.declared_input().unwrap_or((ModelSpec::default().n_b, ModelSpec::default().n_p));
        let spec = self.model.spec(n_b, n_p);
        if let Err(e) = spec.validate() {
            out.push(format!("model: {e}"));
        }
        if let crate::plasticity::ProbeLayer::Pinned { layer } = self.prime.plasticity.probe {
            if layer >= spec.hidden.len() {
                out.push(format!("prime.plasticity.probe: layer {layer} does not exist in a {}-layer hidden stack", spec.hidden.len()));
            }
        }
        out.extend(self.base_train.problems("base_train"));
        out.extend(self.train.problems("train"));
        out.extend(self.prime.lwf.problems("prime.lwf"));
        out.extend(self.prime.plasticity.problems().into_iter().map(|p| format!("prime.{p}")));
        out.extend(self.prime.expansion.problems().into_iter().map(|p| format!("prime.{p}")));
        out.extend(self.ewc.problems("ewc"));
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Invalid(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "smoke"
method = "prime"
seeds = [0, 1]

[scenario]
stages = [4, 3]

[scenario.source]
kind = "synthetic"
classes = 7
similarity = 0.3
samples_per_class = 40
n_b = 32
n_p = 8
seed = 1
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.method, Method::Prime);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.scenario.stages.resolve(), vec![vec![0, 1, 2, 3], vec![4, 5, 6]]);
        cfg.validate().unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seeds = [0, 1]", "seeds = [0, 1]\nsedes = 3");
        assert!(matches!(RunConfig::from_toml(&text), Err(HarnessError::Parse(_))));
        let text = format!("{MINIMAL}\n[train]\nepoch = 3\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(HarnessError::Parse(_))));
    }

    #[test]
    fn validation_lists_every_problem() {
        let text = MINIMAL
            .replace("stages = [4, 3]", "stages = [[0, 1], [1, 9]]")
            .replace("seeds = [0, 1]", "seeds = []")
            .replace("similarity = 0.3", "similarity = 1.5");
        let problems = RunConfig::from_toml(&text).unwrap().problems();
        assert!(problems.len() >= 4, "{problems:?}");
        assert!(problems.iter().any(|p| p.contains("seeds")));
        assert!(problems.iter().any(|p| p.contains("class 1 appears")));
        assert!(problems.iter().any(|p| p.contains("class 9 does not exist")));
        assert!(problems.iter().any(|p| p.contains("similarity")));
    }
}
