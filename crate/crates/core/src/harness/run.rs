//! The experiment protocol: shared base stage, then one method per branch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{class_similarities, DataSource, Method, RunConfig};
use super::HarnessError;
use crate::incremental::{
    accuracy, begin_task, derive_seed, ewc_train_task, finetune, lwf_train_task, prime_controller, train_base, Batch,
    CyclePath, EpochLog, ExpansionEvent, Inputs, PlasticityCheck, StageData,
};
use crate::ingest::Dataset;
use crate::metrics::{AccuracyMatrix, Metrics};
use crate::nn::{ModelSpec, PartitionedModel};
use crate::synth::{make_profiles_with, sample_dataset, stage_stream, Stage};

const MODEL_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub classes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<CyclePath>,
    pub epochs: Vec<EpochLog>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub expanded_epochs: Vec<EpochLog>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub checks: Vec<PlasticityCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansion: Option<ExpansionEvent>,
    /// Accuracy on every task seen so far after this stage (row of R).
    pub accuracies: Vec<f64>,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub method: Method,
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    pub stages: Vec<StageRecord>,
    pub params_base: usize,
    pub params_final: usize,
    pub expansions: usize,
    pub model: PartitionedModel,
}

/// Builds (or loads) the dataset a scenario draws from.
pub fn resolve_dataset(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    match &cfg.scenario.source {
        DataSource::Synthetic {
            classes,
            similarity,
            samples_per_class,
            n_b,
            n_p,
            seed,
            similarity_override,
        } => {
            let profiles = make_profiles_with(&class_similarities(*classes, *similarity, similarity_override), *seed)?;
            Ok(sample_dataset(&profiles, *samples_per_class, *n_b, *n_p, derive_seed(*seed, &[1]))?)
        }
        DataSource::Dataset { path } => Ok(Dataset::load(path)?),
    }
}

pub fn model_spec(cfg: &RunConfig, data: &Dataset) -> ModelSpec {
    cfg.model.spec(data.n_b, data.n_p)
}

fn stage_data(ds: &Dataset, stage: &Stage) -> StageData {
    let batch = |s: &crate::synth::Split| Batch {
        inputs: Inputs::Raw(ds.tensor(&s.indices)),
        labels: s.labels.clone(),
    };
    StageData {
        classes: stage.classes.len(),
        train: batch(&stage.train),
        val: batch(&stage.val),
        test: batch(&stage.test),
    }
}

/// Runs every method in `methods` for every seed of `cfg`. The first stage is
/// trained once per seed and shared by all methods. Seeds run in parallel.
pub fn run_methods(cfg: &RunConfig, data: &Dataset, methods: &[Method]) -> Result<Vec<Vec<SeedRun>>, HarnessError> {
    cfg.validate()?;
    let spec = model_spec(cfg, data);
    if let Err(e) = spec.validate() {
        return Err(HarnessError::Invalid(vec![format!("model: {e}")]));
    }
    let per_seed: Vec<Vec<SeedRun>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, data, &spec, methods, seed))
        .collect::<Result<_, _>>()?;
    // transpose to method-major
    Ok((0..methods.len())
        .map(|m| per_seed.iter().map(|runs| runs[m].clone()).collect())
        .collect())
}

fn run_seed(cfg: &RunConfig, ds: &Dataset, spec: &ModelSpec, methods: &[Method], seed: u64) -> Result<Vec<SeedRun>, HarnessError> {
    let [a, b, c] = cfg.scenario.split;
    let stream = stage_stream(ds, &cfg.scenario.stages.resolve(), (a, b, c), seed)?;
    let raw: Vec<StageData> = stream.stages.iter().map(|s| stage_data(ds, s)).collect();
    let tasks = raw.len();
    let head_seed = |stage: usize| derive_seed(seed, &[HEAD_STREAM, stage as u64]);
    let train_seed = |stage: usize| derive_seed(seed, &[TRAIN_STREAM, stage as u64]);

    let init = PartitionedModel::new(spec.clone(), derive_seed(seed, &[MODEL_STREAM]))?;
    let mut matrix = AccuracyMatrix::new(tasks);
    for (j, stage) in raw.iter().enumerate() {
        let mut probe = init.clone();
        let h = begin_task(&mut probe, stage.classes, head_seed(j + 1))?;
        matrix.record(0, j + 1, accuracy(&probe, h, &stage.test)?)?;
    }

    let mut base = init;
    let base_log = train_base(&mut base, &raw[0], &cfg.base_train, head_seed(1), train_seed(1))?;
    base.set_backbone_frozen(true);
    let stages: Vec<StageData> = raw.iter().map(|s| s.featurize(&base)).collect::<Result<_, _>>()?;
    let base_acc = accuracy(&base, 0, &stages[0].test)?;
    matrix.record(1, 1, base_acc)?;
    let params_base = base.param_count();
    let base_record = StageRecord {
        stage: 1,
        classes: stream.stages[0].classes.clone(),
        path: None,
        epochs: base_log.logs,
        expanded_epochs: Vec::new(),
        checks: Vec::new(),
        expansion: None,
        accuracies: vec![base_acc],
        params: params_base,
    };

    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut model = base.clone();
        let mut matrix = matrix.clone();
        let mut records = vec![base_record.clone()];
        let mut expansions = 0;
        for i in 2..=tasks {
            let data = &stages[i - 1];
            let mut probe = model.clone();
            let h = begin_task(&mut probe, data.classes, head_seed(i))?;
            matrix.record(i - 1, i, accuracy(&probe, h, &data.test)?)?;
            let mut record = StageRecord {
                stage: i,
                classes: stream.stages[i - 1].classes.clone(),
                path: None,
                epochs: Vec::new(),
                expanded_epochs: Vec::new(),
                checks: Vec::new(),
                expansion: None,
                accuracies: Vec::new(),
                params: 0,
            };
            match method {
                Method::Base => record.epochs = finetune(&mut model, data, &cfg.train, head_seed(i), train_seed(i))?.logs,
                Method::Lwf => {
                    record.epochs = lwf_train_task(&mut model, data, &cfg.prime.lwf, &cfg.train, head_seed(i), train_seed(i))?.logs
                }
                Method::Ewc => record.epochs = ewc_train_task(&mut model, data, &cfg.ewc, &cfg.train, head_seed(i), train_seed(i))?.logs,
                Method::Prime => {
                    let report = prime_controller(&mut model, data, &cfg.prime, &cfg.train, i, head_seed(i), train_seed(i))?;
                    expansions += usize::from(report.expansion.is_some());
                    record.path = Some(report.path);
                    record.epochs = report.lwf_epochs;
                    record.expanded_epochs = report.expanded_epochs;
                    record.checks = report.checks;
                    record.expansion = report.expansion;
                }
            }
            for j in 1..=i {
                let acc = accuracy(&model, j - 1, &stages[j - 1].test)?;
                matrix.record(i, j, acc)?;
                record.accuracies.push(acc);
            }
            record.params = model.param_count();
            records.push(record);
        }
        out.push(SeedRun {
            seed,
            method,
            metrics: matrix.compute()?,
            matrix,
            stages: records,
            params_base,
            params_final: model.param_count(),
            expansions,
            model,
        });
    }
    Ok(out)
}
