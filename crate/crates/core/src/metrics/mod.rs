//! Continual-learning metrics over the accuracy matrix.
//!
//! `R[i][j]` is the accuracy on task `j` (1-based) after training stage `i`;
//! row 0 holds the accuracies of the randomly initialised model. Besides the
//! lower triangle, the protocol records the cells `R[j-1][j]` (task `j`
//! evaluated with a fresh head just before stage `j` trains), which forward
//! transfer needs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cell R[{stage},{task}] is outside a matrix with {tasks} tasks")]
    OutOfRange { stage: usize, task: usize, tasks: usize },
    #[error("cell R[{stage},{task}] is not part of the protocol (task evaluated before its stage)")]
    NotRecordable { stage: usize, task: usize },
    #[error("cell R[{stage},{task}] was already recorded")]
    Duplicate { stage: usize, task: usize },
    #[error("accuracy {0} outside [0, 1]")]
    Accuracy(f64),
    #[error("missing cell R[{stage},{task}]")]
    Missing { stage: usize, task: usize },
    #[error("backward and forward transfer need at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("cannot aggregate zero runs")]
    NoRuns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    /// `(tasks + 1) x tasks`, `None` until recorded.
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            cells: vec![vec![None; tasks]; tasks + 1],
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Writes `R[stage][task]` once. `task` is 1-based.
    pub fn record(&mut self, stage: usize, task: usize, accuracy: f64) -> Result<(), MetricsError> {
        if stage > self.tasks || task == 0 || task > self.tasks {
            return Err(MetricsError::OutOfRange { stage, task, tasks: self.tasks });
        }
        if stage != 0 && task > stage + 1 {
            return Err(MetricsError::NotRecordable { stage, task });
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(MetricsError::Accuracy(accuracy));
        }
        let cell = &mut self.cells[stage][task - 1];
        if cell.is_some() {
            return Err(MetricsError::Duplicate { stage, task });
        }
        *cell = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        if task == 0 {
            return None;
        }
        self.cells.get(stage)?.get(task - 1).copied().flatten()
    }

    fn need(&self, stage: usize, task: usize) -> Result<f64, MetricsError> {
        self.get(stage, task).ok_or(MetricsError::Missing { stage, task })
    }

    pub fn recorded(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    pub fn compute(&self) -> Result<Metrics, MetricsError> {
        let t = self.tasks;
        if t < 2 {
            return Err(MetricsError::TooFewTasks(t));
        }
        let mut diag = 0.0;
        for i in 1..=t {
            diag += self.need(i, i)?;
        }
        let mut bwt = 0.0;
        for i in 1..t {
            bwt += self.need(t, i)? - self.need(i, i)?;
        }
        let mut fwt = 0.0;
        for i in 2..=t {
            fwt += self.need(i - 1, i)? - self.need(0, i)?;
        }
        let mut fa = 0.0;
        for j in 1..=t {
            fa += self.need(t, j)?;
        }
        let tf = t as f64;
        Ok(Metrics {
            aa: diag / tf,
            bwt: bwt / (tf - 1.0),
            fwt: fwt / (tf - 1.0),
            fa: fa / tf,
        })
    }

    /// `stage,task,accuracy` for every recorded cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,task,accuracy\n");
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if let Some(a) = c {
                    let _ = writeln!(out, "{i},{},{a}", j + 1);
                }
            }
        }
        out
    }

    /// Rings for a polar chart: one ring per trained stage, one sector per
    /// task learned so far.
    pub fn polar_csv(&self) -> String {
        let mut out = String::from("ring,sector,accuracy\n");
        for i in 1..=self.tasks {
            for j in 1..=i {
                if let Some(a) = self.get(i, j) {
                    let _ = writeln!(out, "{i},{j},{a}");
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub aa: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub fa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub half_range: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::NoRuns);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            mean,
            half_range: (max - min) / 2.0,
        })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.half_range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub aa: Summary,
    pub bwt: Summary,
    pub fwt: Summary,
    pub fa: Summary,
}

/// Mean ± half-range of each metric across runs.
pub fn aggregate(runs: &[Metrics]) -> Result<Aggregate, MetricsError> {
    let pick = |f: fn(&Metrics) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        runs: runs.len(),
        aa: pick(|m| m.aa)?,
        bwt: pick(|m| m.bwt)?,
        fwt: pick(|m| m.fwt)?,
        fa: pick(|m| m.fa)?,
    })
}
