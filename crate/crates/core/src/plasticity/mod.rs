//! Plasticity indicators and expansion planning.
//!
//! * `pr1`: effective rank of a hidden layer's weight matrix divided by its
//!   neuron count. Values near 1 mean every direction is already in use.
//! * `pr2`: entropy efficiency of the layer's activation-norm histogram,
//!   `H / n^alpha`.
//! * indicator: `ω1·pr1 + ω2·pr2`; the layer is *limited* once the indicator
//!   reaches the trigger.
//!
//! A higher indicator is read as *less* plasticity. The raw `pr2` is always
//! reported so the opposite reading can be studied from the logs.

mod svd;

pub use svd::singular_values;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ForwardOptions, NnError, PartitionedModel, Tensor};

/// Singular values at or below this are treated as zero.
pub const SINGULAR_VALUE_CUTOFF: f64 = 1e-5;

/// Node values for the combined indicator: per-indicator readings of a
/// limited model and of a healthy one.
pub const LIMITED_PR1: f64 = 0.85;
pub const LIMITED_PR2: f64 = 0.95;
pub const HEALTHY_PR1: f64 = 0.80;
pub const HEALTHY_PR2: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlasticityError {
    #[error("degenerate matrix: no singular value above {SINGULAR_VALUE_CUTOFF}")]
    Degenerate,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid plasticity config: {0}")]
    Config(String),
    #[error("expansion planned for a report that is not limited (indicator {indicator:.4} < trigger {trigger:.4})")]
    NotLimited { indicator: f64, trigger: f64 },
    #[error("pr1 {pr1:.4} is already below the safe threshold {safe:.4}")]
    AlreadySafe { pr1: f64, safe: f64 },
    #[error("model: {0}")]
    Model(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub effective_rank: f64,
    /// Number of singular values above the cutoff.
    pub rank: usize,
}

/// Effective rank and numerical rank of a weight matrix.
pub fn spectrum(w: &Tensor) -> Result<Spectrum, PlasticityError> {
    if w.is_empty() {
        return Err(PlasticityError::Empty("weight matrix".into()));
    }
    let kept: Vec<f64> = singular_values(w).into_iter().filter(|&s| s > SINGULAR_VALUE_CUTOFF).collect();
    if kept.is_empty() {
        return Err(PlasticityError::Degenerate);
    }
    let l1: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|s| s / l1)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(Spectrum {
        effective_rank: entropy.exp(),
        rank: kept.len(),
    })
}

/// `exp(H(σ / ‖σ‖₁))` over singular values above the cutoff.
pub fn effective_rank(w: &Tensor) -> Result<f64, PlasticityError> {
    spectrum(w).map(|s| s.effective_rank)
}

/// `H / n^alpha` where `H` is the base-2 entropy of a `bins`-bucket histogram
/// of per-neuron L∞ activation norms over `[0, max]`.
///
/// `trace` is `samples x neurons`. A layer with only zero activations scores 0.
pub fn entropy_efficiency(trace: &Tensor, bins: usize, alpha: f64) -> Result<f64, PlasticityError> {
    if bins < 2 {
        return Err(PlasticityError::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if trace.is_empty() || trace.rows() == 0 {
        return Err(PlasticityError::Empty("activation trace".into()));
    }
    let n = trace.cols();
    let mut norms = vec![0.0f64; n];
    for r in 0..trace.rows() {
        for (m, v) in norms.iter_mut().zip(trace.row(r)) {
            *m = m.max(v.abs());
        }
    }
    Ok(histogram_entropy(&norms, bins) / (n as f64).powf(alpha))
}

/// Base-2 entropy of an equal-width histogram of `values` over `[0, max]`.
pub fn histogram_entropy(values: &[f64], bins: usize) -> f64 {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 || values.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v / max) * bins as f64).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let total = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ProbeLayer {
    /// Always probe this hidden layer.
    Pinned { layer: usize },
    /// Draw the hidden layer from a generator seeded with `seed`.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlasticityConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub trigger: f64,
    pub safe: f64,
    pub alpha: f64,
    pub bins: usize,
    pub probe: ProbeLayer,
    /// Number of new-task training inputs used as the probe batch.
    pub probe_samples: usize,
}

impl Default for PlasticityConfig {
    fn default() -> Self {
        let (omega1, omega2) = (0.8, 0.2);
        Self {
            omega1,
            omega2,
            trigger: omega1 * LIMITED_PR1 + omega2 * LIMITED_PR2,
            safe: omega1 * HEALTHY_PR1 + omega2 * HEALTHY_PR2,
            alpha: 0.30,
            bins: 16,
            probe: ProbeLayer::Pinned { layer: 0 },
            probe_samples: 256,
        }
    }
}

impl PlasticityConfig {
    pub fn indicator(&self, pr1: f64, pr2: f64) -> f64 {
        self.omega1 * pr1 + self.omega2 * pr2
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.omega1 < 0.0 || self.omega2 < 0.0 {
            out.push("plasticity.omega1/omega2 must be non-negative".into());
        }
        if !(self.trigger.is_finite() && self.safe.is_finite()) || self.safe > self.trigger {
            out.push(format!("plasticity.safe {} must not exceed trigger {}", self.safe, self.trigger));
        }
        if self.bins < 2 {
            out.push("plasticity.bins must be at least 2".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            out.push("plasticity.alpha must be a non-negative number".into());
        }
        if self.probe_samples == 0 {
            out.push("plasticity.probe_samples must be positive".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlasticityReport {
    pub layer: usize,
    pub pr1: f64,
    pub pr2: f64,
    pub indicator: f64,
    pub limited: bool,
    pub effective_rank: f64,
    pub rank: usize,
    pub neurons: usize,
}

/// Which hidden layer a given policy probes in `model`.
pub fn probe_layer(model: &PartitionedModel, policy: ProbeLayer) -> Result<usize, PlasticityError> {
    let layers = model.hidden_layers().len();
    if layers == 0 {
        return Err(PlasticityError::Empty("model has no hidden layers".into()));
    }
    match policy {
        ProbeLayer::Pinned { layer } if layer < layers => Ok(layer),
        ProbeLayer::Pinned { layer } => Err(PlasticityError::Config(format!(
            "probe layer {layer} does not exist (model has {layers})"
        ))),
        ProbeLayer::Random { seed } => Ok(ChaCha8Rng::seed_from_u64(seed).gen_range(0..layers)),
    }
}

/// Measures both indicators on one hidden layer of `model`.
pub fn evaluate(model: &PartitionedModel, probe: &Tensor, cfg: &PlasticityConfig) -> Result<PlasticityReport, PlasticityError> {
    let layer = probe_layer(model, cfg.probe)?;
    let out = model.forward(probe, ForwardOptions::eval())?;
    report_from_parts(layer, &model.hidden_weight_matrix(layer), &out.activations[layer], cfg)
}

/// Same as [`evaluate`] on backbone features that were computed beforehand.
pub fn evaluate_features(
    model: &PartitionedModel,
    features: &Tensor,
    cfg: &PlasticityConfig,
) -> Result<PlasticityReport, PlasticityError> {
    let layer = probe_layer(model, cfg.probe)?;
    let out = model.forward_features(features, ForwardOptions::eval())?;
    report_from_parts(layer, &model.hidden_weight_matrix(layer), &out.activations[layer], cfg)
}

/// Builds a report from a weight matrix (`inputs x neurons`) and its
/// activation trace.
pub fn report_from_parts(
    layer: usize,
    weights: &Tensor,
    activations: &Tensor,
    cfg: &PlasticityConfig,
) -> Result<PlasticityReport, PlasticityError> {
    let neurons = weights.cols();
    let spec = spectrum(weights)?;
    let pr1 = spec.effective_rank / neurons as f64;
    let pr2 = entropy_efficiency(activations, cfg.bins, cfg.alpha)?;
    let indicator = cfg.indicator(pr1, pr2);
    Ok(PlasticityReport {
        layer,
        pr1,
        pr2,
        indicator,
        limited: indicator >= cfg.trigger,
        effective_rank: spec.effective_rank,
        rank: spec.rank,
        neurons,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionConfig {
    pub allowed_factors: Vec<f64>,
    /// Target for the predicted post-expansion `pr1`.
    pub safe_pr1: f64,
    /// Standard deviation of the Gaussian perturbation added to copied units.
    pub epsilon0: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            allowed_factors: vec![1.25, 1.5, 2.0],
            safe_pr1: HEALTHY_PR1,
            epsilon0: 1e-2,
        }
    }
}

impl ExpansionConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.allowed_factors.is_empty() {
            out.push("expansion.allowed_factors must not be empty".into());
        }
        if self.allowed_factors.iter().any(|&r| !(r.is_finite() && r > 1.0)) {
            out.push("expansion.allowed_factors must all be finite and > 1".into());
        }
        if !(self.safe_pr1 > 0.0 && self.safe_pr1 <= 1.0) {
            out.push("expansion.safe_pr1 must lie in (0, 1]".into());
        }
        if !(self.epsilon0.is_finite() && self.epsilon0 >= 0.0) {
            out.push("expansion.epsilon0 must be a non-negative number".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    /// Hidden layers to widen (every hidden layer).
    pub layers: Vec<usize>,
    pub factor: f64,
    pub epsilon0: f64,
    pub predicted_pr1: f64,
    /// No allowed factor reached the safe target; the largest was chosen.
    pub saturated: bool,
}

/// `(R_e + min((r-1)n, n-R)) / (r n)` with `R_e = pr1·n`.
pub fn predicted_pr1(pr1: f64, neurons: usize, rank: usize, factor: f64) -> f64 {
    let n = neurons as f64;
    let headroom = n - rank.min(neurons) as f64;
    let delta = ((factor - 1.0) * n).min(headroom);
    (pr1 * n + delta) / (factor * n)
}

/// Smallest allowed factor whose predicted `pr1` falls below `safe`, or the
/// largest factor (flagged saturated) if none does.
pub fn choose_factor(pr1: f64, neurons: usize, rank: usize, cfg: &ExpansionConfig) -> (f64, f64, bool) {
    let mut factors = cfg.allowed_factors.clone();
    factors.sort_by(f64::total_cmp);
    for &r in &factors {
        let p = predicted_pr1(pr1, neurons, rank, r);
        if p < cfg.safe_pr1 {
            return (r, p, false);
        }
    }
    let r = *factors.last().expect("allowed factors validated non-empty");
    (r, predicted_pr1(pr1, neurons, rank, r), true)
}

pub fn plan_expansion(
    report: &PlasticityReport,
    hidden_layers: usize,
    plasticity: &PlasticityConfig,
    cfg: &ExpansionConfig,
) -> Result<ExpansionPlan, PlasticityError> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(PlasticityError::Config(problems.join("; ")));
    }
    if !report.limited {
        return Err(PlasticityError::NotLimited {
            indicator: report.indicator,
            trigger: plasticity.trigger,
        });
    }
    if report.pr1 < cfg.safe_pr1 {
        return Err(PlasticityError::AlreadySafe {
            pr1: report.pr1,
            safe: cfg.safe_pr1,
        });
    }
    let (factor, predicted, saturated) = choose_factor(report.pr1, report.neurons, report.rank, cfg);
    Ok(ExpansionPlan {
        layers: (0..hidden_layers).collect(),
        factor,
        epsilon0: cfg.epsilon0,
        predicted_pr1: predicted,
        saturated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> Tensor {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.set(i, i, v);
        }
        t
    }

    #[test]
    fn identity_has_full_effective_rank() {
        assert!((effective_rank(&Tensor::identity(4)).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cutoff_filters_tiny_values() {
        assert_eq!(effective_rank(&diag(&[1.0, 1e-9])).unwrap(), 1.0);
    }

    #[test]
    fn diag_three_one() {
        // p = (0.75, 0.25); H = -(0.75 ln 0.75 + 0.25 ln 0.25) = 0.562335...
        let expected = (-(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln())).exp();
        let got = effective_rank(&diag(&[3.0, 1.0])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.7548).abs() < 1e-3);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        assert_eq!(effective_rank(&Tensor::zeros(&[3, 2])), Err(PlasticityError::Degenerate));
    }

    #[test]
    fn entropy_single_bin_is_zero() {
        let t = Tensor::from_vec(&[2, 4], vec![0.5; 8]).unwrap();
        assert_eq!(entropy_efficiency(&t, 16, 0.3).unwrap(), 0.0);
        assert_eq!(entropy_efficiency(&Tensor::zeros(&[3, 5]), 16, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn entropy_uniform_bins() {
        // 64 neurons, 4 per bin centre across 16 bins
        let norms: Vec<f64> = (0..64).map(|i| ((i / 4) as f64 + 0.5) / 16.0).collect();
        let t = Tensor::from_vec(&[1, 64], norms).unwrap();
        assert!((entropy_efficiency(&t, 16, 0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_hand_histogram() {
        // max 4.0, 4 bins of width 1: counts [3, 1, 2, 2]
        let norms = [0.1, 0.5, 0.9, 1.5, 2.2, 2.8, 3.3, 4.0];
        let t = Tensor::from_vec(&[1, 8], norms.to_vec()).unwrap();
        let h = -(3.0 / 8.0 * (3.0f64 / 8.0).log2() + 1.0 / 8.0 * (1.0f64 / 8.0).log2() + 2.0 * (0.25 * 0.25f64.log2()));
        let got = entropy_efficiency(&t, 4, 0.0).unwrap();
        assert!((got - h).abs() < 1e-12, "{got} vs {h}");
    }

    #[test]
    fn entropy_uses_l_inf_over_samples() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        // both neurons have norm 1 -> one bin
        assert_eq!(entropy_efficiency(&t, 4, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn indicator_nodes() {
        let cfg = PlasticityConfig::default();
        let limited = cfg.indicator(0.85, 0.95);
        assert!((limited - 0.87).abs() < 1e-12);
        assert!(limited >= cfg.trigger);
        let healthy = cfg.indicator(0.80, 0.75);
        assert!((healthy - 0.79).abs() < 1e-12);
        assert!(healthy < cfg.trigger);
        let no_entropy = PlasticityConfig { omega2: 0.0, ..cfg };
        assert_eq!(no_entropy.indicator(0.6, 123.0), 0.8 * 0.6);
    }

    fn report(pr1: f64, neurons: usize, rank: usize, limited: bool) -> PlasticityReport {
        PlasticityReport {
            layer: 0,
            pr1,
            pr2: 0.9,
            indicator: 0.9,
            limited,
            effective_rank: pr1 * neurons as f64,
            rank,
            neurons,
        }
    }

    #[test]
    fn planning_picks_smallest_sufficient_factor() {
        let cfg = ExpansionConfig::default();
        let pc = PlasticityConfig::default();
        // rank 58 of 64: r=1.25 gives (57.6 + 6)/80 = 0.795 < 0.8
        let plan = plan_expansion(&report(0.9, 64, 58, true), 2, &pc, &cfg).unwrap();
        assert_eq!(plan.factor, 1.25);
        assert!((plan.predicted_pr1 - 0.795).abs() < 1e-12);
        assert_eq!(plan.layers, vec![0, 1]);
        // full rank: predicted = pr1 / r
        let (r, p, sat) = choose_factor(0.99, 64, 64, &cfg);
        assert_eq!((r, sat), (1.25, false));
        assert!((p - 0.99 / 1.25).abs() < 1e-15);
    }

    #[test]
    fn planning_saturates() {
        let cfg = ExpansionConfig {
            allowed_factors: vec![1.1, 1.05],
            ..Default::default()
        };
        let (r, _, sat) = choose_factor(1.0, 10, 5, &cfg);
        assert_eq!((r, sat), (1.1, true));
    }

    #[test]
    fn planning_rejects_healthy_reports() {
        let cfg = ExpansionConfig::default();
        let pc = PlasticityConfig::default();
        assert!(matches!(
            plan_expansion(&report(0.7, 64, 64, true), 2, &pc, &cfg),
            Err(PlasticityError::AlreadySafe { .. })
        ));
        assert!(matches!(
            plan_expansion(&report(0.9, 64, 64, false), 2, &pc, &cfg),
            Err(PlasticityError::NotLimited { .. })
        ));
    }
}
