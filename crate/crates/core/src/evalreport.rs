//! Classification metrics, ROC-AUC, multi-seed aggregation and tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataworld::{split_dataset, Dataset, Safety};
use crate::model::{FeatureSource, FrameScore, Method, ModelError, SafetyModel, Variant};
use crate::training::{train, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: only {0} samples present")]
    SingleClass(&'static str),
    #[error("score and label counts differ: {scores} vs {labels}")]
    Length { scores: usize, labels: usize },
    #[error("aggregation needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("runs disagree on which metrics are available ({0})")]
    MaskMismatch(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Rank-based AUC with safe as the positive class; ties count one half.
pub fn roc_auc(scores: &[f64], labels: &[Safety]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let n_pos = labels.iter().filter(|l| l.is_safe()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(EvalError::SingleClass("unsafe"));
    }
    if n_neg == 0 {
        return Err(EvalError::SingleClass("safe"));
    }
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k].is_safe()).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of `label`-labeled samples classified as `label` (safe iff score >= 0).
fn accuracy(scores: &[f64], labels: &[Safety], label: Safety) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if l == label {
            total += 1;
            let predicted = if s >= 0.0 { Safety::Safe } else { Safety::Unsafe };
            hit += (predicted == label) as usize;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Table-style metrics; `None` marks a metric that is undefined or does
/// not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    pub safe_state_acc: Option<f64>,
    pub unsafe_state_acc: Option<f64>,
    pub auc_states: Option<f64>,
    pub safe_action_acc: Option<f64>,
    pub unsafe_action_acc: Option<f64>,
    pub auc_actions: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = [
    "safe_state_acc",
    "unsafe_state_acc",
    "auc_states",
    "safe_action_acc",
    "unsafe_action_acc",
    "auc_actions",
];

impl FilterMetrics {
    pub fn from_scores(
        state_scores: Option<&[f64]>,
        state_labels: &[Safety],
        action_scores: &[f64],
        control_labels: &[Safety],
    ) -> Self {
        let (ss, us, auc_s) = match state_scores {
            Some(s) => (
                accuracy(s, state_labels, Safety::Safe),
                accuracy(s, state_labels, Safety::Unsafe),
                roc_auc(s, state_labels).ok(),
            ),
            None => (None, None, None),
        };
        Self {
            safe_state_acc: ss,
            unsafe_state_acc: us,
            auc_states: auc_s,
            safe_action_acc: accuracy(action_scores, control_labels, Safety::Safe),
            unsafe_action_acc: accuracy(action_scores, control_labels, Safety::Unsafe),
            auc_actions: roc_auc(action_scores, control_labels).ok(),
        }
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.safe_state_acc,
            self.unsafe_state_acc,
            self.auc_states,
            self.safe_action_acc,
            self.unsafe_action_acc,
            self.auc_actions,
        ]
    }
}

/// Scores every frame of `test` and computes its metrics.
pub fn evaluate(model: &SafetyModel, test: &Dataset) -> Result<(FilterMetrics, Vec<FrameScore>)> {
    model.check_dataset(test)?;
    let scores = model.score_trajectories(&test.trajectories)?;
    let frames: Vec<_> = test.frames().collect();
    let state_labels: Vec<Safety> = frames.iter().map(|f| f.state_label).collect();
    let control_labels: Vec<Safety> = frames.iter().map(|f| f.control_label).collect();
    let actions: Vec<f64> = scores.iter().map(|s| s.action).collect();
    let states: Option<Vec<f64>> = scores.iter().map(|s| s.state).collect();
    let states = if model.spec.method.has_barrier() { states } else { None };
    let metrics = FilterMetrics::from_scores(states.as_deref(), &state_labels, &actions, &control_labels);
    Ok((metrics, scores))
}

/// Metrics file of one evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub tool_version: String,
    pub config_hash: String,
    pub method: Method,
    pub features: FeatureSource,
    pub variant: Variant,
    pub seed: u64,
    pub frames: usize,
    pub metrics: FilterMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub safe_state_acc: Option<Stat>,
    pub unsafe_state_acc: Option<Stat>,
    pub auc_states: Option<Stat>,
    pub safe_action_acc: Option<Stat>,
    pub unsafe_action_acc: Option<Stat>,
    pub auc_actions: Option<Stat>,
}

impl AggregateMetrics {
    pub fn values(&self) -> [Option<Stat>; 6] {
        [
            self.safe_state_acc,
            self.unsafe_state_acc,
            self.auc_states,
            self.safe_action_acc,
            self.unsafe_action_acc,
            self.auc_actions,
        ]
    }
}

/// Per-metric mean and population standard deviation.
pub fn aggregate(runs: &[FilterMetrics]) -> Result<AggregateMetrics> {
    if runs.len() < 2 {
        return Err(EvalError::TooFewRuns(runs.len()));
    }
    let mut stats = [None; 6];
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let column: Vec<Option<f64>> = runs.iter().map(|r| r.values()[k]).collect();
        let present = column.iter().filter(|v| v.is_some()).count();
        if present == 0 {
            continue;
        }
        if present != column.len() {
            return Err(EvalError::MaskMismatch(name));
        }
        let xs: Vec<f64> = column.into_iter().flatten().collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        stats[k] = Some(Stat { mean, std: var.sqrt() });
    }
    let [a, b, c, d, e, f] = stats;
    Ok(AggregateMetrics {
        runs: runs.len(),
        safe_state_acc: a,
        unsafe_state_acc: b,
        auc_states: c,
        safe_action_acc: d,
        unsafe_action_acc: e,
        auc_actions: f,
    })
}

/// `mean±std` in percent with two decimals, or `NA`.
pub fn format_cell(stat: Option<Stat>) -> String {
    match stat {
        Some(s) => format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std),
        None => "NA".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub features: FeatureSource,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub metrics: AggregateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// How the spread column is computed.
    pub note: String,
}

pub const SPREAD_NOTE: &str = "values are mean±std over runs in percent; std is the population standard deviation";

/// Groups runs by (method, features, variant) and aggregates each group.
pub fn build_report(runs: &[RunMetrics]) -> Result<Report> {
    let mut keys: Vec<(Method, FeatureSource, Variant)> = runs.iter().map(|r| (r.method, r.features, r.variant)).collect();
    keys.sort();
    keys.dedup();
    let rows = keys
        .into_iter()
        .map(|key| {
            let group: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| (r.method, r.features, r.variant) == key)
                .collect();
            let metrics: Vec<FilterMetrics> = group.iter().map(|r| r.metrics.clone()).collect();
            Ok(ReportRow {
                method: key.0,
                features: key.1,
                variant: key.2,
                seeds: group.iter().map(|r| r.seed).collect(),
                metrics: aggregate(&metrics)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        rows,
        note: SPREAD_NOTE.to_string(),
    })
}

pub fn report_csv(report: &Report) -> String {
    let mut out = String::from("method,features,variant,runs");
    for name in METRIC_NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "{},{},{},{}", row.method, row.features, row.variant, row.metrics.runs);
        for stat in row.metrics.values() {
            out.push(',');
            out.push_str(&format_cell(stat));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "# {}", report.note);
    out
}

/// Single-run metrics as a one-row CSV (plain fractions, empty when undefined).
pub fn metrics_csv(run: &RunMetrics) -> String {
    let mut out = String::from("method,features,variant,seed");
    for name in METRIC_NAMES {
        out.push(',');
        out.push_str(name);
    }
    let _ = write!(out, "\n{},{},{},{}", run.method, run.features, run.variant, run.seed);
    for v in run.metrics.values() {
        out.push(',');
        if let Some(v) = v {
            let _ = write!(out, "{v}");
        }
    }
    out.push('\n');
    out
}

impl RunMetrics {
    pub fn new(model: &SafetyModel, frames: usize, metrics: FilterMetrics) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: model.config_hash.clone(),
            method: model.spec.method,
            features: model.spec.features,
            variant: model.spec.variant,
            seed: model.seed,
            frames,
            metrics,
        }
    }
}

/// Trains on the training split of `data` and evaluates on its test split.
pub fn train_and_evaluate(cfg: &RunConfig, data: &Dataset) -> Result<(SafetyModel, RunMetrics)> {
    let (train_set, _, test_set) = split_dataset(data, data.meta.seed);
    let (model, _) = train(&cfg.train_run(), &train_set, &cfg.hash())?;
    let (metrics, _) = evaluate(&model, &test_set)?;
    let run = RunMetrics::new(&model, test_set.frame_count(), metrics);
    Ok((model, run))
}

/// Runs the configured method over `seeds` once per variant with identical
/// data and seeds; returns the fused and unfused report rows.
pub fn ablation_fused_vs_unfused(cfg: &RunConfig, data: &Dataset, seeds: &[u64]) -> Result<(ReportRow, ReportRow)> {
    let mut rows = Vec::with_capacity(2);
    for variant in [Variant::Fused, Variant::Unfused] {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.method.variant = variant;
            runs.push(train_and_evaluate(&c, data)?.1);
        }
        let mut report = build_report(&runs)?;
        rows.push(report.rows.remove(0));
    }
    let unfused = rows.pop().expect("two arms");
    Ok((rows.pop().expect("two arms"), unfused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Safety::{Safe as S, Unsafe as U};

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[S, S, U, U]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[S, U, S, U]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.7, 0.3, 0.5], &[S, S, U]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[1.0, 2.0], &[S, S]), Err(EvalError::SingleClass(_))));
    }

    #[test]
    fn constant_nonnegative_scorer() {
        let labels = [S, U, S, U];
        let m = FilterMetrics::from_scores(Some(&[0.0; 4]), &labels, &[1.0; 4], &labels);
        assert_eq!(m.safe_state_acc, Some(1.0));
        assert_eq!(m.unsafe_state_acc, Some(0.0));
        assert_eq!(m.auc_states, Some(0.5));
        assert_eq!(m.auc_actions, Some(0.5));
    }

    #[test]
    fn oracle_scorer() {
        let labels = [S, U, U, S];
        let scores = [1.0, -1.0, -1.0, 1.0];
        let m = FilterMetrics::from_scores(None, &labels, &scores, &labels);
        assert_eq!(m.values()[3..], [Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(m.safe_state_acc, None);
    }

    fn with_auc(v: f64) -> FilterMetrics {
        FilterMetrics {
            safe_state_acc: None,
            unsafe_state_acc: None,
            auc_states: None,
            safe_action_acc: Some(v),
            unsafe_action_acc: Some(v),
            auc_actions: Some(v),
        }
    }

    #[test]
    fn two_point_population_std() {
        let agg = aggregate(&[with_auc(0.8), with_auc(1.0)]).unwrap();
        let s = agg.auc_actions.unwrap();
        assert!((s.mean - 0.9).abs() < 1e-12 && (s.std - 0.1).abs() < 1e-12);
        assert_eq!(agg.auc_states, None);
        assert_eq!(format_cell(Some(s)), "90.00±10.00");
        let same = aggregate(&[with_auc(0.7), with_auc(0.7)]).unwrap();
        assert_eq!(same.auc_actions.unwrap().std, 0.0);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(aggregate(&[with_auc(0.5)]), Err(EvalError::TooFewRuns(1))));
        let mut odd = with_auc(0.5);
        odd.auc_states = Some(0.5);
        assert!(matches!(aggregate(&[with_auc(0.5), odd]), Err(EvalError::MaskMismatch("auc_states"))));
    }
}
