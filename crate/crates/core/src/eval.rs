//! Rank statistics and the localization comparison report.
//!
//! ROC AUC is computed from average ranks, which gives exactly the pairwise
//! probability `P(s_pos > s_neg) + 0.5 · P(s_pos = s_neg)`. Localization
//! AUC pools every labelled tile across slides.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("AUC undefined: {n_pos} positives and {n_neg} negatives")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error("empty sample")]
    EmptySample,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no labelled tiles")]
    NoLabeledTiles,
    #[error("report needs at least one run")]
    EmptyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 2) as f64 / 2.0;
        for &i in &order[start..=end] {
            ranks[i] = rank;
        }
        tie_sizes.push(end - start + 1);
        start = end + 1;
    }
    (ranks, tie_sizes)
}

pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }
    let (ranks, _) = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(RocResult {
        auc: u / (n_pos as f64 * n_neg as f64),
        n_pos,
        n_neg,
    })
}

/// Pooled tile-level AUC; tiles without a label are skipped.
pub fn localization_auc(
    values: &[f64],
    tile_labels: &[Option<usize>],
    positive_class: usize,
) -> Result<RocResult, EvalError> {
    if values.len() != tile_labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: values.len(),
            labels: tile_labels.len(),
        });
    }
    let (scores, labels): (Vec<f64>, Vec<bool>) = values
        .iter()
        .zip(tile_labels)
        .filter_map(|(v, l)| l.map(|l| (*v, l == positive_class)))
        .unzip();
    if scores.is_empty() {
        return Err(EvalError::NoLabeledTiles);
    }
    roc_auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: MwuMethod,
}

/// Number of rankings of `n1 + n2` distinct items giving each U value for
/// the first sample, indexed by U.
fn u_distribution(n1: usize, n2: usize) -> Vec<u64> {
    // table[a][b] is the distribution for sizes (a, b).
    let mut table: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); n2 + 1]; n1 + 1];
    for a in 0..=n1 {
        for b in 0..=n2 {
            table[a][b] = if a == 0 || b == 0 {
                vec![1]
            } else {
                let mut d = vec![0u64; a * b + 1];
                // Largest item belongs to the first sample: it beats all b.
                for (u, c) in table[a - 1][b].iter().enumerate() {
                    d[u + b] += c;
                }
                for (u, c) in table[a][b - 1].iter().enumerate() {
                    d[u] += c;
                }
                d
            };
        }
    }
    table.swap_remove(n1).swap_remove(n2)
}

/// Two-sided Mann-Whitney U test. Exact null distribution when the pooled
/// size is at most 20 with no ties; otherwise the normal approximation with
/// tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).cloned().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let has_ties = ties.iter().any(|&t| t > 1);

    if n1 + n2 <= 20 && !has_ties {
        let dist = u_distribution(n1, n2);
        let total: u64 = dist.iter().sum();
        let k = u.round() as usize;
        let lower: u64 = dist[..=k].iter().sum();
        let upper: u64 = dist[k..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / total as f64).min(1.0);
        return Ok(MwuResult {
            u,
            p_value: p,
            method: MwuMethod::Exact,
        });
    }

    let n = (n1 + n2) as f64;
    let (f1, f2) = (n1 as f64, n2 as f64);
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let variance = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mean = f1 * f2 / 2.0;
    let p = if variance <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / variance.sqrt();
        erfc(z / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0)
    };
    Ok(MwuResult {
        u,
        p_value: p,
        method: MwuMethod::NormalApprox,
    })
}

/// `(new − old) / old × 100`.
pub fn relative_improvement(new: f64, old: f64) -> f64 {
    (new - old) / old * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAuc {
    pub method: String,
    pub localization_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub model: String,
    pub classification_auc: Option<f64>,
    /// Method the others are compared against.
    pub baseline: String,
    pub methods: Vec<MethodAuc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub classification_auc: Option<f64>,
    pub method: String,
    pub localization_auc: f64,
    /// Percent change over the run's baseline method; `None` on the baseline row.
    pub relative_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<ReportRow>,
}

pub fn compare_report(runs: &[ModelRun]) -> Result<CompareReport, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut rows = Vec::new();
    for run in runs {
        let baseline = run
            .methods
            .iter()
            .find(|m| m.method == run.baseline)
            .map(|m| m.localization_auc);
        for m in &run.methods {
            rows.push(ReportRow {
                model: run.model.clone(),
                classification_auc: run.classification_auc,
                method: m.method.clone(),
                localization_auc: m.localization_auc,
                relative_improvement: match baseline {
                    Some(old) if m.method != run.baseline => {
                        Some(relative_improvement(m.localization_auc, old))
                    }
                    _ => None,
                },
            });
        }
    }
    Ok(CompareReport { rows })
}
