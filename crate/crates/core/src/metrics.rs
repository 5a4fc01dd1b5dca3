//! Ranking metrics, calibration error and the paired t-test.
//!
//! AUPRC is average precision: positives are visited in descending score
//! order (ties keep input order) and the precision at each positive's rank
//! is averaged. No interpolation between PR points is applied.
//!
//! Bootstrap folds are re-splits of the data under fresh seeds; each fold
//! reports local, remote and transferred metrics and the lift of the
//! transferred model over the local one.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Data(format!("score {s} is not a number")));
    }
    Ok(())
}

/// Indices sorted by descending score, stable for ties.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count, per tie group, negatives strictly below and within the group.
    let mut concordant = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos_in = group.iter().filter(|&&k| labels[k]).count();
        let neg_in = group.len() - pos_in;
        concordant += pos_in as f64 * (neg_below as f64 + 0.5 * neg_in as f64);
        neg_below += neg_in;
        i = j;
    }
    Ok(concordant / (n_pos as f64 * n_neg as f64))
}

/// Average precision.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Expected calibration error over `n_bins` equal-width bins on [0, 1].
pub fn ece(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Data("ECE needs at least one score".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0f64; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s.clamp(0.0, 1.0) * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += s;
        hits[b] += l as usize;
    }
    let n = scores.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (hits[b] as f64 / c - conf[b] / c).abs()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub mean: f64,
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Two-sided one-sample t-test of paired differences against zero.
pub fn paired_t_test(diffs: &[f64]) -> Result<TTest> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Data(format!("paired t-test needs >= 2 differences, got {n}")));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let t = mean / (sd / nf.sqrt());
    let df = nf - 1.0;
    Ok(TTest {
        mean,
        t,
        df,
        p_value: student_t_two_sided_p(t, df),
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom, via the
/// regularized incomplete beta function.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub auroc: f64,
    pub auprc: f64,
}

impl RankMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Auroc => self.auroc,
            Metric::Auprc => self.auprc,
        }
    }
}

pub fn rank_metrics(scores: &[f64], labels: &[bool]) -> Result<RankMetrics> {
    Ok(RankMetrics {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Auroc, Metric::Auprc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
        }
    }
}

/// Percent change of `value` relative to `baseline`.
pub fn lift_pct(value: f64, baseline: f64) -> f64 {
    100.0 * (value - baseline) / baseline
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub local: RankMetrics,
    pub remote: RankMetrics,
    pub transferred: RankMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub seed: u64,
    pub metrics: Option<FoldMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub n_folds: usize,
    pub mean_local: Option<f64>,
    pub mean_remote: Option<f64>,
    pub mean_transferred: Option<f64>,
    pub mean_lift_pct: Option<f64>,
    pub folds_with_positive_lift: usize,
    pub fraction_positive_lift: Option<f64>,
    /// Paired test of transferred minus local.
    pub t_test: Option<TTest>,
    pub t_test_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub folds: Vec<FoldRow>,
    pub n_failed: usize,
    pub summary: Vec<MetricSummary>,
}

impl BootstrapReport {
    pub fn summary_for(&self, metric: Metric) -> &MetricSummary {
        self.summary.iter().find(|s| s.metric == metric).expect("every metric is summarized")
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Runs `runner(fold, seed)` once per seed (in parallel) and aggregates.
/// Failed folds are kept in the table with their error and left out of the
/// summary.
pub fn bootstrap_lift<F>(runner: F, seeds: &[u64]) -> BootstrapReport
where
    F: Fn(usize, u64) -> Result<FoldMetrics> + Sync,
{
    let folds: Vec<FoldRow> = seeds
        .par_iter()
        .enumerate()
        .map(|(fold, &seed)| match runner(fold, seed) {
            Ok(m) => FoldRow {
                fold,
                seed,
                metrics: Some(m),
                error: None,
            },
            Err(e) => {
                log::warn!("bootstrap fold {fold} failed: {e}");
                FoldRow {
                    fold,
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    summarize_folds(folds)
}

pub fn summarize_folds(folds: Vec<FoldRow>) -> BootstrapReport {
    let ok: Vec<&FoldMetrics> = folds.iter().filter_map(|f| f.metrics.as_ref()).collect();
    let summary = Metric::ALL
        .iter()
        .map(|&metric| {
            let local: Vec<f64> = ok.iter().map(|m| m.local.get(metric)).collect();
            let remote: Vec<f64> = ok.iter().map(|m| m.remote.get(metric)).collect();
            let transferred: Vec<f64> = ok.iter().map(|m| m.transferred.get(metric)).collect();
            let lifts: Vec<f64> = transferred.iter().zip(&local).map(|(t, l)| lift_pct(*t, *l)).collect();
            let diffs: Vec<f64> = transferred.iter().zip(&local).map(|(t, l)| t - l).collect();
            let positive = diffs.iter().filter(|d| **d > 0.0).count();
            let (t_test, t_test_error) = match paired_t_test(&diffs) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            MetricSummary {
                metric,
                n_folds: ok.len(),
                mean_local: mean(&local),
                mean_remote: mean(&remote),
                mean_transferred: mean(&transferred),
                mean_lift_pct: mean(&lifts),
                folds_with_positive_lift: positive,
                fraction_positive_lift: if ok.is_empty() {
                    None
                } else {
                    Some(positive as f64 / ok.len() as f64)
                },
                t_test,
                t_test_error,
            }
        })
        .collect();
    let n_failed = folds.iter().filter(|f| f.metrics.is_none()).count();
    BootstrapReport {
        folds,
        n_failed,
        summary,
    }
}

pub const LIFT_CSV_HEADER: &str = "fold,metric,local,remote,transferred,lift_pct";

/// One row per successful fold and metric.
pub fn write_lift_csv<W: Write>(w: W, report: &BootstrapReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LIFT_CSV_HEADER.split(','))?;
    for row in &report.folds {
        let Some(m) = &row.metrics else { continue };
        for metric in Metric::ALL {
            let (l, r, t) = (m.local.get(metric), m.remote.get(metric), m.transferred.get(metric));
            out.write_record([
                row.fold.to_string(),
                metric.as_str().to_string(),
                l.to_string(),
                r.to_string(),
                t.to_string(),
                lift_pct(t, l).to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::Format(format!("lift table: {e}")))
}
