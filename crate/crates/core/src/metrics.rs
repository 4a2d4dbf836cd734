//! Classification, regression and calibration metrics.

use std::cmp::Ordering;
use std::io::Write;

use crate::error::{CoreError, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CoreError::data(format!("{a} scores for {b} labels")));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l != 0).count();
    (pos, labels.len() - pos)
}

/// Indices sorted by descending score; NaN-free input assumed.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Groups of equal scores in descending order, as `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let idx = descending(scores);
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for i in idx {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed");
        if labels[i] != 0 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::data("scores must be finite"));
    }
    Ok(())
}

/// `P(score⁺ > score⁻) + ½·P(score⁺ = score⁻)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    check_finite(scores)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(CoreError::data("AUROC needs both classes"));
    }
    // Walk from the lowest score up, counting negatives already passed.
    let mut wins2 = 0u128;
    let mut neg_below = 0u128;
    for &(p, n) in tie_groups(scores, labels).iter().rev() {
        wins2 += 2 * p as u128 * neg_below + p as u128 * n as u128;
        neg_below += n as u128;
    }
    Ok(wins2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision: `Σ_t (R_t − R_{t−1}) P_t` over distinct score thresholds.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    check_finite(scores)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(CoreError::data("AUPRC needs at least one positive"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Macro average of `metric` over classes (columns). Classes where the metric
/// is undefined are skipped; the second value is the number skipped.
pub fn macro_average<F>(scores: &[Vec<f64>], labels: &[Vec<u8>], metric: F) -> Result<(f64, usize)>
where
    F: Fn(&[f64], &[u8]) -> Result<f64>,
{
    check_len(scores.len(), labels.len())?;
    let classes = scores.first().map_or(0, Vec::len);
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
        match metric(&s, &l) {
            Ok(v) => {
                sum += v;
                used += 1;
            }
            Err(CoreError::Data(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::warn!("macro average skipped {skipped} class(es) with an undefined metric");
    }
    if used == 0 {
        return Err(CoreError::data("metric undefined for every class"));
    }
    Ok((sum / used as f64, skipped))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// Hour-scale regression metrics. Correlations are `None` when undefined.
pub fn regression_suite(pred_hours: &[f64], true_hours: &[f64]) -> Result<RegressionMetrics> {
    check_len(pred_hours.len(), true_hours.len())?;
    if pred_hours.len() < 3 {
        return Err(CoreError::data("regression metrics need at least 3 points"));
    }
    check_finite(pred_hours)?;
    let n = pred_hours.len() as f64;
    let mse = pred_hours.iter().zip(true_hours).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let mae = pred_hours.iter().zip(true_hours).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    Ok(RegressionMetrics {
        mse,
        mae,
        pearson: pearson(pred_hours, true_hours),
        spearman: spearman(pred_hours, true_hours),
    })
}

/// Adaptive calibration error over equal-count bins of the sorted probabilities.
pub fn ace(probs: &[f64], labels: &[u8], n_bins: usize) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    if probs.is_empty() || n_bins == 0 {
        return Err(CoreError::data("ACE needs at least one prediction and one bin"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(CoreError::data("ACE probabilities must lie in [0, 1]"));
    }
    let n = probs.len();
    let bins = if n < n_bins {
        log::warn!("ACE: {n} predictions for {n_bins} bins; using {n} bins");
        n
    } else {
        n_bins
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let mut total = 0.0;
    for b in 0..bins {
        let members = &idx[b * n / bins..(b + 1) * n / bins];
        let m = members.len() as f64;
        let conf = members.iter().map(|&i| probs[i]).sum::<f64>() / m;
        let acc = members.iter().map(|&i| f64::from(labels[i])).sum::<f64>() / m;
        total += (conf - acc).abs();
    }
    Ok(total / bins as f64)
}

pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(CoreError::data("Brier score of an empty set"));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p - f64::from(l)).powi(2))
        .sum::<f64>()
        / probs.len() as f64)
}

/// `1 − Brier(probs) / Brier(constant prevalence)`.
pub fn bss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(CoreError::data("Brier skill score needs both classes"));
    }
    let prevalence = pos as f64 / labels.len() as f64;
    let base = brier(&vec![prevalence; labels.len()], labels)?;
    Ok(1.0 - brier(probs, labels)? / base)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One row of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub architecture: String,
    pub initialization: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Metrics report CSV: `architecture,initialization,task,metric,value`.
pub fn write_metric_rows<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["architecture", "initialization", "task", "metric", "value"])?;
    for r in rows {
        wr.write_record([&r.architecture, &r.initialization, &r.task, &r.metric, &r.value.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.9, 0.4, 0.6], &[0, 1, 1, 0]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0]).unwrap(), 1.0);
        // Ranking 1,0,1: precision 1 at the first positive, 2/3 at the second.
        let ap = auprc(&[0.9, 0.5, 0.1], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!(auprc(&[0.1], &[0]).is_err());
    }

    #[test]
    fn regression_examples() {
        let t = [20.0, 40.0, 60.0, 80.0];
        let r = regression_suite(&t, &t).unwrap();
        assert_eq!((r.mse, r.mae), (0.0, 0.0));
        assert!((r.pearson.unwrap() - 1.0).abs() < 1e-15);
        assert!((r.spearman.unwrap() - 1.0).abs() < 1e-15);
        let rev = [80.0, 60.0, 40.0, 20.0];
        assert!((regression_suite(&rev, &t).unwrap().spearman.unwrap() + 1.0).abs() < 1e-15);
        assert!(regression_suite(&[1.0; 4], &t).unwrap().pearson.is_none());
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(ace(&[1.0; 4], &[1, 0, 1, 0], 1).unwrap(), 0.5);
        assert_eq!(ace(&[1.0, 1.0, 0.0, 0.0], &[1, 1, 0, 0], 2).unwrap(), 0.0);
        let labels = [1, 0, 0, 0];
        assert_eq!(bss(&[0.25; 4], &labels).unwrap(), 0.0);
        assert_eq!(bss(&[1.0, 0.0, 0.0, 0.0], &labels).unwrap(), 1.0);
        assert!(bss(&[0.0, 1.0, 1.0, 1.0], &labels).unwrap() < 0.0);
        assert!(bss(&[0.5; 2], &[1, 1]).is_err());
    }
}
