//! Reconstruction-error scoring and the evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of thresholds scanned by [`best_dice`].
pub const DICE_THRESHOLDS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub auroc: f64,
    pub ap: f64,
    pub ap_pix: Option<f64>,
    pub best_dice: Option<f64>,
    pub dice_threshold: Option<f64>,
    pub n_normal: usize,
    pub n_abnormal: usize,
}

/// Pointwise squared error `(x − x̂)²`.
pub fn error_map(id: impl Into<String>, x: &[f64], x_hat: &[f64]) -> Result<ErrorMap> {
    if x.len() != x_hat.len() {
        return Err(Error::dim("error_map", &[x.len()], &[x_hat.len()]));
    }
    Ok(ErrorMap {
        id: id.into(),
        values: x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).collect(),
    })
}

/// Mean pixel error.
pub fn image_score(map: &ErrorMap) -> f64 {
    map.values.iter().sum::<f64>() / map.values.len() as f64
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim("metric input", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney rank sum, ties counted ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} abnormal and {n_neg} normal"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-sum average precision over a stable descending sort of the scores.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

fn pooled(maps: &[ErrorMap], masks: &[Vec<u8>]) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != masks.len() {
        return Err(Error::dim("pixel metric", &[maps.len()], &[masks.len()]));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        if m.values.len() != k.len() {
            return Err(Error::dim("pixel metric", &[m.values.len()], &[k.len()]));
        }
        scores.extend_from_slice(&m.values);
        labels.extend(k.iter().map(|&v| v != 0));
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::UndefinedMetric("all masks are empty".into()));
    }
    Ok((scores, labels))
}

/// Average precision over all pixels of all maps pooled together.
pub fn pixel_ap(maps: &[ErrorMap], masks: &[Vec<u8>]) -> Result<f64> {
    let (scores, labels) = pooled(maps, masks)?;
    average_precision(&scores, &labels)
}

pub fn dice(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Dataset-pooled Dice maximized over thresholds `t` (pixels with error `≥ t`
/// are predicted positive). Candidates are the distinct error values,
/// subsampled to at most [`DICE_THRESHOLDS`] points: evenly spaced quantiles
/// plus a refinement around the best of them.
pub fn best_dice(maps: &[ErrorMap], masks: &[Vec<u8>]) -> Result<(f64, f64)> {
    let (scores, labels) = pooled(maps, masks)?;
    best_dice_pooled(&scores, &labels, DICE_THRESHOLDS)
}

pub(crate) fn best_dice_pooled(scores: &[f64], labels: &[bool], max_thresholds: usize) -> Result<(f64, f64)> {
    check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    // tp_prefix[j] = positives among the j highest scores
    let mut tp_prefix = Vec::with_capacity(sorted.len() + 1);
    tp_prefix.push(0usize);
    for &i in &order {
        tp_prefix.push(tp_prefix.last().unwrap() + usize::from(labels[i]));
    }
    let n_pos = *tp_prefix.last().unwrap();
    let mut distinct: Vec<f64> = sorted.clone();
    distinct.dedup();
    let score_at = |t: f64| {
        let j = sorted.partition_point(|&s| s >= t);
        let tp = tp_prefix[j];
        dice(tp, j - tp, n_pos - tp)
    };
    let scan = |idx: &[usize], best: &mut (f64, f64)| {
        for &i in idx {
            let d = score_at(distinct[i]);
            if d > best.0 || (d == best.0 && distinct[i] > best.1) {
                *best = (d, distinct[i]);
            }
        }
    };
    let mut best = (-1.0, f64::NAN);
    if distinct.len() <= max_thresholds {
        scan(&(0..distinct.len()).collect::<Vec<_>>(), &mut best);
        return Ok(best);
    }
    // half the budget on evenly spaced quantiles, half between the
    // neighbours of the best quantile
    let coarse = spaced(0, distinct.len() - 1, max_thresholds / 2);
    scan(&coarse, &mut best);
    let at = coarse.iter().position(|&i| distinct[i] == best.1).expect("best is a candidate");
    let lo = coarse[at.saturating_sub(1)];
    let hi = coarse[(at + 1).min(coarse.len() - 1)];
    scan(&spaced(lo, hi, max_thresholds - coarse.len()), &mut best);
    Ok(best)
}

/// Up to `count` indices spread evenly over `lo..=hi`, both ends included.
fn spaced(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    let span = hi - lo;
    if span + 1 <= count {
        return (lo..=hi).collect();
    }
    let q = count - 1;
    let mut idx: Vec<usize> = (0..=q).map(|i| lo + (i * span + q / 2) / q).collect();
    idx.dedup();
    idx
}

/// Image-level AUROC and AP, plus pixel metrics when masks are given.
/// `labels[i]` is true for abnormal images.
pub fn summarize(maps: &[ErrorMap], labels: &[bool], masks: Option<&[Vec<u8>]>) -> Result<MetricsSummary> {
    let scores: Vec<f64> = maps.iter().map(image_score).collect();
    let (ap_pix, best_dice, dice_threshold) = match masks {
        Some(m) => {
            let (d, t) = best_dice(maps, m)?;
            (Some(pixel_ap(maps, m)?), Some(d), Some(t))
        }
        None => (None, None, None),
    };
    Ok(MetricsSummary {
        auroc: auroc(&scores, labels)?,
        ap: average_precision(&scores, labels)?,
        ap_pix,
        best_dice,
        dice_threshold,
        n_normal: labels.iter().filter(|&&l| !l).count(),
        n_abnormal: labels.iter().filter(|&&l| l).count(),
    })
}
