//! ROC analysis and thresholding. Larger scores are more anomalous and
//! `true` labels mark the anomalous (positive) class.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Pixels with `score >= threshold` are flagged at this vertex.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// One vertex per distinct score, swept from the highest score down, with the
/// area computed by the trapezoid rule.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push(RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count units, normalized once at the end
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 * 0.5;
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc / (pos as f64 * neg as f64),
    })
}

pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.auc)
}

/// Largest threshold whose true-positive rate is at least `rate`.
pub fn threshold_at_tpr(scores: &[f64], labels: &[bool], rate: f64) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!(
            "rate must lie in (0, 1], got {rate}"
        )));
    }
    let mut positives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    positives.sort_by(|a, b| b.total_cmp(a));
    // smallest m with m / pos >= rate, evaluated exactly as the tpr is
    let achieves = |m: usize| m as f64 / pos as f64 >= rate;
    let mut m = ((rate * pos as f64).ceil() as usize).clamp(1, pos);
    while m > 1 && achieves(m - 1) {
        m -= 1;
    }
    while !achieves(m) {
        m += 1;
    }
    Ok(positives[m - 1])
}

/// Threshold flagging roughly the top fraction `q` of scores.
///
/// With scores sorted descending, this is the `floor(q·n)`-th largest score;
/// `q` small enough to flag nothing yields `+∞`.
pub fn threshold_at_quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!(
            "quantile must lie in (0, 1), got {q}"
        )));
    }
    let k = (q * scores.len() as f64).floor() as usize;
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[k - 1])
}

/// `true` where `score >= t`.
pub fn apply_threshold(scores: &[f64], t: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= t).collect()
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: a.len(),
        });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid("constant input has no rank correlation"));
    }
    Ok(cov / (va * vb).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}
