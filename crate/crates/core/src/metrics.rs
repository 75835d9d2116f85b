//! Ranking metrics: ROC AUC, Mann-Whitney U, Spearman correlation.
//!
//! AUC is computed from midranks, which makes it exactly the normalized
//! Mann-Whitney U statistic: ties contribute half a concordant pair each.

use statrs::function::erf::erfc;

use crate::{Error, Result};

/// Midranks of `values` (average rank across ties, 1-based).
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve of `scores` against binary `labels`
/// (true = positive). Equals (concordant + ties/2) / (pos * neg).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidConfig(
            "AUC requires both labels present".into(),
        ));
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC curve points (fpr, tpr), from (0,0) to (1,1), one step per distinct
/// score threshold (descending).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidConfig(
            "ROC requires both labels present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug)]
pub struct MannWhitney {
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for H1: group `a` is stochastically smaller than `b`.
    pub p_less: f64,
}

/// Mann-Whitney U test (normal approximation with tie correction and
/// continuity correction). `u` is the statistic of group `a`.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidConfig(
            "Mann-Whitney requires two nonempty groups".into(),
        ));
    }
    let combined: Vec<f64> = a.iter().chain(b).copied().collect();
    if combined.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney input".into()));
    }
    let ranks = midranks(&combined);
    let rank_sum_a: f64 = ranks[..n1].iter().sum();
    let u = rank_sum_a - (n1 * (n1 + 1)) as f64 / 2.0;

    let n = (n1 + n2) as f64;
    let mean = n1 as f64 * n2 as f64 / 2.0;
    // tie correction on the variance
    let mut sorted = combined.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let mut tie_term = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = (n1 as f64 * n2 as f64 / 12.0) * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        // all values identical: no evidence either way
        return Ok(MannWhitney {
            u,
            z: 0.0,
            p_less: 0.5,
        });
    }
    let z = (u - mean + 0.5) / var.sqrt();
    let p_less = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    Ok(MannWhitney { u, z, p_less })
}

/// Spearman rank correlation (midranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidConfig(
            "Spearman needs two equal-length vectors of at least 2 entries".into(),
        ));
    }
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidConfig(
            "Spearman undefined for a constant vector".into(),
        ));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive pair counting: (concordant + ties/2) / (pos * neg).
    pub fn auc_pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut concordant = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if i == j || !li || lj {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    concordant += 1.0;
                } else if si == sj {
                    concordant += 0.5;
                }
            }
        }
        concordant / pairs
    }

    #[test]
    fn perfect_and_degenerate_cases() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap(),
            0.5
        );
        assert!(auc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn matches_pair_counting_oracle_on_spec_example() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        let got = auc(&scores, &labels).unwrap();
        assert!((got - auc_pair_oracle(&scores, &labels)).abs() < 1e-15);
        assert!((got - 0.75).abs() < 1e-15);
    }

    #[test]
    fn complement_identity() {
        let scores = [0.3, 0.1, 0.9, 0.9, 0.2, 0.5];
        let labels = [true, false, true, false, false, true];
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc(&scores, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mann_whitney_separated_groups() {
        let low: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
        let high: Vec<f64> = (0..30).map(|i| 1.0 + i as f64 * 0.01).collect();
        let mw = mann_whitney(&low, &high).unwrap();
        assert!(mw.p_less < 1e-6, "p = {}", mw.p_less);
        let mw_rev = mann_whitney(&high, &low).unwrap();
        assert!(mw_rev.p_less > 0.999);
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x * x).collect(); // monotone map
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = a.iter().rev().copied().collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_endpoints() {
        let pts = roc_points(&[0.9, 0.1, 0.6, 0.4], &[true, false, true, false]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }
}
