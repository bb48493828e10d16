//! Ranking and threshold metrics: AUROC (two independent routes), Youden's J
//! threshold selection, and per-class report assembly.

use crate::{AmcError, Result};

fn check_both_classes(labels: &[bool], what: &str) -> Result<()> {
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(AmcError::Contract(format!(
            "{what} needs both classes present ({} labels, all identical)",
            labels.len()
        )));
    }
    Ok(())
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(AmcError::Contract(format!(
            "scores ({}) and labels ({}) must be nonempty and equal length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AmcError::Contract("scores must be finite".into()));
    }
    Ok(())
}

/// Probability a random positive outranks a random negative, ties ½.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    check_both_classes(labels, "AUROC")?;
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
        if !lp {
            continue;
        }
        for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
            if ln || i == j {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / pairs)
}

/// Trapezoidal area under the ROC curve, sweeping score thresholds with tie
/// groups collapsed.
pub fn auroc_trapezoid(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    check_both_classes(labels, "AUROC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let pos_total = labels.iter().filter(|&&l| l).count() as f64;
    let neg_total = labels.len() as f64 - pos_total;
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut area = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let (tpr, fpr) = (tp / pos_total, fp / neg_total);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j;
    }
    Ok(area)
}

/// AUROC; the pairwise and trapezoidal routes agree to 1e-12 (tested).
pub fn compute_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    auroc_pairwise(scores, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub youden_j: f64,
}

fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64, f64) {
    let (mut tp, mut tn, mut pos, mut neg) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos += 1.0;
            if s > threshold {
                tp += 1.0;
            }
        } else {
            neg += 1.0;
            if s <= threshold {
                tn += 1.0;
            }
        }
    }
    let sens = tp / pos;
    let spec = tn / neg;
    let acc = (tp + tn) / (pos + neg);
    (sens, spec, acc)
}

/// Candidate thresholds: midpoints of adjacent distinct scores plus guards
/// below the minimum and above the maximum.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut uniq = scores.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();
    let mut out = vec![uniq[0] - 1.0];
    for w in uniq.windows(2) {
        out.push((w[0] + w[1]) / 2.0);
    }
    out.push(uniq[uniq.len() - 1] + 1.0);
    out
}

/// Threshold maximizing J = sensitivity + specificity − 1; ties broken by
/// higher sensitivity, then lower threshold.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint> {
    check_lengths(scores, labels)?;
    check_both_classes(labels, "Youden threshold")?;
    let mut best: Option<OperatingPoint> = None;
    for t in candidate_thresholds(scores) {
        let (sens, spec, acc) = confusion(scores, labels, t);
        let j = sens + spec - 1.0;
        let cand = OperatingPoint {
            threshold: t,
            sensitivity: sens,
            specificity: spec,
            accuracy: acc,
            youden_j: j,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                j > b.youden_j + 1e-15
                    || ((j - b.youden_j).abs() <= 1e-15
                        && (sens > b.sensitivity + 1e-15
                            || ((sens - b.sensitivity).abs() <= 1e-15 && t < b.threshold)))
            }
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("candidate list nonempty"))
}

/// F1 of "positive when score > threshold".
pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0.0f64, 0.0f64, 0.0f64);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fnn)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub auroc: f64,
    pub operating_point: OperatingPoint,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_auroc: f64,
    pub macro_f1: f64,
}

/// Per-class metrics over [n][K] scores with Youden-selected thresholds.
pub fn metrics_report(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    class_names: &[String],
) -> Result<MetricsReport> {
    let k = class_names.len();
    if scores.len() != labels.len()
        || scores.iter().any(|r| r.len() != k)
        || labels.iter().any(|r| r.len() != k)
    {
        return Err(AmcError::Contract("ragged metric input".into()));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        let auroc = compute_auroc(&s, &l)?;
        let op = youden_threshold(&s, &l)?;
        per_class.push(ClassMetrics {
            class: class_names[c].clone(),
            auroc,
            f1: f1_at(&s, &l, op.threshold),
            operating_point: op,
        });
    }
    let macro_auroc = per_class.iter().map(|c| c.auroc).sum::<f64>() / k as f64;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        per_class,
        macro_auroc,
        macro_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::AmcRng;

    #[test]
    fn auroc_perfect_separation_is_one() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [true, true, false, false];
        assert_eq!(compute_auroc(&s, &l).unwrap(), 1.0);
        assert_eq!(auroc_trapezoid(&s, &l).unwrap(), 1.0);
    }

    #[test]
    fn auroc_hand_oracle() {
        // labels [1,0,1,0], scores [0.9,0.6,0.4,0.2]: pairs (0.9,0.6)+,
        // (0.9,0.2)+, (0.4,0.6)−, (0.4,0.2)+ → 3/4
        let s = [0.9, 0.6, 0.4, 0.2];
        let l = [true, false, true, false];
        assert_eq!(compute_auroc(&s, &l).unwrap(), 0.75);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let s = [0.5; 6];
        let l = [true, false, true, false, false, true];
        assert_eq!(compute_auroc(&s, &l).unwrap(), 0.5);
        assert!((auroc_trapezoid(&s, &l).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auroc_single_class_is_error() {
        assert!(compute_auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn pairwise_and_trapezoid_agree_on_random_sets() {
        let mut rng = AmcRng::split(12, "auroc");
        for _ in 0..1000 {
            let n = 2 + rng.usize_below(40);
            let mut s: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            // inject ties
            for i in 0..n {
                if rng.bernoulli(0.3) {
                    s[i] = (s[i] * 4.0).round() / 4.0;
                }
            }
            let mut l: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
            if l.iter().all(|&x| x) {
                l[0] = false;
            }
            if l.iter().all(|&x| !x) {
                l[0] = true;
            }
            let a = auroc_pairwise(&s, &l).unwrap();
            let b = auroc_trapezoid(&s, &l).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transforms() {
        let mut rng = AmcRng::split(13, "mono");
        let s: Vec<f64> = (0..30).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let l: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let base = compute_auroc(&s, &l).unwrap();
        let cubed: Vec<f64> = s.iter().map(|v| v.powi(3)).collect();
        let affine: Vec<f64> = s.iter().map(|v| 2.5 * v + 0.7).collect();
        assert_eq!(compute_auroc(&cubed, &l).unwrap(), base);
        assert_eq!(compute_auroc(&affine, &l).unwrap(), base);
    }

    #[test]
    fn youden_perfectly_separable() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [true, true, false, false];
        let op = youden_threshold(&s, &l).unwrap();
        assert_eq!(op.youden_j, 1.0);
        assert_eq!(op.sensitivity, 1.0);
        assert_eq!(op.specificity, 1.0);
    }

    #[test]
    fn youden_hand_oracle() {
        // {(0.9,1),(0.6,0),(0.4,1),(0.2,0)}: best J at t∈(0.2,0.4) → 0.3
        let s = [0.9, 0.6, 0.4, 0.2];
        let l = [true, false, true, false];
        let op = youden_threshold(&s, &l).unwrap();
        assert!((op.threshold - 0.3).abs() < 1e-12);
        assert_eq!(op.sensitivity, 1.0);
        assert_eq!(op.specificity, 0.5);
        assert!((op.youden_j - 0.5).abs() < 1e-12);
    }

    #[test]
    fn youden_matches_exhaustive_sweep() {
        let mut rng = AmcRng::split(14, "sweep");
        for _ in 0..200 {
            let n = 2 + rng.usize_below(48);
            let s: Vec<f64> = (0..n).map(|_| (rng.uniform(0.0, 1.0) * 8.0).round() / 8.0).collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
            if l.iter().all(|&x| x) {
                l[0] = false;
            }
            if l.iter().all(|&x| !x) {
                l[0] = true;
            }
            let op = youden_threshold(&s, &l).unwrap();
            // exhaustive: every candidate must score no better
            for t in candidate_thresholds(&s) {
                let (sens, spec, _) = confusion(&s, &l, t);
                assert!(sens + spec - 1.0 <= op.youden_j + 1e-12);
            }
        }
    }

    #[test]
    fn youden_operating_point_scale_invariant() {
        let s = [0.9, 0.6, 0.4, 0.2];
        let l = [true, false, true, false];
        let a = youden_threshold(&s, &l).unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| v * 7.0).collect();
        let b = youden_threshold(&scaled, &l).unwrap();
        assert_eq!(a.sensitivity, b.sensitivity);
        assert_eq!(a.specificity, b.specificity);
    }

    #[test]
    fn report_fields_in_unit_interval() {
        let mut rng = AmcRng::split(15, "report");
        let scores: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        let labels: Vec<Vec<bool>> = (0..40).map(|i| vec![i % 2 == 0, i % 3 == 0]).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let r = metrics_report(&scores, &labels, &names).unwrap();
        for c in &r.per_class {
            for v in [c.auroc, c.f1, c.operating_point.sensitivity, c.operating_point.specificity, c.operating_point.accuracy] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!((0.0..=1.0).contains(&r.macro_auroc));
    }
}
