//! Platt scaling with an explicit operating-point shift, plus logit
//! ensembling across plugins.
//!
//! Per class: (i) sweep validation thresholds for the F1-optimal t*;
//! (ii) fit σ(a·z + b) by Newton maximum likelihood (≤100 iterations,
//! tolerance 1e-8); (iii) re-shift b := −a·t* so the raw operating point
//! maps to calibrated probability 0.5.

use super::metrics::{candidate_thresholds, f1_at};
use crate::{AmcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlattClass {
    pub a: f64,
    pub b: f64,
    /// F1-optimal raw threshold the shift was anchored to.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct PlattParams {
    pub per_class: Vec<PlattClass>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Newton fit of the 2-parameter logistic likelihood.
fn fit_logistic(z: &[f64], y: &[bool]) -> (f64, f64) {
    let (mut a, mut b) = (1.0f64, 0.0f64);
    for _ in 0..100 {
        let (mut g_a, mut g_b) = (0.0f64, 0.0f64);
        let (mut h_aa, mut h_ab, mut h_bb) = (0.0f64, 0.0f64, 0.0f64);
        for (&zi, &yi) in z.iter().zip(y) {
            let p = sigmoid(a * zi + b);
            let r = p - if yi { 1.0 } else { 0.0 };
            let w = (p * (1.0 - p)).max(1e-12);
            g_a += r * zi;
            g_b += r;
            h_aa += w * zi * zi;
            h_ab += w * zi;
            h_bb += w;
        }
        // Levenberg damping keeps the 2×2 solve well posed on separable data
        h_aa += 1e-9;
        h_bb += 1e-9;
        let det = h_aa * h_bb - h_ab * h_ab;
        let da = (g_a * h_bb - g_b * h_ab) / det;
        let db = (g_b * h_aa - g_a * h_ab) / det;
        a -= da;
        b -= db;
        if da.abs().max(db.abs()) < 1e-8 {
            break;
        }
    }
    (a, b)
}

/// Fit one class: F1-optimal threshold, ML slope, intercept shifted so
/// σ(a·t* + b) = 0.5 exactly.
pub fn fit_platt_class(logits: &[f64], labels: &[bool]) -> Result<PlattClass> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(AmcError::Calibration(format!(
            "need equal nonempty logits/labels, got {}/{}",
            logits.len(),
            labels.len()
        )));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(AmcError::Calibration(
            "calibration needs both classes present".into(),
        ));
    }
    let mut best_t = f64::NEG_INFINITY;
    let mut best_f1 = -1.0;
    for t in candidate_thresholds(logits) {
        let f1 = f1_at(logits, labels, t);
        if f1 > best_f1 + 1e-15 {
            best_f1 = f1;
            best_t = t;
        }
    }
    let (a, _) = fit_logistic(logits, labels);
    if a <= 0.0 {
        eprintln!("warning: fitted Platt slope {a} is not positive; ranking will invert");
    }
    Ok(PlattClass {
        a,
        b: -a * best_t,
        threshold: best_t,
    })
}

/// Fit every class of [n][K] validation logits and {0,1}^K labels.
pub fn fit_platt(logits: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<PlattParams> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(AmcError::Calibration("empty or ragged calibration input".into()));
    }
    let k = logits[0].len();
    if logits.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(AmcError::Calibration("ragged calibration input".into()));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let z: Vec<f64> = logits.iter().map(|r| r[c]).collect();
        let y: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        per_class.push(fit_platt_class(&z, &y)?);
    }
    Ok(PlattParams { per_class })
}

/// P'_c = σ(a_c·z_c + b_c).
pub fn apply_calibration(logits: &[f64], params: &PlattParams) -> Result<Vec<f64>> {
    if logits.len() != params.per_class.len() {
        return Err(AmcError::Calibration(format!(
            "{} logits for {} calibrated classes",
            logits.len(),
            params.per_class.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(&params.per_class)
        .map(|(&z, p)| sigmoid(p.a * z + p.b))
        .collect())
}

/// Calibrated logit a_c·z_c + b_c (what the ensemble averages).
pub fn calibrated_logits(logits: &[f64], params: &PlattParams) -> Result<Vec<f64>> {
    if logits.len() != params.per_class.len() {
        return Err(AmcError::Calibration(format!(
            "{} logits for {} calibrated classes",
            logits.len(),
            params.per_class.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(&params.per_class)
        .map(|(&z, p)| p.a * z + p.b)
        .collect())
}

/// Arithmetic mean per class across ensemble members.
pub fn ensemble_logits(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(AmcError::Contract("ensemble needs ≥1 member".into()));
    }
    let k = members[0].len();
    if members.iter().any(|m| m.len() != k) {
        return Err(AmcError::Contract(format!(
            "ragged ensemble member shapes (expected {k} classes each)"
        )));
    }
    Ok((0..k)
        .map(|c| members.iter().map(|m| m[c]).sum::<f64>() / members.len() as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::AmcRng;
    use crate::train::metrics::compute_auroc;

    #[test]
    fn operating_point_maps_to_half() {
        let mut rng = AmcRng::split(1, "platt");
        let z: Vec<f64> = (0..60).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let y: Vec<bool> = z.iter().map(|&v| v + rng.uniform(-1.0, 1.0) > 0.3).collect();
        let p = fit_platt_class(&z, &y).unwrap();
        assert!((sigmoid(p.a * p.threshold + p.b) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn separable_data_reproduces_f1_decisions() {
        let z = [-2.0, -1.5, -1.0, 1.0, 1.5, 2.0];
        let y = [false, false, false, true, true, true];
        let p = fit_platt_class(&z, &y).unwrap();
        for (&zi, &yi) in z.iter().zip(&y) {
            let calibrated = sigmoid(p.a * zi + p.b);
            assert_eq!(calibrated > 0.5, zi > p.threshold);
            assert_eq!(calibrated > 0.5, yi);
        }
    }

    #[test]
    fn symmetric_logits_give_near_zero_intercept() {
        // symmetric around 0 with balanced labels → t* ≈ 0 → b ≈ 0
        let z = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let y = [false, false, false, true, true, true];
        let p = fit_platt_class(&z, &y).unwrap();
        assert!(p.b.abs() < 1e-6, "b = {}", p.b);
    }

    #[test]
    fn identity_params_apply_plain_sigmoid() {
        let params = PlattParams {
            per_class: vec![PlattClass { a: 1.0, b: 0.0, threshold: 0.0 }],
        };
        let p = apply_calibration(&[0.7], &params).unwrap();
        assert!((p[0] - sigmoid(0.7)).abs() < 1e-15);
    }

    #[test]
    fn hand_case_sigma_zero() {
        let params = PlattParams {
            per_class: vec![PlattClass { a: 2.0, b: -1.0, threshold: 0.5 }],
        };
        assert_eq!(apply_calibration(&[0.5], &params).unwrap()[0], 0.5);
    }

    #[test]
    fn calibration_preserves_auroc_and_monotonicity() {
        let mut rng = AmcRng::split(2, "rank");
        let z: Vec<f64> = (0..40).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let y: Vec<bool> = z.iter().map(|&v| v > 0.2 || rng.bernoulli(0.2)).collect();
        let p = fit_platt_class(&z, &y).unwrap();
        assert!(p.a > 0.0);
        let params = PlattParams { per_class: vec![p] };
        let cal: Vec<f64> = z.iter().map(|&v| apply_calibration(&[v], &params).unwrap()[0]).collect();
        assert_eq!(compute_auroc(&z, &y).unwrap(), compute_auroc(&cal, &y).unwrap());
        for i in 1..z.len() {
            if z[i] > z[i - 1] {
                assert!(cal[i] > cal[i - 1]);
            }
        }
    }

    #[test]
    fn single_class_is_calibration_error() {
        assert!(matches!(
            fit_platt_class(&[0.1, 0.2], &[true, true]),
            Err(AmcError::Calibration(_))
        ));
    }

    #[test]
    fn ensemble_mean_oracles() {
        assert!((ensemble_logits(&[vec![0.2], vec![0.4]]).unwrap()[0] - 0.3).abs() < 1e-15);
        // single member is the identity
        assert_eq!(ensemble_logits(&[vec![0.9, -0.1]]).unwrap(), vec![0.9, -0.1]);
        // 10 random members vs an independent mean
        let mut rng = AmcRng::split(3, "ens");
        let members: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let m = ensemble_logits(&members).unwrap();
        for c in 0..3 {
            let direct = members.iter().map(|r| r[c]).sum::<f64>() / 10.0;
            assert!((m[c] - direct).abs() < 1e-15);
        }
        // ragged rejected
        assert!(ensemble_logits(&[vec![0.1], vec![0.1, 0.2]]).is_err());
    }
}
