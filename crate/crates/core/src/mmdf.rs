//! Sample-level defense combining the original and the clipped model. A
//! sample is flagged when the two models' decisions differ, or when the
//! confidence difference between them is anomalous against a Gaussian null
//! fitted on the clean set; flagged samples receive the clipped model's
//! decision as the corrected label.
//!
//! Classification confidence is the maximum softmax probability. The
//! statistic is original-model confidence minus clipped-model confidence,
//! tested one-sided in the upper tail: a trigger makes the original model
//! anomalously more confident than the clipped one.

use crate::datagen::CleanSet;
use crate::error::{Error, Result};
use crate::network::{BoundVectors, Network};
use crate::tensor::Tensor;
use crate::trainer::argmax;

pub const DEFAULT_THETA: f64 = 0.005;

/// Gaussian null of the confidence-difference statistic on the clean set.
#[derive(Debug, Clone, PartialEq)]
pub struct NullModel {
    pub mean: f64,
    pub std: f64,
    /// Default detection threshold on the p-value.
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagReason {
    Disagreement,
    AnomalousConfidence,
    None,
}

impl FlagReason {
    pub fn label(&self) -> &'static str {
        match self {
            FlagReason::Disagreement => "disagreement",
            FlagReason::AnomalousConfidence => "anomalous_confidence",
            FlagReason::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseVerdict {
    pub final_label: usize,
    pub flagged: bool,
    pub reason: FlagReason,
    pub p_value: f64,
    pub statistic: f64,
    pub original_label: usize,
    pub mitigated_label: usize,
}

/// Max softmax probability of each row of a logit matrix.
fn confidences(logits: &Tensor) -> Vec<f64> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            1.0 / sum // exp(max - max) / sum
        })
        .collect()
}

/// Confidence-difference statistic s(x) = conf_f(x) - conf_f̄(x).
pub fn confidence_stat(net: &Network, bounds: &BoundVectors, x: &Tensor) -> Result<f64> {
    let orig = net.forward(x)?;
    let clip = net.bounded_forward(bounds, x)?;
    Ok(confidences(&orig)[0] - confidences(&clip)[0])
}

/// Fit the Gaussian null on the clean set (sample mean, unbiased std).
pub fn fit_null(net: &Network, bounds: &BoundVectors, clean: &CleanSet) -> Result<NullModel> {
    if clean.len() < 30 {
        return Err(Error::Defense(format!(
            "null fit needs at least 30 clean samples, got {}",
            clean.len()
        )));
    }
    let (batch, _) = clean.batched()?;
    let orig = net.forward(&batch)?;
    let clip = net.bounded_forward(bounds, &batch)?;
    let stats: Vec<f64> = confidences(&orig)
        .iter()
        .zip(confidences(&clip))
        .map(|(a, b)| a - b)
        .collect();
    fit_gaussian(&stats)
}

/// Mean/std fit of raw statistics; exposed for calibration tests.
pub fn fit_gaussian(stats: &[f64]) -> Result<NullModel> {
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if std < 1e-9 {
        return Err(Error::Defense(format!(
            "degenerate null fit: std {std:.3e} (the two models are indistinguishable)"
        )));
    }
    Ok(NullModel { mean, std, theta: DEFAULT_THETA })
}

/// Upper-tail Gaussian p-value Q((s - mean) / std).
pub fn p_value(null: &NullModel, s: f64) -> f64 {
    let z = (s - null.mean) / null.std;
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Verdict for one sample: disagreement flags unconditionally; otherwise an
/// anomalous confidence difference (p < theta) flags; the corrected decision
/// is always the clipped model's label.
pub fn defend(
    net: &Network,
    bounds: &BoundVectors,
    null: &NullModel,
    x: &Tensor,
    theta: f64,
) -> Result<DefenseVerdict> {
    validate_theta(theta)?;
    let orig = net.forward(x)?;
    let clip = net.bounded_forward(bounds, x)?;
    Ok(verdict_from_logits(&orig, &clip, 0, null, theta))
}

/// Batched verdicts, one per sample row.
pub fn defend_batch(
    net: &Network,
    bounds: &BoundVectors,
    null: &NullModel,
    xs: &Tensor,
    theta: f64,
) -> Result<Vec<DefenseVerdict>> {
    validate_theta(theta)?;
    let orig = net.forward(xs)?;
    let clip = net.bounded_forward(bounds, xs)?;
    Ok((0..orig.shape()[0])
        .map(|i| verdict_from_logits(&orig, &clip, i, null, theta))
        .collect())
}

fn validate_theta(theta: f64) -> Result<()> {
    if !(0.0 < theta && theta < 0.5) {
        return Err(Error::Defense(format!("theta must lie in (0, 0.5), got {theta}")));
    }
    Ok(())
}

fn verdict_from_logits(
    orig: &Tensor,
    clip: &Tensor,
    row: usize,
    null: &NullModel,
    theta: f64,
) -> DefenseVerdict {
    let c = orig.shape()[1];
    let o_row = &orig.data()[row * c..(row + 1) * c];
    let m_row = &clip.data()[row * c..(row + 1) * c];
    let original_label = argmax(o_row);
    let mitigated_label = argmax(m_row);
    let stat = row_confidence(o_row) - row_confidence(m_row);
    let p = p_value(null, stat);
    if original_label != mitigated_label {
        DefenseVerdict {
            final_label: mitigated_label,
            flagged: true,
            reason: FlagReason::Disagreement,
            p_value: p,
            statistic: stat,
            original_label,
            mitigated_label,
        }
    } else if p < theta {
        DefenseVerdict {
            final_label: mitigated_label,
            flagged: true,
            reason: FlagReason::AnomalousConfidence,
            p_value: p,
            statistic: stat,
            original_label,
            mitigated_label,
        }
    } else {
        DefenseVerdict {
            final_label: original_label,
            flagged: false,
            reason: FlagReason::None,
            p_value: p,
            statistic: stat,
            original_label,
            mitigated_label,
        }
    }
}

fn row_confidence(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    1.0 / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{split_clean_set, synth_classes, DataGeometry};
    use crate::network::presets;

    /// Bounds tight enough that clipping actually changes the model.
    fn biting_bounds(net: &Network, clean: &CleanSet) -> BoundVectors {
        let mut bounds = net.init_bounds(&clean.all_tensors(), 1.0).unwrap();
        for (_, z) in bounds.entries_mut() {
            for v in z.iter_mut() {
                *v = (*v * 0.6).max(crate::network::EPS_Z);
            }
        }
        bounds
    }

    #[test]
    fn two_point_fit_matches_hand_values() {
        let null = fit_gaussian(&[0.0, 0.1]).unwrap();
        assert!((null.mean - 0.05).abs() < 1e-12);
        assert!((null.std - 0.070710678118654752).abs() < 1e-12);
    }

    #[test]
    fn identical_models_give_a_degenerate_fit() {
        let ds = synth_classes(3, DataGeometry::Vector { dim: 5 }, 20, 4.0, 0).unwrap();
        let (clean, _) = split_clean_set(&ds, 10, 0).unwrap();
        let net = presets::mlp3(5, 3, 1);
        let bounds = BoundVectors::unbounded(&net); // f̄ == f exactly
        let err = fit_null(&net, &bounds, &clean).unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn fit_matches_independent_mean_std_recomputation() {
        let ds = synth_classes(3, DataGeometry::Vector { dim: 5 }, 20, 4.0, 2).unwrap();
        let (clean, _) = split_clean_set(&ds, 12, 0).unwrap();
        let net = presets::mlp3(5, 3, 1);
        let bounds = biting_bounds(&net, &clean);
        let null = fit_null(&net, &bounds, &clean).unwrap();
        let mut stats = Vec::new();
        for (x, _) in clean.labeled() {
            stats.push(confidence_stat(&net, &bounds, x).unwrap());
        }
        let n = stats.len() as f64;
        let mean = stats.iter().sum::<f64>() / n;
        let std =
            (stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((null.mean - mean).abs() < 1e-12);
        assert!((null.std - std).abs() < 1e-12);
    }

    #[test]
    fn p_value_matches_quadrature_oracle() {
        // oracle: trapezoidal integration of the standard normal density
        let upper_tail = |z: f64| {
            let (a, b) = (z, z + 12.0);
            let n = 200_000;
            let h = (b - a) / n as f64;
            let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let mut acc = 0.5 * (pdf(a) + pdf(b));
            for i in 1..n {
                acc += pdf(a + i as f64 * h);
            }
            acc * h
        };
        let null = NullModel { mean: 0.2, std: 0.05, theta: DEFAULT_THETA };
        assert!((p_value(&null, 0.2) - 0.5).abs() < 1e-9);
        let p3 = p_value(&null, 0.2 + 3.0 * 0.05);
        assert!((p3 - upper_tail(3.0)).abs() < 1e-6);
        assert!((p3 - 0.00135).abs() < 2e-5);
        assert!(p_value(&null, -10.0) > 0.999_999);
    }

    #[test]
    fn verdict_rules() {
        let null = NullModel { mean: 0.0, std: 0.1, theta: DEFAULT_THETA };
        // agreement at the null mean: unflagged, original label kept
        let orig = Tensor::new(vec![1, 3], vec![2.0, 0.5, 0.1]).unwrap();
        let v = verdict_from_logits(&orig, &orig, 0, &null, 0.005);
        assert!(!v.flagged);
        assert_eq!(v.reason, FlagReason::None);
        assert_eq!(v.final_label, 0);

        // disagreement flags regardless of p-value
        let clip = Tensor::new(vec![1, 3], vec![0.1, 2.0, 0.5]).unwrap();
        let v = verdict_from_logits(&orig, &clip, 0, &null, 0.005);
        assert!(v.flagged);
        assert_eq!(v.reason, FlagReason::Disagreement);
        assert_eq!(v.final_label, 1);

        // agreement with an anomalously large confidence gap
        let hot = Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        let cool = Tensor::new(vec![1, 3], vec![0.3, 0.2, 0.1]).unwrap();
        let v = verdict_from_logits(&hot, &cool, 0, &null, 0.005);
        assert!(v.flagged);
        assert_eq!(v.reason, FlagReason::AnomalousConfidence);
        assert_eq!(v.final_label, 0); // both argmax to 0; corrected label is the clipped one
    }

    #[test]
    fn lowering_theta_never_adds_flags() {
        let ds = synth_classes(4, DataGeometry::Vector { dim: 6 }, 30, 3.0, 5).unwrap();
        let (clean, rest) = split_clean_set(&ds, 10, 0).unwrap();
        let net = presets::mlp3(6, 4, 3);
        let bounds = biting_bounds(&net, &clean);
        let null = fit_null(&net, &bounds, &clean).unwrap();
        let (batch, _) = rest.batched().unwrap();
        let mut prev = usize::MAX;
        for theta in [0.05, 0.01, 0.005, 0.001] {
            let verdicts = defend_batch(&net, &bounds, &null, &batch, theta).unwrap();
            let flags = verdicts
                .iter()
                .filter(|v| v.reason == FlagReason::AnomalousConfidence)
                .count();
            assert!(flags <= prev, "theta {theta}: {flags} > {prev}");
            prev = flags;
        }
    }

    #[test]
    fn labels_stay_in_range() {
        let ds = synth_classes(3, DataGeometry::Vector { dim: 5 }, 20, 3.0, 1).unwrap();
        let (clean, rest) = split_clean_set(&ds, 10, 0).unwrap();
        let net = presets::mlp3(5, 3, 2);
        let bounds = biting_bounds(&net, &clean);
        let null = fit_null(&net, &bounds, &clean).unwrap();
        for s in rest.samples() {
            let v = defend(&net, &bounds, &null, &s.x, 0.01).unwrap();
            assert!(v.final_label < 3);
            if v.flagged {
                assert_ne!(v.reason, FlagReason::None);
            }
        }
    }
}
