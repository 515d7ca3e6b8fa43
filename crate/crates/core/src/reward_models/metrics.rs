//! Predictive accuracy metrics.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub log_loss: f64,
    pub auc: f64,
    /// Relative information gain as a fraction; negative when worse than the base rate.
    pub rig: f64,
    pub base_rate: f64,
    pub n: usize,
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

/// `1 - log_loss / H(base_rate)`.
pub fn relative_information_gain(log_loss: f64, base_rate: f64) -> f64 {
    1.0 - log_loss / binary_entropy(base_rate)
}

/// Area under the ROC curve from the rank-sum statistic with mid-ranks for ties.
pub fn auc(labels: &[f64], scores: &[f64]) -> f64 {
    let n = labels.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mid;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count() as f64;
    let n_neg = n as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(y, _)| **y > 0.5).map(|(_, r)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Log loss, AUC and relative information gain. Probabilities are clipped to `[1e-15, 1 - 1e-15]`.
pub fn evaluate_predictions(labels: &[f64], probs: &[f64]) -> Result<PredictionMetrics, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if labels.len() != probs.len() {
        return Err(ModelError::Dimension(format!("{} labels vs {} predictions", labels.len(), probs.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(ModelError::Label(format!("label {y} is not binary")));
    }
    let n = labels.len() as f64;
    let ll = labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    let base = labels.iter().sum::<f64>() / n;
    Ok(PredictionMetrics {
        log_loss: ll,
        auc: auc(labels, probs),
        rig: relative_information_gain(ll, base),
        base_rate: base,
        n: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rig_reproduces_published_value() {
        // Log loss 0.014 at base rate 0.017592.
        let rig = relative_information_gain(0.014, 0.017592);
        assert!((100.0 * rig - 84.18).abs() < 0.005, "{rig}");
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.2, 0.3, 0.4]), 1.0);
        assert_eq!(auc(&[1.0, 1.0, 0.0, 0.0], &[0.1, 0.2, 0.3, 0.4]), 0.0);
        assert_eq!(auc(&[0.0, 1.0, 0.0, 1.0], &[0.5; 4]), 0.5);
        // One tie across classes counts one half.
        assert_eq!(auc(&[0.0, 1.0, 1.0], &[0.2, 0.2, 0.9]), 0.75);
    }

    #[test]
    fn perfect_and_base_rate_predictions() {
        let y = [0.0, 1.0, 0.0, 0.0];
        let r = evaluate_predictions(&y, &[0.25; 4]).unwrap();
        assert!((r.log_loss - binary_entropy(0.25)).abs() < 1e-12);
        assert!(r.rig.abs() < 1e-9);
        let r = evaluate_predictions(&y, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(r.log_loss < 1e-13 && (r.rig - 1.0).abs() < 1e-12);
        assert!(matches!(evaluate_predictions(&[], &[]), Err(ModelError::EmptyInput)));
        assert!(matches!(evaluate_predictions(&[2.0], &[0.5]), Err(ModelError::Label(_))));
    }
}
