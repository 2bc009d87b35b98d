//! Normalized entropy, ROC AUC, NE gain, and the scaling-curve statistics
//! (area under the curve and least-squares slope) used as ROI measures.

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};

/// Predictions are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const PREDICTION_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    predictions: Vec<f64>,
    labels: Vec<f64>,
}

impl EvalBatch {
    pub fn new(predictions: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(CoffeeError::Dimension(format!(
                "{} predictions vs {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if predictions.is_empty() {
            return Err(CoffeeError::InsufficientData("empty evaluation batch".into()));
        }
        if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(CoffeeError::UndefinedMetric(format!("label {y} is not 0 or 1")));
        }
        if let Some(p) = predictions.iter().find(|p| !p.is_finite()) {
            return Err(CoffeeError::UndefinedMetric(format!("prediction {p} is not finite")));
        }
        Ok(EvalBatch {
            predictions,
            labels,
        })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1.0).count()
    }

    fn require_both_classes(&self, metric: &str) -> Result<()> {
        let pos = self.positives();
        if pos == 0 || pos == self.len() {
            return Err(CoffeeError::UndefinedMetric(format!(
                "{metric} needs both classes; batch has {pos} positives out of {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Mean log loss of the predictions divided by the entropy of the empirical
/// click rate. 1.0 means no better than always predicting the base rate;
/// lower is better.
pub fn normalized_entropy(batch: &EvalBatch) -> Result<f64> {
    batch.require_both_classes("normalized entropy")?;
    let n = batch.len() as f64;
    let prior = batch.positives() as f64 / n;
    let log_loss = batch
        .predictions
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PREDICTION_EPS, 1.0 - PREDICTION_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    let prior_entropy = -(prior * prior.ln() + (1.0 - prior) * (1.0 - prior).ln());
    Ok(log_loss / prior_entropy)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed by sorting once and sweeping tie groups, so the
/// count of winning pairs is accumulated exactly.
pub fn roc_auc(batch: &EvalBatch) -> Result<f64> {
    batch.require_both_classes("ROC AUC")?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| batch.predictions[a].total_cmp(&batch.predictions[b]));

    let mut negatives_below = 0.0;
    let mut wins = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = batch.predictions[order[i]];
        let (mut pos, mut neg) = (0.0, 0.0);
        while i < order.len() && batch.predictions[order[i]] == score {
            if batch.labels[order[i]] == 1.0 {
                pos += 1.0;
            } else {
                neg += 1.0;
            }
            i += 1;
        }
        wins += pos * negatives_below + 0.5 * pos * neg;
        negatives_below += neg;
    }
    let pos_total = batch.positives() as f64;
    let neg_total = batch.len() as f64 - pos_total;
    Ok(wins / (pos_total * neg_total))
}

/// Relative NE improvement over a baseline; negative values are regressions.
pub fn ne_gain(baseline_ne: f64, variant_ne: f64) -> f64 {
    (baseline_ne - variant_ne) / baseline_ne
}

/// NE gain (y) against normalized training capacity (x) for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub source: String,
    pub enriched: bool,
    pub points: Vec<(f64, f64)>,
}

impl ScalingCurve {
    pub fn new(source: impl Into<String>, enriched: bool, points: Vec<(f64, f64)>) -> Result<Self> {
        let curve = ScalingCurve {
            source: source.into(),
            enriched,
            points,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(CoffeeError::InsufficientData(format!(
                "scaling curve needs at least 2 points, has {}",
                self.points.len()
            )));
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(CoffeeError::InsufficientData(
                "scaling curve x values must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        ScalingCurve {
            points: self.points.iter().map(|&(x, y)| (x, alpha * y)).collect(),
            ..self.clone()
        }
    }
}

/// Maps raw capacities onto [0, 1] using the sweep's own min and max.
pub fn normalize_capacity(raw: &[f64]) -> Result<Vec<f64>> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.len() < 2 || max <= min {
        return Err(CoffeeError::DegenerateFit(
            "capacity range is empty; cannot normalize".into(),
        ));
    }
    Ok(raw.iter().map(|c| (c - min) / (max - min)).collect())
}

/// Trapezoidal area under the curve divided by its x extent.
pub fn curve_auc(curve: &ScalingCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(CoffeeError::InsufficientData(format!(
            "curve AUC needs at least 2 points, has {}",
            curve.points.len()
        )));
    }
    let area: f64 = curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    let span = curve.points[curve.points.len() - 1].0 - curve.points[0].0;
    if span <= 0.0 {
        return Err(CoffeeError::DegenerateFit("curve has zero x extent".into()));
    }
    Ok(area / span)
}

/// Ordinary least-squares slope of y on x.
pub fn best_fit_slope(curve: &ScalingCurve) -> Result<f64> {
    let n = curve.points.len();
    if n < 2 {
        return Err(CoffeeError::InsufficientData(format!(
            "slope needs at least 2 points, has {n}"
        )));
    }
    let mean_x = curve.points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mean_y = curve.points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = curve.points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CoffeeError::DegenerateFit("all x values identical".into()));
    }
    let sxy: f64 = curve
        .points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(p: &[f64], y: &[f64]) -> EvalBatch {
        EvalBatch::new(p.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn ne_of_prior_predictor_is_one() {
        assert_eq!(normalized_entropy(&batch(&[0.5, 0.5], &[1.0, 0.0])).unwrap(), 1.0);
    }

    #[test]
    fn ne_near_perfect() {
        let b = batch(&[0.99999, 0.99999, 1e-5, 1e-5], &[1.0, 1.0, 0.0, 0.0]);
        assert!(normalized_entropy(&b).unwrap() < 0.001);
    }

    #[test]
    fn ne_hand_computed() {
        // mean log loss = (ln(1/0.9) + ln(1/0.8)) / 2 over the symmetric pairs;
        // prior 0.5 has entropy ln 2.
        let b = batch(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]);
        let expected = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0 / std::f64::consts::LN_2;
        assert!((normalized_entropy(&b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined() {
        let b = batch(&[0.3, 0.4], &[1.0, 1.0]);
        assert!(matches!(normalized_entropy(&b), Err(CoffeeError::UndefinedMetric(_))));
        assert!(matches!(roc_auc(&b), Err(CoffeeError::UndefinedMetric(_))));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&batch(&[0.9, 0.1, 0.8, 0.2], &[1.0, 0.0, 1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(roc_auc(&batch(&[0.4; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])).unwrap(), 0.5);
        assert_eq!(roc_auc(&batch(&[0.9, 0.8, 0.3, 0.2], &[1.0, 0.0, 1.0, 0.0])).unwrap(), 0.75);
    }

    #[test]
    fn ne_gain_signs() {
        assert_eq!(ne_gain(0.5, 0.5), 0.0);
        assert!((ne_gain(0.5, 0.45) - 0.1).abs() < 1e-15);
        assert!((ne_gain(0.5, 0.55) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn curve_statistics() {
        let flat = ScalingCurve::new("x", false, vec![(0.0, 0.3), (0.4, 0.3), (1.0, 0.3)]).unwrap();
        assert!((curve_auc(&flat).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(best_fit_slope(&flat).unwrap(), 0.0);
        let line = ScalingCurve::new("x", false, vec![(0.0, 0.0), (0.5, 1.0), (1.0, 2.0)]).unwrap();
        assert_eq!(curve_auc(&line).unwrap(), 1.0);
        assert_eq!(best_fit_slope(&line).unwrap(), 2.0);

        let short = ScalingCurve {
            source: "x".into(),
            enriched: false,
            points: vec![(0.0, 1.0)],
        };
        assert!(matches!(curve_auc(&short), Err(CoffeeError::InsufficientData(_))));
        let vertical = ScalingCurve {
            source: "x".into(),
            enriched: false,
            points: vec![(0.5, 1.0), (0.5, 2.0)],
        };
        assert!(matches!(best_fit_slope(&vertical), Err(CoffeeError::DegenerateFit(_))));
        assert!(ScalingCurve::new("x", false, vec![(0.0, 1.0), (0.0, 2.0)]).is_err());
    }

    #[test]
    fn capacity_normalization() {
        assert_eq!(normalize_capacity(&[10.0, 20.0, 30.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(normalize_capacity(&[5.0, 5.0]).is_err());
    }
}
