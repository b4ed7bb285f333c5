//! Classification metrics and correlation.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::sqrt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error("no trials to score")]
    Empty,
    #[error("class index {index} outside 0..{classes}")]
    Class { index: usize, classes: usize },
    #[error("pearson correlation needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("pearson correlation is undefined for zero variance")]
    ZeroVariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_f1: Vec<f64>,
}

pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::Length { predictions: predictions.len(), labels: labels.len() });
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        for index in [p, y] {
            if index >= classes {
                return Err(MetricsError::Class { index, classes });
            }
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Accuracy, confusion and per-class F1. A class that appears in neither
/// predictions nor labels scores F1 = 0.
pub fn evaluate(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Metrics, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let confusion = confusion(predictions, labels, classes)?;
    let total = labels.len();
    let trace: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class_f1: Vec<f64> = (0..classes)
        .map(|k| {
            let tp = confusion[k][k];
            let actual: usize = confusion[k].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[k]).sum();
            if actual + predicted == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (actual + predicted) as f64
            }
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / classes.max(1) as f64;
    Ok(Metrics { accuracy: trace as f64 / total as f64, macro_f1, confusion, per_class_f1 })
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::Length { predictions: x.len(), labels: y.len() });
    }
    let n = x.len();
    if n < 2 {
        return Err(MetricsError::TooFewPoints(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / sqrt(sxx * syy)).clamp(-1.0, 1.0))
}
