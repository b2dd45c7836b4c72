//! Test-set error metrics.

use std::f64::consts::PI;

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions for {1} targets")]
    LengthMismatch(usize, usize),
    #[error("predictive variance at index {index} is {value}, not positive")]
    NonPositiveVariance { index: usize, value: f64 },
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b || a == 0 {
        return Err(MetricError::LengthMismatch(a, b));
    }
    Ok(())
}

/// Root-mean-square error.
pub fn rmse(pred_mean: &DVector<f64>, y: &DVector<f64>) -> Result<f64, MetricError> {
    check_lengths(pred_mean.len(), y.len())?;
    let sse: f64 = pred_mean.iter().zip(y.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Mean negative log predictive density under independent Gaussians.
pub fn nlpd(pred_mean: &DVector<f64>, pred_var: &DVector<f64>, y: &DVector<f64>) -> Result<f64, MetricError> {
    check_lengths(pred_mean.len(), y.len())?;
    check_lengths(pred_var.len(), y.len())?;
    let mut total = 0.0;
    for (i, ((mu, v), t)) in pred_mean.iter().zip(pred_var.iter()).zip(y.iter()).enumerate() {
        if !(*v > 0.0) {
            return Err(MetricError::NonPositiveVariance { index: i, value: *v });
        }
        total += 0.5 * (2.0 * PI * v).ln() + (t - mu) * (t - mu) / (2.0 * v);
    }
    Ok(total / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(rmse(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 1.0);
        assert!((rmse(&v(&[1.0, 2.0]), &v(&[2.0, 4.0])).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn nlpd_examples() {
        let y = v(&[0.3, -1.0]);
        let base = nlpd(&y, &v(&[1.0, 1.0]), &y).unwrap();
        assert!((base - 0.918_938_533_204_672_7).abs() < 1e-15);
        let doubled = nlpd(&y, &v(&[2.0, 2.0]), &y).unwrap();
        assert!((doubled - base - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            nlpd(&y, &v(&[1.0, 0.0]), &y),
            Err(MetricError::NonPositiveVariance { index: 1, .. })
        ));
    }
}
