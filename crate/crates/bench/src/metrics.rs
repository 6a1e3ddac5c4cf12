//! Error and support-recovery metrics.

use serde::{Deserialize, Serialize};
use wave_core::error::WaveError;
use wave_core::model::TrueModel;

/// `‖β̂ − β*‖₂²`.
pub fn squared_error(beta_hat: &[f64], beta_star: &[f64]) -> Result<f64, WaveError> {
    if beta_hat.len() != beta_star.len() {
        return Err(WaveError::Dimension {
            what: "estimate",
            expected: beta_star.len(),
            found: beta_hat.len(),
        });
    }
    Ok(beta_hat.iter().zip(beta_star).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Nonzeros of the estimate are exactly the true support.
    pub exact: bool,
    /// Share of true nonzeros that are estimated nonzero.
    pub tpr: f64,
    /// Share of true zeros that are estimated nonzero.
    pub fpr: f64,
}

/// Support comparison with exact-zero semantics. Rates with an empty
/// denominator are reported as 0.
pub fn selection_metrics(beta_hat: &[f64], truth: &TrueModel) -> Selection {
    assert_eq!(beta_hat.len(), truth.p(), "estimate and truth differ in length");
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut exact = true;
    for (b, s) in beta_hat.iter().zip(&truth.beta_star) {
        let (est, act) = (*b != 0.0, *s != 0.0);
        tp += usize::from(est && act);
        fp += usize::from(est && !act);
        exact &= est == act;
    }
    let active = truth.active_set.len();
    let inactive = truth.p() - active;
    let rate = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    Selection {
        exact,
        tpr: rate(tp, active),
        fpr: rate(fp, inactive),
    }
}

/// Mean and sample standard deviation; `None` for the deviation with
/// fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_error_examples() {
        assert_eq!(squared_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((squared_error(&[0.1, 0.0, 0.0], &[0.0; 3]).unwrap() - 0.01).abs() < 1e-17);
        assert!(squared_error(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn selection_examples() {
        let truth = TrueModel::new(vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let s = selection_metrics(&[2.9, 1.4, 0.0, 0.0, 2.1, 0.0, 0.0, 0.0], &truth);
        assert_eq!(
            s,
            Selection {
                exact: true,
                tpr: 1.0,
                fpr: 0.0
            }
        );
        let s = selection_metrics(&[0.0; 8], &truth);
        assert_eq!((s.exact, s.tpr, s.fpr), (false, 0.0, 0.0));
        let s = selection_metrics(&[2.9, 1.4, 0.0, 0.0, 2.1, 0.0, -0.01, 0.0], &truth);
        assert!(!s.exact);
        assert_eq!(s.fpr, 1.0 / 5.0);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[2.0]), (2.0, None));
    }
}
