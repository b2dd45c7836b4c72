//! Hold-until-caught-up smoothing of metric curves across inducing-budget changes.
//!
//! When the budget changes the hyperparameters restart from scratch, so the
//! raw bound usually drops before recovering. The smoothed curve keeps the
//! last pre-transition value until the raw curve gets back to it.

use serde::{Deserialize, Serialize};

/// Relative tolerance for "caught up".
pub const CATCH_UP_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

impl Orientation {
    /// Whether `raw` is at least as good as `held`, up to the tolerance.
    fn reaches(self, raw: f64, held: f64) -> bool {
        let tol = CATCH_UP_REL_TOL * held.abs();
        match self {
            Orientation::HigherIsBetter => raw >= held - tol,
            Orientation::LowerIsBetter => raw <= held + tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub time: f64,
    pub m: usize,
    pub value: f64,
    /// Channels held over the same window as `value` (for example RMSE and NLPD).
    pub companions: Vec<f64>,
}

/// Applies the hold rule to `value` and mirrors the hold onto the companion channels.
///
/// The last point of the series is always reported raw.
pub fn smooth_metric_curve(series: &[CurvePoint], orientation: Orientation) -> Vec<CurvePoint> {
    let mut out: Vec<CurvePoint> = Vec::with_capacity(series.len());
    let mut held: Option<CurvePoint> = None;
    for (i, p) in series.iter().enumerate() {
        let is_last = i + 1 == series.len();
        if let Some(prev) = out.last() {
            if p.m != series[i - 1].m && held.is_none() {
                held = Some(prev.clone());
            }
        }
        let reported = match &held {
            Some(h) if !is_last && !orientation.reaches(p.value, h.value) => CurvePoint {
                time: p.time,
                m: p.m,
                value: h.value,
                companions: h.companions.clone(),
            },
            _ => {
                held = None;
                p.clone()
            }
        };
        out.push(reported);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[(usize, f64)]) -> Vec<CurvePoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, &(m, v))| CurvePoint {
                time: i as f64,
                m,
                value: v,
                companions: vec![v * 10.0],
            })
            .collect()
    }

    fn values(s: &[CurvePoint]) -> Vec<f64> {
        s.iter().map(|p| p.value).collect()
    }

    #[test]
    fn held_across_transition() {
        let s = series(&[(10, -10.0), (10, -12.0), (20, -8.0), (20, -13.0)]);
        let out = smooth_metric_curve(&s, Orientation::LowerIsBetter);
        assert_eq!(values(&out), vec![-10.0, -12.0, -12.0, -13.0]);
        assert_eq!(out[2].companions, vec![-120.0]);
        assert_eq!(out[2].time, 2.0);
    }

    #[test]
    fn no_transitions_is_identity() {
        let s = series(&[(10, 3.0), (10, 1.0), (10, 2.0)]);
        assert_eq!(smooth_metric_curve(&s, Orientation::HigherIsBetter), s);
    }

    #[test]
    fn immediate_catch_up_is_unchanged() {
        let s = series(&[(10, 1.0), (20, 2.0), (50, 3.0), (50, 4.0)]);
        assert_eq!(smooth_metric_curve(&s, Orientation::HigherIsBetter), s);
    }

    #[test]
    fn hold_spans_several_budgets() {
        let s = series(&[(10, 5.0), (20, 1.0), (50, 2.0), (50, 4.9999999), (100, 6.0)]);
        let out = smooth_metric_curve(&s, Orientation::HigherIsBetter);
        assert_eq!(values(&out), vec![5.0, 5.0, 5.0, 4.9999999, 6.0]);
    }

    #[test]
    fn last_point_is_raw() {
        let s = series(&[(10, 5.0), (20, 1.0)]);
        let out = smooth_metric_curve(&s, Orientation::HigherIsBetter);
        assert_eq!(values(&out), vec![5.0, 1.0]);
    }
}
