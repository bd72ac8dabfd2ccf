//! Accuracy and consistency metrics of results against ground truth.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::io::{ResultRow, TrackObservation, TruthRow};

/// 95% quantile of the chi-square distribution with two degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(ErrorStats {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub matched: usize,
    pub unmatched_results: usize,
    pub unmatched_truth: usize,
    /// Pixel error of the estimated mean.
    pub mean_error: ErrorStats,
    /// Pixel error of the visual point, when visual points are known.
    pub visual_error: Option<ErrorStats>,
    pub nees_mean: f64,
    pub nees_per_dof: f64,
    /// Share of correspondences whose NEES falls under the 95% chi-square bound.
    pub nees_within_95: f64,
}

/// Joins results and truth on `(frame, track)`. Visual points come from the
/// results themselves or, failing that, from `visual` observations.
pub fn evaluate(results: &[ResultRow], truth: &[TruthRow], visual: Option<&[TrackObservation]>) -> Result<EvalMetrics> {
    let truth_map: HashMap<(u64, u64), Pixel> = truth.iter().map(|t| ((t.frame, t.track), t.point)).collect();
    let visual_map: HashMap<(u64, u64), Pixel> = visual
        .unwrap_or(&[])
        .iter()
        .map(|o| ((o.frame, o.track), o.point))
        .collect();
    let mut mean_errors = Vec::new();
    let mut visual_errors = Vec::new();
    let mut nees = Vec::new();
    let mut unmatched_results = 0;
    for r in results {
        let Some(t) = truth_map.get(&(r.frame, r.track)) else {
            unmatched_results += 1;
            continue;
        };
        let e = r.mean() - t;
        mean_errors.push(e.norm());
        let cov = r.covariance();
        let n = cov
            .try_inverse()
            .map(|inv| (e.transpose() * inv * e)[(0, 0)])
            .unwrap_or(f64::INFINITY);
        nees.push(n);
        if let Some(v) = r.visual.or_else(|| visual_map.get(&(r.frame, r.track)).copied()) {
            visual_errors.push((v - t).norm());
        }
    }
    let matched = mean_errors.len();
    if matched == 0 {
        return Err(Error::Input(
            "no result shares a (frame, track) id with the ground truth".into(),
        ));
    }
    let nees_mean = nees.iter().sum::<f64>() / matched as f64;
    Ok(EvalMetrics {
        matched,
        unmatched_results,
        unmatched_truth: truth.len() - matched,
        mean_error: ErrorStats::of(&mean_errors).expect("non-empty"),
        visual_error: if visual_errors.len() == matched {
            ErrorStats::of(&visual_errors)
        } else {
            None
        },
        nees_mean,
        nees_per_dof: nees_mean / 2.0,
        nees_within_95: nees.iter().filter(|n| **n <= CHI2_2DOF_95).count() as f64 / matched as f64,
    })
}
