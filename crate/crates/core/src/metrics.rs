//! Error metrics for intensity estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::EstimateRecord;

/// Intensity bins in knots; the last is open-ended.
pub const VMAX_BINS: [(f64, f64); 4] = [(0.0, 35.0), (35.0, 64.0), (64.0, 96.0), (96.0, f64::INFINITY)];

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("rmse of no samples".into()));
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: f64,
    pub hi: f64,
    pub n_samples: usize,
    /// `None` for an empty bin.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_samples: usize,
    pub rmse_raw: f64,
    pub rmse_blend: f64,
    pub rmse_smooth: Option<f64>,
    /// Binned by best-track intensity, on the blended estimate.
    pub bins: Vec<BinReport>,
}

impl EvalReport {
    /// `truth[i]` is the best-track intensity of `records[i]`.
    pub fn new(split: &str, records: &[EstimateRecord], truth: &[f64]) -> Result<Self> {
        let raw: Vec<f64> = records.iter().map(|r| r.vmax_raw).collect();
        let blend: Vec<f64> = records.iter().map(|r| r.vmax_blend).collect();
        let smooth: Option<Vec<f64>> = records.iter().map(|r| r.vmax_smooth).collect();
        let bins = VMAX_BINS
            .iter()
            .map(|&(lo, hi)| {
                let (p, t): (Vec<f64>, Vec<f64>) = blend
                    .iter()
                    .zip(truth)
                    .filter(|(_, &t)| t >= lo && t < hi)
                    .map(|(&p, &t)| (p, t))
                    .unzip();
                BinReport {
                    lo,
                    hi,
                    n_samples: p.len(),
                    rmse: rmse(&p, &t).ok(),
                }
            })
            .collect();
        Ok(EvalReport {
            split: split.to_string(),
            n_samples: records.len(),
            rmse_raw: rmse(&raw, truth)?,
            rmse_blend: rmse(&blend, truth)?,
            rmse_smooth: smooth.map(|s| rmse(&s, truth)).transpose()?,
            bins,
        })
    }
}
