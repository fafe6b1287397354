//! Image quality metrics.

use crate::error::{Error, Result};
use crate::image::Image2D;

use super::Method;

/// SNR values above this are reported as the cap itself (an exact match
/// would be +infinity).
pub const SNR_CAP_DB: f64 = 300.0;

/// Image signal-to-noise ratio in dB:
/// `-10 log10( ||estimate - truth||^2 / ||truth||^2 )`.
pub fn snr_db(estimate: &Image2D, truth: &Image2D) -> Result<f64> {
    if !estimate.same_dims(truth) {
        return Err(Error::DimensionMismatch {
            context: "snr_db",
            expected: format!("{}x{}", truth.width(), truth.height()),
            actual: format!("{}x{}", estimate.width(), estimate.height()),
        });
    }
    let truth_norm2: f64 = truth.values().iter().map(|v| v * v).sum();
    if truth_norm2 <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "truth",
            reason: "zero norm".to_string(),
        });
    }
    let err_norm2 = estimate.squared_distance(truth);
    if err_norm2 == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((-10.0 * (err_norm2 / truth_norm2).log10()).min(SNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetric {
    pub method: Method,
    pub frame: usize,
    pub snr_db: f64,
}

/// Final per-frame SNR for every reconstruction method that ran.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub entries: Vec<FrameMetric>,
}

impl MetricsReport {
    pub fn push(&mut self, method: Method, frame: usize, snr_db: f64) {
        self.entries.push(FrameMetric {
            method,
            frame,
            snr_db,
        });
    }

    pub fn frame_snr(&self, method: Method, frame: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.frame == frame)
            .map(|e| e.snr_db)
    }

    pub fn mean_snr(&self, method: Method) -> Option<f64> {
        let values: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.method == method)
            .map(|e| e.snr_db)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}
