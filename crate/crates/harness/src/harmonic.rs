//! Least-squares harmonic regression detector used as a sanity baseline.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use tasgen_core::anomaly::AnomalyFlags;
use tasgen_core::data::TimeSeriesSample;

use crate::error::{HarnessError, Result};

/// Per-band fit of `a0 + sum_k (a_k cos(k w t) + b_k sin(k w t))`; a step
/// is flagged when any band's residual exceeds three residual standard
/// deviations. `w` defaults to one cycle over the timestamp range.
pub fn harmonic_baseline_detect(
    sample: &TimeSeriesSample,
    order: usize,
    period_days: Option<f64>,
) -> Result<AnomalyFlags> {
    let len = sample.len();
    if len < 4 * order.max(1) {
        return Err(HarnessError::Validation(format!(
            "series of {len} steps too short for harmonic order {order}"
        )));
    }
    let t0 = sample.timestamps[0] as f64;
    let span = (sample.timestamps[len - 1] as f64 - t0).max(1.0);
    let omega = std::f64::consts::TAU / period_days.unwrap_or(span);
    let cols = 1 + 2 * order;
    let design = DMatrix::from_fn(len, cols, |i, j| {
        let t = sample.timestamps[i] as f64 - t0;
        match j {
            0 => 1.0,
            j => {
                let k = j.div_ceil(2) as f64;
                if j % 2 == 1 {
                    (k * omega * t).cos()
                } else {
                    (k * omega * t).sin()
                }
            }
        }
    });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= smax * 1e-10 {
        return Err(HarnessError::Validation(
            "singular harmonic design matrix".into(),
        ));
    }
    let bands = sample.bands();
    let mut cells = Array2::from_elem((bands, len), false);
    let mut thresholds = Vec::with_capacity(bands);
    for b in 0..bands {
        let y = DVector::from_iterator(len, sample.values.row(b).iter().copied());
        let coef = svd
            .solve(&y, 1e-12)
            .map_err(|e| HarnessError::Validation(format!("harmonic fit failed: {e}")))?;
        let resid = &y - &design * coef;
        let mean = resid.mean();
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
        let cut = 3.0 * sd;
        thresholds.push(cut);
        for t in 0..len {
            cells[[b, t]] = sd > 1e-12 && (resid[t] - mean).abs() > cut;
        }
    }
    let steps = (0..len)
        .map(|t| cells.column(t).iter().any(|&f| f))
        .collect();
    Ok(AnomalyFlags {
        steps,
        cells,
        thresholds,
    })
}
