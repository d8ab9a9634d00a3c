use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TimeSeriesSample;
use crate::error::{Error, Result};

/// Per-band min-max scaling to `[0, 1]`, fitted once on training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxNormalizer {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl MinMaxNormalizer {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a TimeSeriesSample>) -> Result<Self> {
        let mut mins: Vec<f64> = Vec::new();
        let mut maxs: Vec<f64> = Vec::new();
        for s in samples {
            if mins.is_empty() {
                mins = vec![f64::INFINITY; s.bands()];
                maxs = vec![f64::NEG_INFINITY; s.bands()];
            }
            if s.bands() != mins.len() {
                return Err(Error::Shape(format!(
                    "sample {} has {} bands, expected {}",
                    s.sample_id,
                    s.bands(),
                    mins.len()
                )));
            }
            for (b, row) in s.values.rows().into_iter().enumerate() {
                for &v in row {
                    mins[b] = mins[b].min(v);
                    maxs[b] = maxs[b].max(v);
                }
            }
        }
        if mins.is_empty() {
            return Err(Error::Validation(
                "cannot fit normalizer on zero samples".into(),
            ));
        }
        Ok(MinMaxNormalizer { mins, maxs })
    }

    pub fn identity(bands: usize) -> Self {
        MinMaxNormalizer {
            mins: vec![0.0; bands],
            maxs: vec![1.0; bands],
        }
    }

    fn scale(&self, b: usize) -> f64 {
        let range = self.maxs[b] - self.mins[b];
        if range > 0.0 {
            range
        } else {
            1.0
        }
    }

    pub fn apply_values(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        if values.nrows() != self.mins.len() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} bands, input has {}",
                self.mins.len(),
                values.nrows()
            )));
        }
        let mut out = values.clone();
        for (b, mut row) in out.rows_mut().into_iter().enumerate() {
            let (lo, scale) = (self.mins[b], self.scale(b));
            row.mapv_inplace(|v| (v - lo) / scale);
        }
        Ok(out)
    }

    pub fn apply(&self, sample: &TimeSeriesSample) -> Result<TimeSeriesSample> {
        let mut out = sample.clone();
        out.values = self.apply_values(&sample.values)?;
        Ok(out)
    }

    /// Scale factor from raw units to normalized units for band `b`.
    pub fn unit(&self, b: usize) -> f64 {
        1.0 / self.scale(b)
    }
}
