//! Time-series samples, windows, missing-data handling and ingestion.
//!
//! A sample is a `C x T` matrix of band reflectances with one static label
//! attached to a single anchor time step. Everything downstream (training,
//! scoring, relabeling) consumes either whole samples or fixed-length
//! windows cut from them.

mod io;
mod normalize;
pub mod synthetic;

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_sample_set, save_sample_set, SampleFormat};
pub use normalize::MinMaxNormalizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub sample_id: String,
    pub band_names: Vec<String>,
    /// Day stamps, strictly increasing.
    pub timestamps: Vec<i64>,
    /// Band-major `C x T` matrix.
    pub values: Array2<f64>,
    pub anchor_index: usize,
    pub anchor_label: String,
}

impl TimeSeriesSample {
    pub fn new(
        sample_id: impl Into<String>,
        band_names: Vec<String>,
        timestamps: Vec<i64>,
        values: Array2<f64>,
        anchor_index: usize,
        anchor_label: impl Into<String>,
    ) -> Result<Self> {
        let sample = TimeSeriesSample {
            sample_id: sample_id.into(),
            band_names,
            timestamps,
            values,
            anchor_index,
            anchor_label: anchor_label.into(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.sample_id;
        let (c, t) = self.values.dim();
        if c < 2 {
            return Err(Error::Validation(format!(
                "sample {id}: need at least 2 bands, got {c}"
            )));
        }
        if c != self.band_names.len() {
            return Err(Error::Validation(format!(
                "sample {id}: {} band names for {c} rows",
                self.band_names.len()
            )));
        }
        if t != self.timestamps.len() {
            return Err(Error::Validation(format!(
                "sample {id}: {} timestamps for {t} columns",
                self.timestamps.len()
            )));
        }
        if t == 0 {
            return Err(Error::Validation(format!("sample {id}: empty series")));
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "sample {id}: timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        if self.anchor_index >= t {
            return Err(Error::Validation(format!(
                "sample {id}: anchor index {} outside [0, {t})",
                self.anchor_index
            )));
        }
        if let Some(((b, s), _)) = self.values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "sample {id}: non-finite value at band {b}, step {s}"
            )));
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// A contiguous `C x W` slice of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Array2<f64>,
    pub source_sample: String,
    pub start_index: usize,
}

impl Window {
    pub fn new(
        values: Array2<f64>,
        source_sample: impl Into<String>,
        start_index: usize,
    ) -> Result<Self> {
        if !values.ncols().is_multiple_of(2) {
            return Err(Error::Validation("window length must be even".into()));
        }
        Ok(Window {
            values,
            source_sample: source_sample.into(),
            start_index,
        })
    }

    pub fn bands(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Temporal,
    Spectral,
    TemporalSpectral,
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnomalyKind::Temporal => "temporal",
            AnomalyKind::Spectral => "spectral",
            AnomalyKind::TemporalSpectral => "temporal_spectral",
        })
    }
}

/// One ground-truth change over `[start_index, end_index)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub start_index: usize,
    pub end_index: usize,
    pub anomaly_kind: AnomalyKind,
    pub affected_bands: Vec<usize>,
    pub new_label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeLog {
    pub events: Vec<ChangeEvent>,
}

impl ChangeLog {
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut spans: Vec<_> = self
            .events
            .iter()
            .map(|e| (e.start_index, e.end_index))
            .collect();
        spans.sort_unstable();
        for &(a, b) in &spans {
            if a >= b || b > len {
                return Err(Error::Validation(format!(
                    "change event [{a}, {b}) outside [0, {len})"
                )));
            }
        }
        if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(Error::Validation(format!(
                "overlapping change events [{}, {}) and [{}, {})",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
        Ok(())
    }

    /// Per-step ground-truth anomaly flags.
    pub fn anomalous_steps(&self, len: usize) -> Vec<bool> {
        let mut flags = vec![false; len];
        for e in &self.events {
            for f in &mut flags[e.start_index.min(len)..e.end_index.min(len)] {
                *f = true;
            }
        }
        flags
    }

    /// Per-step ground-truth labels given the anchor label.
    pub fn labels(&self, len: usize, anchor_label: &str) -> Vec<String> {
        let mut labels = vec![anchor_label.to_string(); len];
        for e in &self.events {
            for l in &mut labels[e.start_index.min(len)..e.end_index.min(len)] {
                l.clone_from(&e.new_label);
            }
        }
        labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<TimeSeriesSample>,
    #[serde(default)]
    pub change_logs: BTreeMap<String, ChangeLog>,
    pub class_vocabulary: Vec<String>,
}

impl SampleSet {
    pub fn new(
        samples: Vec<TimeSeriesSample>,
        change_logs: BTreeMap<String, ChangeLog>,
        class_vocabulary: Vec<String>,
    ) -> Result<Self> {
        let set = SampleSet {
            samples,
            change_logs,
            class_vocabulary,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Schema("no samples found".into()))?;
        for s in &self.samples {
            s.validate()?;
            if s.band_names != first.band_names {
                return Err(Error::Schema(format!(
                    "sample {} has bands {:?}, expected {:?}",
                    s.sample_id, s.band_names, first.band_names
                )));
            }
            if !self.class_vocabulary.contains(&s.anchor_label) {
                return Err(Error::Schema(format!(
                    "sample {}: anchor label {:?} not in class vocabulary",
                    s.sample_id, s.anchor_label
                )));
            }
        }
        for (id, log) in &self.change_logs {
            let sample = self
                .get(id)
                .ok_or_else(|| Error::Schema(format!("change log for unknown sample {id}")))?;
            log.validate(sample.len())?;
            for e in &log.events {
                if !self.class_vocabulary.contains(&e.new_label) {
                    return Err(Error::Schema(format!(
                        "change log {id}: label {:?} not in class vocabulary",
                        e.new_label
                    )));
                }
                if let Some(&b) = e.affected_bands.iter().find(|&&b| b >= sample.bands()) {
                    return Err(Error::Schema(format!(
                        "change log {id}: band {b} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&TimeSeriesSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn band_names(&self) -> &[String] {
        &self.samples[0].band_names
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_vocabulary.iter().position(|c| c == label)
    }

    /// Ground-truth change log, empty when none was recorded.
    pub fn change_log(&self, sample_id: &str) -> ChangeLog {
        self.change_logs.get(sample_id).cloned().unwrap_or_default()
    }
}

/// Cut windows starting at `0, stride, 2*stride, ...`.
pub fn sliding_windows(
    sample: &TimeSeriesSample,
    window: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let len = sample.len();
    if !window.is_multiple_of(2) {
        return Err(Error::Validation("window length must be even".into()));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Validation(
            "window length and stride must be positive".into(),
        ));
    }
    if window > len {
        return Err(Error::Validation(format!(
            "sample shorter than window ({len} < {window})"
        )));
    }
    Ok((0..=len - window)
        .step_by(stride)
        .map(|start| Window {
            values: sample
                .values
                .slice(s![.., start..start + window])
                .to_owned(),
            source_sample: sample.sample_id.clone(),
            start_index: start,
        })
        .collect())
}

/// Window start indices guaranteeing the last step is covered.
///
/// Same as the strided grid, plus a final window flush with the end when the
/// grid leaves a tail uncovered.
pub fn covering_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > len || stride == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if starts.last().is_none_or(|&s| s + window < len) {
        starts.push(len - window);
    }
    starts
}

/// Fill masked entries by per-band linear interpolation between the nearest
/// observed neighbours; leading/trailing gaps take the nearest observed value.
pub fn interpolate_missing(
    sample: &TimeSeriesSample,
    missing: &Array2<bool>,
) -> Result<TimeSeriesSample> {
    if missing.dim() != sample.values.dim() {
        return Err(Error::Shape(format!(
            "missing mask {:?} vs sample {:?}",
            missing.dim(),
            sample.values.dim()
        )));
    }
    let mut out = sample.clone();
    for (b, (mut row, mask)) in out
        .values
        .rows_mut()
        .into_iter()
        .zip(missing.rows())
        .enumerate()
    {
        let observed: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
            return Err(Error::Validation(format!(
                "band {} ({}) is fully masked",
                b, sample.band_names[b]
            )));
        };
        for i in 0..first {
            row[i] = row[first];
        }
        for i in last + 1..row.len() {
            row[i] = row[last];
        }
        for pair in observed.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let (vlo, vhi) = (row[lo], row[hi]);
            for i in lo + 1..hi {
                let frac = (i - lo) as f64 / (hi - lo) as f64;
                row[i] = vlo + frac * (vhi - vlo);
            }
        }
    }
    Ok(out)
}

/// Keep every `factor`-th observation starting at index 0.
pub fn decimate(
    sample: &TimeSeriesSample,
    factor: usize,
    window: usize,
) -> Result<TimeSeriesSample> {
    if ![2, 4, 8].contains(&factor) {
        return Err(Error::Validation(format!(
            "decimation factor must be one of 2, 4, 8 (got {factor})"
        )));
    }
    let kept: Vec<usize> = (0..sample.len()).step_by(factor).collect();
    if kept.len() < window {
        return Err(Error::Validation(format!(
            "decimated length {} below window length {window}",
            kept.len()
        )));
    }
    let values = sample.values.select(ndarray::Axis(1), &kept);
    let timestamps = kept.iter().map(|&i| sample.timestamps[i]).collect();
    // nearest retained step, ties to the earlier one
    let a = sample.anchor_index;
    let lower = a / factor;
    let anchor = if a - lower * factor > factor / 2 && lower + 1 < kept.len() {
        lower + 1
    } else {
        lower.min(kept.len() - 1)
    };
    TimeSeriesSample::new(
        sample.sample_id.clone(),
        sample.band_names.clone(),
        timestamps,
        values,
        anchor,
        sample.anchor_label.clone(),
    )
}

/// Mask `floor(ratio * T)` whole time steps, never the anchor.
///
/// Steps are taken from a prefix of one seeded permutation, so for a fixed
/// seed a larger ratio masks a superset of a smaller one.
pub fn random_missing_mask(
    sample: &TimeSeriesSample,
    ratio: f64,
    seed: u64,
) -> Result<Array2<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Validation(format!(
            "missing ratio must be in [0, 1), got {ratio}"
        )));
    }
    let len = sample.len();
    let count = (ratio * len as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..len).filter(|&i| i != sample.anchor_index).collect();
    rand::seq::SliceRandom::shuffle(candidates.as_mut_slice(), &mut rng);
    let mut mask = Array2::from_elem(sample.values.dim(), false);
    for &t in candidates.iter().take(count) {
        mask.column_mut(t).fill(true);
    }
    Ok(mask)
}
