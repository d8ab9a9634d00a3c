//! Fused latent features, significance filtering and per-step relabeling.

mod classifier;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{covering_starts, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::vae::HtsVaeModel;

pub use classifier::{argmax, train_classifier, ClassifierHyper, LightweightClassifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Full,
    OnlyEt,
    OnlyEs,
    Raw,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 4] = [
        FeatureMode::Full,
        FeatureMode::OnlyEt,
        FeatureMode::OnlyEs,
        FeatureMode::Raw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Full => "full",
            FeatureMode::OnlyEt => "only_et",
            FeatureMode::OnlyEs => "only_es",
            FeatureMode::Raw => "raw",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown feature mode {s:?} (expected full, only_et, only_es or raw)"
                ))
            })
    }
}

/// Per-step features of a normalized sample, `T x F`.
///
/// Latents are posterior means averaged over all covering windows; each
/// temporal-latent step is repeated twice to reach step resolution.
pub fn fuse_features(
    model: &HtsVaeModel,
    sample: &TimeSeriesSample,
    mode: FeatureMode,
    stride: usize,
) -> Result<Array2<f64>> {
    let len = sample.len();
    if mode == FeatureMode::Raw {
        return Ok(sample.values.t().to_owned());
    }
    let w = model.config.window;
    let starts = covering_starts(len, w, stride);
    if starts.is_empty() {
        return Err(Error::Validation(format!(
            "sample {} shorter than window",
            sample.sample_id
        )));
    }
    let windows: Vec<Array2<f64>> = starts
        .iter()
        .map(|&st| sample.values.slice(s![.., st..st + w]).to_owned())
        .collect();
    let means = model.posterior_means(&windows)?;
    let (dt, ds) = (model.config.temporal_dim, model.config.spectral_dim);
    let mut et = Array2::<f64>::zeros((len, dt));
    let mut es = Array2::<f64>::zeros((len, ds));
    let mut count = vec![0.0; len];
    for (&st, (e_t, e_s)) in starts.iter().zip(&means) {
        for k in 0..w {
            let t = st + k;
            for d in 0..dt {
                et[[t, d]] += e_t[[d, k / 2]];
            }
            for d in 0..ds {
                es[[t, d]] += e_s[[d, k]];
            }
            count[t] += 1.0;
        }
    }
    for t in 0..len {
        et.row_mut(t).mapv_inplace(|v| v / count[t]);
        es.row_mut(t).mapv_inplace(|v| v / count[t]);
    }
    let out = match mode {
        FeatureMode::Full => ndarray::concatenate![ndarray::Axis(1), es, et],
        FeatureMode::OnlyEt => et,
        FeatureMode::OnlyEs => es,
        FeatureMode::Raw => unreachable!(),
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "features of sample {}",
            sample.sample_id
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignificanceConfig {
    /// Fraction of the largest attribution values that count as significant.
    pub top_fraction: f64,
    /// Alternative absolute cut on a step's maximum attribution.
    pub fixed_threshold: Option<f64>,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        SignificanceConfig {
            top_fraction: 0.1,
            fixed_threshold: None,
        }
    }
}

/// Flagged steps whose largest per-cell attribution is among the top
/// fraction of all attribution values in flagged steps, or above the fixed
/// threshold.
pub fn significance_filter(
    attribution: &Array2<f64>,
    flagged: &[bool],
    cfg: &SignificanceConfig,
) -> Result<Vec<bool>> {
    if attribution.ncols() != flagged.len() {
        return Err(Error::Shape(format!(
            "attribution covers {} steps, flags {}",
            attribution.ncols(),
            flagged.len()
        )));
    }
    let mut pool: Vec<f64> = flagged
        .iter()
        .enumerate()
        .filter(|(_, f)| **f)
        .flat_map(|(t, _)| attribution.column(t).to_vec())
        .collect();
    pool.sort_by(|a, b| b.total_cmp(a));
    let cut = if pool.is_empty() {
        f64::INFINITY
    } else {
        let k = ((pool.len() as f64 * cfg.top_fraction).ceil() as usize).clamp(1, pool.len());
        pool[k - 1]
    };
    Ok(flagged
        .iter()
        .enumerate()
        .map(|(t, &f)| {
            if !f {
                return false;
            }
            let peak = attribution
                .column(t)
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            (peak > 0.0 && peak >= cut) || cfg.fixed_threshold.is_some_and(|th| peak > th)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Inherited,
    Relabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicLabelSequence {
    pub sample_id: String,
    pub labels: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub significant_steps: Vec<usize>,
    pub classifier_version: String,
}

/// Anchor label at non-significant steps, classifier argmax elsewhere.
pub fn relabel(
    sample: &TimeSeriesSample,
    flags: &[bool],
    significance: &[bool],
    classifier: &LightweightClassifier,
    features: &Array2<f64>,
) -> Result<DynamicLabelSequence> {
    let len = sample.len();
    if flags.len() != len || significance.len() != len || features.nrows() != len {
        return Err(Error::Shape(format!(
            "sample has {len} steps; flags {}, significance {}, features {}",
            flags.len(),
            significance.len(),
            features.nrows()
        )));
    }
    let predicted = classifier.predict(features)?;
    let mut labels = Vec::with_capacity(len);
    let mut provenance = Vec::with_capacity(len);
    for t in 0..len {
        if significance[t] {
            labels.push(classifier.classes[predicted[t]].clone());
            provenance.push(Provenance::Relabeled);
        } else {
            labels.push(sample.anchor_label.clone());
            provenance.push(Provenance::Inherited);
        }
    }
    Ok(DynamicLabelSequence {
        sample_id: sample.sample_id.clone(),
        labels,
        provenance,
        significant_steps: (0..len).filter(|&t| significance[t]).collect(),
        classifier_version: classifier.version()?,
    })
}

pub fn write_dynamic_json(seq: &DynamicLabelSequence, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(seq)?).map_err(|e| Error::io(path, e))
}

/// `sample_id,time_index,label,provenance`
pub fn write_labels_csv(seqs: &[DynamicLabelSequence], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["sample_id", "time_index", "label", "provenance"])
        .map_err(|e| Error::io(path, e.into()))?;
    for seq in seqs {
        for (t, (label, prov)) in seq.labels.iter().zip(&seq.provenance).enumerate() {
            let prov = match prov {
                Provenance::Inherited => "inherited",
                Provenance::Relabeled => "relabeled",
            };
            w.write_record([seq.sample_id.as_str(), &t.to_string(), label, prov])
                .map_err(|e| Error::io(path, e.into()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "only_es".parse::<FeatureMode>().unwrap(),
            FeatureMode::OnlyEs
        );
        assert!("fused".parse::<FeatureMode>().is_err());
    }

    #[test]
    fn all_zero_attribution_gives_empty_mask() {
        let a = Array2::zeros((3, 5));
        let m = significance_filter(&a, &[true; 5], &SignificanceConfig::default()).unwrap();
        assert!(m.iter().all(|f| !f));
    }

    #[test]
    fn ten_distinct_cells_mark_one_step() {
        // one band, ten flagged steps with distinct values
        let a = Array2::from_shape_fn((1, 12), |(_, t)| t as f64 + 1.0);
        let mut flagged = vec![true; 12];
        flagged[11] = false;
        flagged[10] = false;
        let m = significance_filter(&a, &flagged, &SignificanceConfig::default()).unwrap();
        assert_eq!(m.iter().filter(|f| **f).count(), 1);
        assert!(m[9]);
    }

    #[test]
    fn fixed_threshold_adds_steps() {
        let a = array![[0.5, 2.0, 3.0, 0.1]];
        let cfg = SignificanceConfig {
            top_fraction: 0.1,
            fixed_threshold: Some(1.0),
        };
        let m = significance_filter(&a, &[true, true, true, false], &cfg).unwrap();
        assert_eq!(m, vec![false, true, true, false]);
    }
}
