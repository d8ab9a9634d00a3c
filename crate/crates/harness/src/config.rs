//! Pipeline configuration and the standard synthetic fixture.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tasgen_core::anomaly::{DetectionConfig, GibbsConfig};
use tasgen_core::data::synthetic::{ClassTemplate, EventSpec, ScenarioConfig};
use tasgen_core::data::AnomalyKind;
use tasgen_core::embedding::ModelConfig;
use tasgen_core::relabel::{ClassifierHyper, FeatureMode, SignificanceConfig};
use tasgen_core::vae::TrainingHyper;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    /// Existing sample set; mutually exclusive with `scenario`.
    pub path: Option<PathBuf>,
    /// `csv_dir` or `single_json`.
    pub format: Option<String>,
    pub scenario: Option<ScenarioConfig>,
}

/// Network sizes; band count comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub temporal_dim: usize,
    /// Defaults to half the band count.
    pub spectral_dim: Option<usize>,
    pub conv_hidden: usize,
    pub gru_hidden: usize,
    pub posterior_hidden: usize,
    pub prior_hidden: usize,
    pub head_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::new(6, 30);
        ArchConfig {
            temporal_dim: m.temporal_dim,
            spectral_dim: None,
            conv_hidden: m.conv_hidden,
            gru_hidden: m.gru_hidden,
            posterior_hidden: m.posterior_hidden,
            prior_hidden: m.prior_hidden,
            head_hidden: m.head_hidden,
            flow_layers: m.flow_layers,
            flow_hidden: m.flow_hidden,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, bands: usize, window: usize) -> ModelConfig {
        let base = ModelConfig::new(bands, window);
        ModelConfig {
            temporal_dim: self.temporal_dim,
            spectral_dim: self.spectral_dim.unwrap_or(base.spectral_dim),
            conv_hidden: self.conv_hidden,
            gru_hidden: self.gru_hidden,
            posterior_hidden: self.posterior_hidden,
            prior_hidden: self.prior_hidden,
            head_hidden: self.head_hidden,
            flow_layers: self.flow_layers,
            flow_hidden: self.flow_hidden,
            ..base
        }
    }
}

/// Which windows train the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSelection {
    /// Per-class detectors use windows lying within this many steps of the
    /// anchor.
    pub detector_radius: usize,
    pub detector_stride: usize,
    /// The shared feature model uses windows from the whole series.
    pub feature_stride: usize,
    pub curation_epochs: usize,
}

impl Default for WindowSelection {
    fn default() -> Self {
        WindowSelection {
            detector_radius: 46,
            detector_stride: 2,
            feature_stride: 8,
            curation_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub stride: usize,
    /// Monte Carlo draws `L`.
    pub draws: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            stride: 5,
            draws: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    pub feature_mode: FeatureMode,
    pub feature_stride: usize,
    pub significance: SignificanceConfig,
    pub classifier: ClassifierHyper,
    /// Also evaluate every feature mode.
    pub ablation: bool,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        RelabelConfig {
            feature_mode: FeatureMode::Full,
            feature_stride: 5,
            significance: SignificanceConfig::default(),
            classifier: ClassifierHyper::default(),
            ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub arch: ArchConfig,
    pub training: TrainingHyper,
    pub windows: WindowSelection,
    pub scoring: ScoringConfig,
    pub detection: DetectionConfig,
    pub gibbs: GibbsConfig,
    pub relabel: RelabelConfig,
    /// Protocol names such as `full`, `decimate:2`, `missing:0.3`.
    pub robustness: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataSource::default(),
            output_dir: PathBuf::from("tasgen-out"),
            seed: 0,
            arch: ArchConfig::default(),
            training: TrainingHyper::default(),
            windows: WindowSelection::default(),
            scoring: ScoringConfig::default(),
            detection: DetectionConfig::default(),
            gibbs: GibbsConfig::default(),
            relabel: RelabelConfig::default(),
            robustness: Vec::new(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Validation(msg.into())
}

impl PipelineConfig {
    /// Read a `.json` or `.toml` config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let parsed: std::result::Result<Self, String> =
            match path.extension().and_then(|e| e.to_str()) {
                Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
                _ => serde_json::from_str(&text).map_err(|e| e.to_string()),
            };
        parsed.map_err(|msg| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| HarnessError::io(path, e))
    }

    pub fn window(&self) -> usize {
        self.training.window
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.training.window;
        if w == 0 || !w.is_multiple_of(2) {
            return Err(invalid(format!(
                "window length must be even and positive, got {w}"
            )));
        }
        self.training.validate()?;
        match (&self.data.path, &self.data.scenario) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "data.path and data.scenario are mutually exclusive",
                ))
            }
            (None, None) => return Err(invalid("either data.path or data.scenario is required")),
            (None, Some(s)) => {
                s.validate()?;
                if s.steps < w {
                    return Err(invalid(format!(
                        "scenario has {} steps, shorter than window {w}",
                        s.steps
                    )));
                }
            }
            (Some(_), None) => {
                if let Some(f) = &self.data.format {
                    f.parse::<tasgen_core::data::SampleFormat>()?;
                }
            }
        }
        self.arch.model_config(2, w).validate()?;
        let strides = [
            ("windows.detector_stride", self.windows.detector_stride),
            ("windows.feature_stride", self.windows.feature_stride),
            ("scoring.stride", self.scoring.stride),
            ("relabel.feature_stride", self.relabel.feature_stride),
        ];
        for (name, s) in strides {
            if s == 0 || s > w {
                return Err(invalid(format!("{name} must lie in [1, window], got {s}")));
            }
        }
        if self.scoring.draws == 0 || self.gibbs.score_draws == 0 {
            return Err(invalid("Monte Carlo draw counts must be positive"));
        }
        let q = self.detection.quantile;
        if !(q > 0.0 && q < 1.0) {
            return Err(invalid(format!(
                "detection.quantile must lie in (0, 1), got {q}"
            )));
        }
        let f = self.relabel.significance.top_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid(format!(
                "significance.top_fraction must lie in (0, 1], got {f}"
            )));
        }
        if self.relabel.classifier.hidden == 0 || self.relabel.classifier.batch_size == 0 {
            return Err(invalid(
                "classifier hidden width and batch size must be positive",
            ));
        }
        for p in &self.robustness {
            crate::robustness::Protocol::parse(p)?;
        }
        Ok(())
    }

    /// Copy with the output directory replaced by `.`, as stored inside the
    /// artifact directory.
    pub fn relocated(&self) -> PipelineConfig {
        PipelineConfig {
            output_dir: PathBuf::from("."),
            ..self.clone()
        }
    }

    /// Stable hash of the serialized config, independent of where the
    /// artifacts are written.
    pub fn hash(&self) -> Result<String> {
        Ok(crate::artifacts::sha256_hex(
            serde_json::to_string(&self.relocated())?.as_bytes(),
        ))
    }
}

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

/// Three land-cover classes over six bands, 368 steps at 4-day spacing.
///
/// The crops peak in NIR and differ in season count and band levels.
/// `forest` is dark in the visible bands with a nearly flat season.
pub fn standard_scenario() -> ScenarioConfig {
    // soil background plus a class-specific vegetation signature
    let vis = std::f64::consts::PI;
    let crop_phase = vec![vis, vis, vis, 0.0, vis, vis];
    let template = |name: &str, offset: [f64; 6], amplitude: [f64; 6], cycles: f64| ClassTemplate {
        name: name.into(),
        amplitude: amplitude.to_vec(),
        phase: crop_phase.clone(),
        offset: offset.to_vec(),
        cycles,
    };
    let single = template(
        "single_crop",
        [0.065, 0.09, 0.085, 0.35, 0.22, 0.14],
        [0.015, 0.01, 0.035, 0.15, 0.04, 0.04],
        1.0,
    );
    let double = template(
        "double_crop",
        [0.08, 0.105, 0.11, 0.33, 0.23, 0.16],
        [0.01, 0.005, 0.03, 0.11, 0.07, 0.06],
        2.0,
    );
    let forest = template(
        "forest",
        [0.03, 0.05, 0.03, 0.33, 0.15, 0.07],
        [0.005, 0.005, 0.005, 0.03, 0.01, 0.005],
        1.0,
    );
    let ev = |sample: usize,
              start: usize,
              end: usize,
              kind: AnomalyKind,
              bands: &[usize],
              magnitude: f64,
              label: Option<&str>| EventSpec {
        sample,
        start,
        end,
        kind,
        bands: bands.to_vec(),
        magnitude,
        new_label: label.map(str::to_string),
    };
    use AnomalyKind::*;
    ScenarioConfig {
        bands: s(&["Blue", "Green", "Red", "NIR", "SWIR1", "SWIR2"]),
        steps: 368,
        classes: vec![single, double, forest],
        noise_sigma: 0.005,
        events: vec![
            ev(1, 30, 90, Temporal, &[3], 0.06, None),
            ev(10, 260, 340, Temporal, &[0, 1], -0.03, None),
            ev(22, 250, 320, Temporal, &[4, 5], 0.04, None),
            ev(43, 40, 110, Temporal, &[2], 0.03, None),
            ev(5, 20, 100, Spectral, &[3], 0.0, None),
            ev(14, 30, 110, Spectral, &[1, 4], 0.0, None),
            ev(27, 240, 330, Spectral, &[3], 0.0, None),
            ev(46, 250, 340, Spectral, &[3], 0.0, None),
            ev(3, 250, 350, TemporalSpectral, &[], 0.0, Some("double_crop")),
            ev(8, 40, 120, TemporalSpectral, &[], 0.0, Some("forest")),
            ev(24, 20, 110, TemporalSpectral, &[], 0.0, Some("single_crop")),
            ev(
                50,
                240,
                330,
                TemporalSpectral,
                &[],
                0.0,
                Some("single_crop"),
            ),
        ],
        seed: 7,
        samples_per_class: 20,
        day_spacing: 4,
        period: 92.0,
        anchor_index: None,
    }
}

/// Pipeline settings used for the standard fixture.
pub fn standard_config(output_dir: impl Into<PathBuf>) -> PipelineConfig {
    PipelineConfig {
        data: DataSource {
            scenario: Some(standard_scenario()),
            ..Default::default()
        },
        output_dir: output_dir.into(),
        seed: 7,
        arch: ArchConfig {
            conv_hidden: 16,
            gru_hidden: 16,
            posterior_hidden: 16,
            prior_hidden: 16,
            ..ArchConfig::default()
        },
        relabel: RelabelConfig {
            ablation: true,
            significance: SignificanceConfig {
                fixed_threshold: Some(1.0),
                ..SignificanceConfig::default()
            },
            ..RelabelConfig::default()
        },
        training: TrainingHyper {
            freeze_curation: true,
            ..TrainingHyper::default()
        },
        detection: DetectionConfig {
            min_run: 3,
            ..DetectionConfig::default()
        },
        robustness: s(&[
            "full",
            "decimate:2",
            "decimate:4",
            "decimate:8",
            "missing:0.1",
            "missing:0.3",
            "missing:0.5",
        ]),
        ..PipelineConfig::default()
    }
}
