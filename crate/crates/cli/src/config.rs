//! Run configuration: one TOML document with a table per pipeline stage.
//! Every table and key is optional; unknown keys are rejected. Relative
//! paths are resolved against the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use megloc::forward::Snr;
use megloc::nn::RegType;
use megloc::signal::Correlation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub experiment: ExperimentSection,
    pub timing: TimingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub n_sensors: usize,
    pub sensor_radius: f64,
    pub n_sources: usize,
    pub source_radius: f64,
    pub seed: u64,
    pub lead_field: PathBuf,
    pub sensors_csv: PathBuf,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            n_sensors: 306,
            sensor_radius: 0.12,
            n_sources: 15002,
            source_radius: 0.07,
            seed: 1,
            lead_field: "lead_field.megl".into(),
            sensors_csv: "sensors.csv".into(),
        }
    }
}

/// Pairwise correlation setting: a number, or the string `"random"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrSetting {
    Fixed(f64),
    Named(CorrName),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrName {
    Random,
}

impl CorrSetting {
    pub fn to_correlation(self) -> Correlation {
        match self {
            CorrSetting::Fixed(v) => Correlation::Fixed(v),
            CorrSetting::Named(CorrName::Random) => Correlation::Random,
        }
    }
}

/// SNR in dB; `inf` means noiseless.
pub fn snr_from_db(db: f64) -> Snr {
    Snr::from_f64(db)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_sources: usize,
    pub count: usize,
    pub snr_db: f64,
    pub correlation: CorrSetting,
    pub n_samples: usize,
    pub amplitude: f64,
    pub seed: u64,
    pub path: PathBuf,
    /// Examples generated per write batch.
    pub batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_sources: 1,
            count: 1000,
            snr_db: 10.0,
            correlation: CorrSetting::Named(CorrName::Random),
            n_samples: 1,
            amplitude: 1.0,
            seed: 2,
            path: "data.megd".into(),
            batch: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_sources: usize,
    /// Input samples of a CNN; an MLP always takes one snapshot.
    pub n_samples: usize,
    pub hidden: Vec<usize>,
    pub filters: usize,
    pub taps: usize,
    pub seed: u64,
    pub path: PathBuf,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            n_sources: 1,
            n_samples: 16,
            hidden: megloc::nn::HIDDEN_WIDTHS.to_vec(),
            filters: megloc::nn::CONV_FILTERS,
            taps: megloc::nn::CONV_TAPS,
            seed: 3,
            path: "model.megm".into(),
        }
    }
}

impl ModelConfig {
    pub fn input_samples(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => 1,
            ModelKind::Cnn => self.n_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegName {
    None,
    Tikhonov,
    L1,
}

impl RegName {
    pub fn to_reg_type(self) -> RegType {
        match self {
            RegName::None => RegType::None,
            RegName::Tikhonov => RegType::Tikhonov,
            RegName::L1 => RegType::L1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSource {
    /// Fresh examples generated on the fly from the `[data]` settings.
    Stream,
    /// The dataset file at `data.path`, reshuffled every epoch.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub reg_type: RegName,
    pub reg_weight: f64,
    pub seed: u64,
    pub log_every: usize,
    pub source: TrainSource,
    pub loss_history: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            steps: 0,
            reg_type: RegName::None,
            reg_weight: 0.0,
            seed: 4,
            log_every: 100,
            source: TrainSource::Stream,
            loss_history: "loss.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizerName {
    RapMusic,
    Music,
    Mlp,
    Cnn,
}

impl LocalizerName {
    pub fn uses_model(self) -> bool {
        matches!(self, LocalizerName::Mlp | LocalizerName::Cnn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeConfig {
    pub localizer: LocalizerName,
    pub n_sources: usize,
    /// Index into the dataset at `data.path`, used when no recording is given.
    pub example: usize,
    /// CSV file with one row per sensor and one column per sample.
    pub recording: Option<PathBuf>,
    /// Model file; defaults to `model.path`.
    pub model: Option<PathBuf>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self { localizer: LocalizerName::RapMusic, n_sources: 1, example: 0, recording: None, model: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub localizer: LocalizerName,
    pub model: Option<PathBuf>,
    pub n_sources: usize,
    pub snr_values: Vec<f64>,
    pub correlation_values: Vec<CorrSetting>,
    pub n_samples: usize,
    pub trials: usize,
    pub perturbation_rhos: Vec<f64>,
    pub amplitude: f64,
    pub seed: u64,
    /// Wall-clock localization time in the report; off keeps files reproducible.
    pub record_elapsed: bool,
    pub output: PathBuf,
    pub robustness_output: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            localizer: LocalizerName::RapMusic,
            model: None,
            n_sources: 1,
            snr_values: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 20.0],
            correlation_values: vec![CorrSetting::Fixed(0.0)],
            n_samples: 16,
            trials: 200,
            perturbation_rhos: vec![0.0, 0.05, 0.2],
            amplitude: 1.0,
            seed: 5,
            record_elapsed: false,
            output: "sweep.csv".into(),
            robustness_output: "robustness.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSection {
    pub rap_music: bool,
    pub music: bool,
    /// Model files to time; each runs on the (Q, N) rows its shape fits.
    pub models: Vec<PathBuf>,
    pub q_values: Vec<usize>,
    pub n_samples_values: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            rap_music: true,
            music: false,
            models: Vec::new(),
            q_values: vec![1, 2, 3],
            n_samples_values: vec![1, 16],
            repeats: 20,
            seed: 6,
            output: "timing.csv".into(),
        }
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` to a raw document.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?} is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key {key:?} is malformed"));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| format!("{key}: {part} is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the config file (if any), applies overrides and validates keys.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, String> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
            text.parse::<toml::Table>().map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| e.to_string())
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string(config).unwrap_or_else(|e| format!("# config not serializable: {e}\n"))
}
