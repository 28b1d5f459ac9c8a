use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correction::CorrectionConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, OutlierSpec};
use crate::quant::check_bits;
use crate::reassembly::{QuantSetting, ReassemblyConfig, ReassemblyMode, Site};

/// Flat key/value pipeline settings; every key is optional in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub outlier_channels: Vec<usize>,
    pub magnification: f64,

    /// Master seed; model, calibration, evaluation and adapter streams derive from it.
    pub seed: u64,
    pub n_calib: usize,
    pub n_eval: usize,

    pub w_bits: u32,
    pub a_bits: u32,

    pub mode: ReassemblyMode,
    pub gamma: f64,
    pub grid_points: usize,
    pub scope: Vec<Site>,

    pub correction: bool,
    pub rank: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub group_size: usize,

    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/report.json`.
    pub report: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let outliers = OutlierSpec::default_for(model.d_model);
        let reassembly = ReassemblyConfig::default();
        let correction = CorrectionConfig::default();
        Self {
            d_model: model.d_model,
            n_heads: model.n_heads,
            d_ff: model.d_ff,
            n_layers: model.n_layers,
            seq_len: model.seq_len,
            outlier_channels: outliers.channels,
            magnification: outliers.magnification,
            seed: 0,
            n_calib: 16,
            n_eval: 8,
            w_bits: 4,
            a_bits: 4,
            mode: reassembly.mode,
            gamma: reassembly.gamma,
            grid_points: reassembly.grid_points,
            scope: reassembly.scope,
            correction: true,
            rank: correction.rank,
            epochs: correction.epochs,
            batch_size: correction.batch_size,
            lr: correction.lr,
            group_size: correction.group_size,
            out_dir: PathBuf::from("out"),
            report: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.w_bits).map_err(|e| Error::Config(format!("w_bits: {e}")))?;
        check_bits(self.a_bits).map_err(|e| Error::Config(format!("a_bits: {e}")))?;
        self.model_config().validate()?;
        if let Some(&c) = self.outlier_channels.iter().find(|&&c| c >= self.d_model) {
            return Err(Error::Config(format!("outlier channel {c} >= d_model {}", self.d_model)));
        }
        if !(self.magnification > 0.0 && self.magnification.is_finite()) {
            return Err(Error::Config(format!("magnification must be positive, got {}", self.magnification)));
        }
        if self.n_calib == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_calib and n_eval must be >= 1".into()));
        }
        self.reassembly_config().validate()?;
        self.correction_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            seq_len: self.seq_len,
        }
    }

    pub fn outliers(&self) -> OutlierSpec {
        OutlierSpec {
            channels: self.outlier_channels.clone(),
            magnification: self.magnification,
        }
    }

    pub fn reassembly_config(&self) -> ReassemblyConfig {
        ReassemblyConfig {
            mode: self.mode,
            gamma: self.gamma,
            grid_points: self.grid_points,
            scope: self.scope.clone(),
        }
    }

    pub fn correction_config(&self) -> CorrectionConfig {
        CorrectionConfig {
            rank: self.rank,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            group_size: self.group_size,
            seed: self.adapter_seed(),
        }
    }

    pub fn quant_mode(&self) -> Mode {
        Mode::QuantSim {
            w_bits: self.w_bits,
            a_bits: self.a_bits,
        }
    }

    pub fn quant_setting(&self) -> QuantSetting {
        QuantSetting::new(self.w_bits, self.a_bits)
    }

    pub fn model_seed(&self) -> u64 {
        self.seed
    }

    pub fn calib_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn adapter_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| self.out_dir.join("report.json"))
    }
}
