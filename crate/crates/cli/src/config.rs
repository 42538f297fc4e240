//! Run configuration read from TOML. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use fisherjscc::autodiff::Activation;
use fisherjscc::channel::ChannelFamily;
use fisherjscc::data::LabelColumn;
use fisherjscc::models::Architecture;
use fisherjscc::rng::{derive_seed, Label};
use fisherjscc::train::{PsnrRegime, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Rings,
    Blobs,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    /// Rows per class in each split.
    pub per_class: usize,
    /// Radial noise for rings.
    pub noise: f64,
    /// Feature dimension for blobs.
    pub dim: usize,
    /// Per-coordinate spread for blobs.
    pub spread: f64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub delimiter: char,
    pub has_header: bool,
    pub label_column: LabelColumn,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Rings,
            classes: 3,
            per_class: 200,
            noise: 0.15,
            dim: 2,
            spread: 0.5,
            train_path: None,
            test_path: None,
            delimiter: ',',
            has_header: true,
            label_column: LabelColumn::Name("label".into()),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub power: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 4,
            encoder_hidden: vec![32, 32],
            decoder_hidden: vec![32],
            activation: Activation::Relu,
            power: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Channel used for training.
    pub family: ChannelFamily,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            family: ChannelFamily::Awgn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub noise_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub psnr: PsnrRegime,
    pub omit_variance: bool,
    /// Write an intermediate checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda: t.lambda,
            noise_samples: t.noise_samples,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            psnr: t.psnr,
            omit_variance: t.omit_variance,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sweep,
    Taylor,
    Track,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub psnr_grid: Vec<f64>,
    pub families: Vec<ChannelFamily>,
    pub trials: usize,
    /// Monte-Carlo draws per sample for the Taylor check.
    pub mc_samples: usize,
    /// Test PSNRs at which the Taylor check is run.
    pub taylor_psnr: Vec<f64>,
    /// Evaluate on this many evenly spaced test rows (0 = all).
    pub max_samples: usize,
    pub grid_sample: usize,
    pub grid_resolution: usize,
    /// Half-width of the posterior map in noise standard deviations.
    pub grid_extent: f64,
    pub grid_psnr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Sweep,
            psnr_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            families: vec![ChannelFamily::Awgn],
            trials: fisherjscc::experiments::DEFAULT_TRIALS,
            mc_samples: 10_000,
            taylor_psnr: vec![25.0, 20.0, 15.0, 10.0],
            max_samples: 0,
            grid_sample: 0,
            grid_resolution: 33,
            grid_extent: 3.0,
            grid_psnr: 15.0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_toml("").expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if d.classes < 2 {
            return bad(format!("data.classes must be >= 2, got {}", d.classes));
        }
        if d.kind != DataKind::Table && d.per_class == 0 {
            return bad("data.per_class must be >= 1".into());
        }
        if d.kind == DataKind::Table && (d.train_path.is_none() || d.test_path.is_none()) {
            return bad("data.kind = \"table\" needs data.train_path and data.test_path".into());
        }
        if !d.delimiter.is_ascii() {
            return bad(format!("data.delimiter must be a single ASCII character, got {:?}", d.delimiter));
        }
        if self.model.latent_dim == 0 || !(self.model.power > 0.0) {
            return bad("model.latent_dim must be >= 1 and model.power > 0".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        let x = &self.experiment;
        if x.psnr_grid.is_empty() || x.families.is_empty() {
            return bad("experiment.psnr_grid and experiment.families must be nonempty".into());
        }
        if x.trials == 0 {
            return bad("experiment.trials must be >= 1".into());
        }
        if x.mc_samples < fisherjscc::experiments::MIN_TAYLOR_SAMPLES {
            return bad(format!(
                "experiment.mc_samples must be >= {}",
                fisherjscc::experiments::MIN_TAYLOR_SAMPLES
            ));
        }
        Ok(())
    }

    pub fn derived_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, &[Label::Tag(label)])
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            noise_samples: t.noise_samples,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.derived_seed("train"),
            psnr: t.psnr,
            family: self.channel.family,
            omit_variance: t.omit_variance,
        }
    }

    /// Architecture implied by the model section and the data dimensions.
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            latent_dim: self.model.latent_dim,
            classes: self.data.classes,
            encoder_hidden: self.model.encoder_hidden.clone(),
            decoder_hidden: self.model.decoder_hidden.clone(),
            activation: self.model.activation,
            power: self.model.power,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.data.kind, DataKind::Rings);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.model.latent_dim, 4);
    }

    #[test]
    fn misspelled_keys_rejected() {
        for doc in ["sed = 1", "[train]\nlamda = 0.5", "[data]\nkind = \"rings\"\nnoize = 0.1", "[bogus]\n"] {
            assert!(matches!(RunConfig::from_toml(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn psnr_regimes_parse() {
        let c = RunConfig::from_toml("[train]\npsnr = { kind = \"uniform_range\", lo_db = 10.0, hi_db = 25.0 }").unwrap();
        assert_eq!(c.train.psnr, PsnrRegime::UniformRange { lo_db: 10.0, hi_db: 25.0 });
        assert!(RunConfig::from_toml("[train]\npsnr = { kind = \"uniform_range\", lo_db = 20.0, hi_db = 10.0 }").is_err());
        assert!(RunConfig::from_toml("[train]\npsnr = { kind = \"fixed\", db = 5.0, extra = 1 }").is_err());
    }

    #[test]
    fn table_needs_paths() {
        assert!(RunConfig::from_toml("[data]\nkind = \"table\"").is_err());
    }
}
