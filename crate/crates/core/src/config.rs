//! Run configuration: a TOML file with sections, command-line overrides on
//! top, and a SHA-256 hash of the resolved configuration that every artifact
//! carries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_idx, synth_gaussian, Dataset};
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::nn::model::Architecture;
use crate::nn::optim::AdamConfig;
use crate::schedule::{LogLinearSchedule, DEFAULT_LAMBDA_MAX, DEFAULT_LAMBDA_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub mean: Vec<f64>,
    pub cov_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 8192,
            mean: vec![0.3, -0.2],
            cov_scale: 0.01 * 0.01,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// IDX training file; when absent the synthetic Gaussian is used.
    pub path: Option<PathBuf>,
    /// IDX evaluation file; defaults to the training file.
    pub eval_path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Size of the synthetic evaluation set (drawn with seed + 1).
    pub synthetic_eval_n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            eval_path: None,
            synthetic: SyntheticConfig::default(),
            synthetic_eval_n: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lambda_max: DEFAULT_LAMBDA_MAX,
            lambda_min: DEFAULT_LAMBDA_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Defaults to on for the time-dependent encoders.
    pub counterterm: Option<bool>,
    pub denoiser_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub n_freq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Trainable,
            counterterm: None,
            denoiser_hidden: vec![256, 256],
            encoder_hidden: vec![128, 128],
            n_freq: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            steps: 20_000,
            batch_size: 64,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            log_every: 100,
            checkpoint_every: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_mc: usize,
    /// Evaluate on at most this many datapoints (0 = all).
    pub max_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_mc: 128, max_points: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub n: usize,
    /// Image width and height for grids; inferred from the data when absent.
    pub image_dims: Option<Vec<usize>>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 256,
            n: 64,
            image_dims: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub steps: Option<usize>,
    pub encoder: Option<EncoderKind>,
    pub lambda_max: Option<f64>,
    pub lambda_min: Option<f64>,
    pub counterterm: Option<bool>,
    pub n_mc: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
        }
        if let Some(v) = o.encoder {
            self.model.encoder = v;
        }
        if let Some(v) = o.lambda_max {
            self.schedule.lambda_max = v;
        }
        if let Some(v) = o.lambda_min {
            self.schedule.lambda_min = v;
        }
        if let Some(v) = o.counterterm {
            self.model.counterterm = Some(v);
        }
        if let Some(v) = o.n_mc {
            self.eval.n_mc = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.architecture(1).validate()?;
        self.adam().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if t.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        if self.eval.n_mc == 0 {
            return Err(Error::config("n_mc must be positive"));
        }
        if self.sample.steps == 0 || self.sample.n == 0 {
            return Err(Error::config("sampler steps and n must be positive"));
        }
        let s = &self.data.synthetic;
        if self.data.path.is_none() {
            if s.n == 0 || s.mean.is_empty() || self.data.synthetic_eval_n == 0 {
                return Err(Error::config("synthetic dataset needs n ≥ 1, a nonempty mean and eval points"));
            }
            if !(s.cov_scale >= 0.0) {
                return Err(Error::config("cov_scale must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LogLinearSchedule> {
        LogLinearSchedule::new(self.schedule.lambda_max, self.schedule.lambda_min).map_err(|e| match e {
            Error::Domain(m) => Error::Config(m),
            other => other,
        })
    }

    pub fn counterterm(&self) -> bool {
        self.model.counterterm.unwrap_or(self.model.encoder.default_counterterm())
    }

    pub fn architecture(&self, dim: usize) -> Architecture {
        Architecture {
            dim,
            encoder: self.model.encoder,
            denoiser_hidden: self.model.denoiser_hidden.clone(),
            encoder_hidden: self.model.encoder_hidden.clone(),
            n_freq: self.model.n_freq,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
        }
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Training set as 8-bit pixels.
    pub fn train_data(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => load_idx(p),
            None => {
                let s = &self.data.synthetic;
                Ok(synth_gaussian(s.n, &s.mean, s.cov_scale, s.seed)?.to_pixels())
            }
        }
    }

    /// Evaluation set as 8-bit pixels.
    pub fn eval_data(&self) -> Result<Dataset> {
        match (&self.data.eval_path, &self.data.path) {
            (Some(p), _) | (None, Some(p)) => load_idx(p),
            (None, None) => {
                let s = &self.data.synthetic;
                Ok(synth_gaussian(self.data.synthetic_eval_n, &s.mean, s.cov_scale, s.seed.wrapping_add(1))?
                    .to_pixels())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_file_and_overrides() {
        let mut c = RunConfig::from_toml("seed = 5\n[model]\nencoder = \"nt\"\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.model.encoder, EncoderKind::NonTrainable);
        assert_eq!(c.train.batch_size, 64);
        let h = c.hash();
        c.apply(&Overrides {
            steps: Some(3),
            counterterm: Some(false),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.train.steps, 3);
        assert!(!c.counterterm());
        assert_ne!(c.hash(), h);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[schedule]\nlambda_max = -6.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = 0.0\n").is_err());
        let mut c = RunConfig::default();
        assert!(matches!(
            c.apply(&Overrides {
                lambda_min: Some(20.0),
                ..Default::default()
            }),
            Err(Error::Config(_))
        ));
    }
}
