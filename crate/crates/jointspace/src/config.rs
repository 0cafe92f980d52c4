//! Run configuration files (TOML).

use std::path::{Path, PathBuf};

use jointspace_core::dataset::CaptionMode;
use jointspace_core::dsp::MelParams;
use jointspace_core::encoders::{EncoderSpec, Encoders};
use jointspace_core::retrieval::ApNorm;
use jointspace_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub audio: EncoderSpec,
    pub text: EncoderSpec,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            audio: EncoderSpec::default_audio(),
            text: EncoderSpec::default_text(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ap_norm: ApNorm,
    /// Center windows instead of seeded random crops.
    pub center_crop: bool,
}

/// One experiment. The top-level `seed` is the single source of randomness;
/// it replaces whatever `train.seed` holds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub caption_mode: CaptionMode,
    pub paths: Paths,
    pub train: TrainConfig,
    pub mel: MelParams,
    pub encoders: EncoderConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.train_manifest,
            &mut cfg.paths.val_manifest,
            &mut cfg.paths.test_manifest,
            &mut cfg.paths.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn encoders(&self) -> Encoders {
        Encoders {
            audio: self.encoders.audio,
            text: self.encoders.text,
            mel: self.mel,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Checks parameters and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.encoders().validate()?;
        for p in [
            &self.paths.train_manifest,
            &self.paths.val_manifest,
            &self.paths.test_manifest,
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
