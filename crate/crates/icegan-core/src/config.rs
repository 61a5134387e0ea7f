//! Run configuration: corpus source, model dimensions, optimizer settings
//! and loss weights. Defaults reproduce the reference training recipe
//! (lr 1e-3 cosine, batch 16, 100 epochs, the published loss weights).

use crate::capsule::DiscKind;
use crate::error::{Error, Result};
use crate::graph::GrmMode;
use crate::loss::LossWeights;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Toy {
        n_subjects: usize,
        samples_per_subject: usize,
    },
    Manifest {
        path: PathBuf,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Toy {
            n_subjects: 20,
            samples_per_subject: 9,
        }
    }
}

/// Generator family for the ablation grid; `none` trains the
/// discriminator alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenArchCfg {
    None,
    DecoderOnly,
    EncDec,
}

impl std::str::FromStr for GenArchCfg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GenArchCfg::None),
            "decoder_only" | "dcgan" => Ok(GenArchCfg::DecoderOnly),
            "enc_dec" | "encdec" => Ok(GenArchCfg::EncDec),
            other => Err(Error::Config(format!(
                "unknown gen_arch {other:?}, expected none|decoder_only|enc_dec"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelCfg {
    pub channel_plan: Vec<usize>,
    pub noise_dim: usize,
    pub gen_arch: GenArchCfg,
    pub grm_mode: GrmMode,
    pub discriminator: DiscKind,
    pub patch_plan: Vec<usize>,
    pub n_prim: usize,
    pub d_prim: usize,
    pub d_adv: usize,
    pub d_exp: usize,
    pub routing_iters: usize,
    pub cnn_width: usize,
    pub cnn_large_width: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            channel_plan: vec![20, 40, 80, 160, 320, 320],
            noise_dim: 100,
            gen_arch: GenArchCfg::EncDec,
            grm_mode: GrmMode::Grm,
            discriminator: DiscKind::Capsule,
            patch_plan: vec![64, 128, 256, 512],
            n_prim: 8,
            d_prim: 16,
            d_adv: 256,
            d_exp: 32,
            routing_iters: 3,
            cnn_width: 64,
            cnn_large_width: 2600,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimCfg {
    pub lr: f64,
    pub min_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Epochs before synthetic samples join the classification loss.
    pub warmup_epochs: usize,
    /// Fold-level parallelism cap for LOSO evaluation.
    pub jobs: usize,
}

impl Default for OptimCfg {
    fn default() -> Self {
        OptimCfg {
            lr: 1e-3,
            min_lr: 0.0,
            batch: 16,
            epochs: 100,
            seed: 0,
            checkpoint_every: 10,
            warmup_epochs: 10,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub model: ModelCfg,
    pub optim: OptimCfg,
    pub loss: LossWeights,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.channel_plan.len() != 6 {
            return Err(Error::Config(format!(
                "channel_plan needs 6 levels, got {}",
                self.model.channel_plan.len()
            )));
        }
        if self.model.patch_plan.len() != 4 {
            return Err(Error::Config(format!(
                "patch_plan needs 4 layers, got {}",
                self.model.patch_plan.len()
            )));
        }
        if self.optim.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.model.routing_iters == 0 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        if self.loss.m_plus <= self.loss.m_minus {
            return Err(Error::Config(format!(
                "margins must satisfy m_plus > m_minus ({} vs {})",
                self.loss.m_plus, self.loss.m_minus
            )));
        }
        if let CorpusSource::Toy { n_subjects, .. } = self.corpus {
            if n_subjects < 3 {
                return Err(Error::Config("toy corpus needs at least 3 subjects".into()));
            }
        }
        Ok(())
    }

    /// Seed for the deterministic toy corpus stream.
    pub fn corpus_seed(&self) -> u64 {
        crate::rng::derive_seed(self.optim.seed, "corpus")
    }

    /// Seed for the frozen perceptual feature extractor.
    pub fn perceptual_seed(&self) -> u64 {
        crate::rng::derive_seed(self.optim.seed, "perceptual")
    }
}
