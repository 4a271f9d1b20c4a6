//! Run configuration: one TOML file whose tables overlay built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use endoreport::decoder::DecoderConfig;
use endoreport::model::{ModelConfig, Stage};
use endoreport::synth::CorpusConfig;
use endoreport::train::TrainConfig;
use endoreport::vision::EncoderConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Tiny,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    /// Decoder positions shared by both stages.
    pub max_seq_len: usize,
    pub max_images: usize,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            max_seq_len: 256,
            max_images: 12,
            init_std: 0.02,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> Result<ModelConfig> {
        let (encoder, mut decoder) = match self.preset {
            Preset::Desk => (EncoderConfig::desk(), DecoderConfig::desk(vocab_size, self.max_seq_len)),
            Preset::Tiny => (EncoderConfig::tiny(), DecoderConfig::tiny(vocab_size)),
            Preset::Base => (EncoderConfig::base(), DecoderConfig::base(vocab_size, self.max_seq_len)),
        };
        decoder.max_seq_len = self.max_seq_len;
        let cfg = ModelConfig {
            encoder,
            decoder,
            max_images: self.max_images,
            init_std: self.init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub max_len: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { max_len: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub generate: GenerateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            generate: GenerateSection::default(),
        }
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies the keys present in `patch` over `base`. Unknown keys and
/// mistyped values are errors.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: toml::Table) -> Result<T> {
    let mut table = toml::Table::try_from(base).context("serializing defaults")?;
    merge(&mut table, patch);
    Ok(table.try_into()?)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let patch: toml::Table = text.parse().context("config is not valid TOML")?;
        let cfg: Self = overlay(&Self::default(), patch)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != Stage::Caption || self.stage2.stage != Stage::Findings {
            bail!("[stage1] and [stage2] must keep stage = 1 and stage = 2");
        }
        if self.generate.max_len == 0 {
            bail!("generate.max_len must be at least 1");
        }
        Ok(())
    }

    /// `--seed` replaces the corpus seed and both training seeds.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.corpus.master_seed = s;
            self.stage1.seed = s;
            self.stage2.seed = s;
        }
        self
    }

    pub fn stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Caption => &self.stage1,
            Stage::Findings => &self.stage2,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = RunConfig::parse("[corpus]\nn_patients = 20\n[stage2]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.corpus.n_patients, 20);
        assert_eq!(cfg.corpus.image_size, 64);
        assert_eq!(cfg.stage2.epochs, 2);
        assert_eq!(cfg.stage2.micro_batch, 1);
        assert_eq!(cfg.stage1, TrainConfig::stage1());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[corpus]\npatients = 20\n").is_err());
        assert!(RunConfig::parse("extra = 1\n").is_err());
        assert!(RunConfig::parse("[stage1]\nstage = 2\n").is_err());
        assert!(RunConfig::parse("[model]\npreset = \"huge\"\n").is_err());
    }

    #[test]
    fn echoed_config_parses_to_itself() {
        let cfg = RunConfig::parse("[stage1]\nmax_updates = 7\n").unwrap().with_seed(Some(3));
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.stage1.max_updates, Some(7));
        assert_eq!(back.stage2.seed, 3);
    }

    #[test]
    fn presets_build_valid_models() {
        for preset in [Preset::Desk, Preset::Tiny] {
            let m = ModelSection {
                preset,
                ..ModelSection::default()
            };
            let cfg = m.build(300).unwrap();
            assert_eq!(cfg.decoder.vocab_size, 300);
            assert_eq!(cfg.decoder.max_seq_len, 256);
        }
    }
}
