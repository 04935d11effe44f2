//! The run configuration document.
//!
//! Every key has a default, so an empty file is valid. Unknown keys are
//! rejected and every nested config is validated right after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smcyclegan::data::ToySpec;
use smcyclegan::segmenter::SegTrainConfig;
use smcyclegan::training::TrainConfig;
use smcyclegan::Error;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset root with `domain_a/`, `domain_b/` and optional mask folders.
    pub data_root: Option<PathBuf>,
    /// Segmenter checkpoint used by `train` when masks come from the segmenter.
    pub segmenter_checkpoint: Option<PathBuf>,
    /// Output directory of `train-segmenter`, `train`, `evaluate` and `report`.
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Images are resized to `image_size × image_size` on load.
    pub image_size: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { image_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// `random-conv`, `raw-pixels` or `checkpoint:<path>`.
    pub extractor: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { extractor: "random-conv".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DataSettings,
    pub toy: ToySpec,
    pub segmenter: SegTrainConfig,
    pub train: TrainConfig,
    pub evaluation: EvalSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.data.image_size == 0 {
            return Err(Error::Config("data.image_size must be positive".into()));
        }
        self.toy.validate()?;
        self.segmenter.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Apply `--seed` to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.toy.seed = seed;
        self.segmenter.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lambda, 10.0);
        assert_eq!(cfg.train.pool_size, 3);
        assert_eq!(cfg.segmenter.epochs, 15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[train]\nlamda = 3.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("colour = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn cross_field_invariants_run_at_parse_time() {
        let text = "[train]\nmask_prob_start = 0.9\nmask_prob_end = 0.5\n";
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))));
    }

    #[test]
    fn shipped_toy_config_uses_the_toy_networks() {
        let cfg = RunConfig::parse(include_str!("../../../configs/toy.toml")).unwrap();
        assert_eq!(cfg.train.generator, smcyclegan::networks::GeneratorArch::toy());
        assert_eq!(cfg.train.discriminator, smcyclegan::networks::DiscriminatorArch::toy());
        assert_eq!(cfg.segmenter.arch, smcyclegan::segmenter::UNetArch::toy());
        assert_eq!(cfg.train.epochs * cfg.train.steps_per_epoch.unwrap(), 2000);
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.paths.data_root = Some("data".into());
        cfg.train.steps_per_epoch = Some(7);
        cfg.set_seed(42);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
