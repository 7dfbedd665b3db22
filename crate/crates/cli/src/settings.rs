//! Optional TOML config file. Resolution order for every setting is
//! command-line flag, then file, then built-in default.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub latent_dim: Option<usize>,
    pub patch: Option<usize>,
    pub stride: Option<usize>,
    pub toy_width: Option<usize>,
    pub ar_blocks: Option<usize>,
    pub context_rows: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub mask: Option<String>,
    pub directional: Option<String>,
    pub negatives: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub patience: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub subset: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub patience: Option<usize>,
    pub input: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| crate::UsageError(format!("config {}: {e}", path.display())).into())
    }
}

/// Flag, else file value, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
    }

    #[test]
    fn parses_sections() {
        let cfg: FileConfig = toml::from_str(
            "seed = 4\n[pretrain]\nlr = 0.001\nmask = \"top_down\"\n[finetune]\nsubset = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.pretrain.lr, Some(0.001));
        assert_eq!(cfg.finetune.subset, Some(32));
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }
}
