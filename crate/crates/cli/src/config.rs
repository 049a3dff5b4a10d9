use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mcvi_core::net::NetConfig;
use mcvi_core::partition::PartitionConfig;
use mcvi_core::spectral::DEFAULT_BINS;
use mcvi_core::ssl::VICRegConfig;
use mcvi_core::synthgen::DatasetConfig;
use mcvi_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureConfig {
    pub bins: usize,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    /// Heatmap opacity in the overlay image.
    pub alpha: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub vi_cache: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every setting a subcommand may read. Configs are merged key by key over
/// the defaults, so a file only needs the keys it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: DatasetConfig,
    pub texture: TextureConfig,
    pub partition: PartitionConfig,
    pub net: NetConfig,
    pub vicreg: VICRegConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn defaults(desk_scale: bool) -> Self {
        let (synth, vicreg) = if desk_scale {
            (DatasetConfig::desk_scale(), VICRegConfig::desk_scale())
        } else {
            (DatasetConfig::default(), VICRegConfig::default())
        };
        Self {
            seed: 0,
            paths: Paths::default(),
            synth,
            texture: TextureConfig::default(),
            partition: PartitionConfig::default(),
            net: NetConfig::default(),
            vicreg,
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
        }
    }

    /// Defaults overlaid with the JSON file at `path`, if any. The flag is
    /// set when the file fixes the fine-tuning learning rate itself.
    pub fn load(path: Option<&Path>, desk_scale: bool) -> Result<(Self, bool)> {
        let mut base = serde_json::to_value(Self::defaults(desk_scale))?;
        let mut lr_explicit = false;
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            lr_explicit = overlay.pointer("/train/lr").is_some();
            merge(&mut base, overlay);
        }
        Ok((serde_json::from_value(base).context("invalid config")?, lr_explicit))
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join("config_effective.json"), text)?;
        Ok(())
    }
}

/// Recursive object merge; non-object values in `overlay` replace `base`.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
