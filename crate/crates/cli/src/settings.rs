use std::path::{Path, PathBuf};

use clap::Args;
use miett_core::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

const SECTIONS: [&str; 8] = ["model", "preprocess", "synth", "pretrain", "finetune", "evaluate", "gradcheck", "benchmark"];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct FileTop {
    seed: Option<u64>,
    threads: Option<usize>,
    #[serde(flatten)]
    sections: serde_json::Map<String, Value>,
}

/// Parsed config file: top-level `seed`/`threads` plus one table per section.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    sections: serde_json::Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = crate::read_text(path)?;
        let top: FileTop = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let Some(unknown) = top.sections.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Usage(format!("{}: unknown key or section {unknown:?}", path.display())));
        }
        Ok(ConfigFile { seed: top.seed, threads: top.threads, sections: top.sections })
    }

    /// Overlays the non-null fields of `flags` on `[section]` of the file.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, section: &str, flags: &T) -> Result<T, CliError> {
        let mut merged = self.sections.get(section).cloned().unwrap_or_else(|| Value::Object(Default::default()));
        let Value::Object(base) = &mut merged else {
            return Err(CliError::Usage(format!("[{section}] in the config file must be a table")));
        };
        let Value::Object(over) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? else {
            unreachable!("flag structs serialize to objects");
        };
        for (k, v) in over {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
        serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

/// Model shape; unset fields fall back to the preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Packets per flow.
    #[arg(long)]
    pub packets: Option<usize>,
    /// Tokens per packet, counting the leading [CLS].
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
}

impl ModelArgs {
    pub fn build(&self, default: Preset) -> ModelConfig {
        let base = match self.preset.unwrap_or(default) {
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::full(),
        };
        ModelConfig {
            packets: self.packets.unwrap_or(base.packets),
            len: self.len.unwrap_or(base.len),
            dim: self.dim.unwrap_or(base.dim),
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads.unwrap_or(base.heads),
            mlp_hidden: self.mlp_hidden.unwrap_or(base.mlp_hidden),
            ..base
        }
    }

    /// True when any shape field was given explicitly.
    pub fn any_set(&self) -> bool {
        self.preset.is_some()
            || self.packets.is_some()
            || self.len.is_some()
            || self.dim.is_some()
            || self.layers.is_some()
            || self.heads.is_some()
            || self.mlp_hidden.is_some()
    }
}

/// Optimization settings shared by pretrain and finetune.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    #[serde(alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Glob over parameter names; repeat for several, `none` disables freezing.
    #[arg(long = "freeze")]
    pub freeze: Option<Vec<String>>,
    /// all_rows or real_rows.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// always_mask or bert.
    #[arg(long)]
    pub mask_policy: Option<String>,
    /// Shuffle packet rows for the order-prediction task (true by default).
    #[arg(long)]
    pub shuffle_packets: Option<bool>,
    /// Append one JSON record per step to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Print a step record every this many steps (always the last one).
    #[arg(long)]
    pub log_every: Option<u64>,
}
