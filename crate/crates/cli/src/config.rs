//! Experiment configuration: a TOML file whose keys are the long flag names
//! with underscores (`block_rows` for `--block-rows`),
//! overridden field by field by whatever is given on the command line.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Fp8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    PerBlock,
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Json => "json",
            OutputFormat::Csv => "csv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PassDirection {
    Forward,
    Backward,
}

/// Every field is optional; each command fills in its own defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Sequence length N.
    #[arg(long)]
    pub seqlen: Option<usize>,
    /// Head dimension d.
    #[arg(long)]
    pub headdim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub causal: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Numeric format: fp16 or fp8.
    #[arg(long, value_enum)]
    pub format: Option<Precision>,
    #[arg(long, value_enum)]
    pub quantization: Option<QuantMode>,
    #[arg(long)]
    pub incoherent: Option<bool>,
    #[arg(long)]
    pub block_rows: Option<usize>,
    #[arg(long)]
    pub block_cols: Option<usize>,
    /// Circular buffer stages s.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Kernel schedule (bench) or simulator preset (simulate).
    #[arg(long)]
    pub schedule: Option<String>,
    /// Output file; relative paths resolve against the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub output_format: Option<OutputFormat>,
    /// Resource model TOML for simulate.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Per-event CSV trace destination for simulate.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub query_tiles: Option<usize>,
    #[arg(long, value_enum)]
    pub direction: Option<PassDirection>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        ExperimentConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text)
            .map_err(|e| CliError::Config(format!("config file: {}", e.to_string().trim_end())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: ExperimentConfig) -> ExperimentConfig {
        let base = self;
        overlay!(base, top; seqlen, headdim, heads, batch, causal, seed, trials, format,
            quantization, incoherent, block_rows, block_cols, stages, schedule, output,
            output_format, model, trace, query_tiles, direction)
    }

    /// Rejects zero counts, naming the field.
    pub fn validate(&self) -> Result<(), CliError> {
        let counts = [
            ("seqlen", self.seqlen),
            ("headdim", self.headdim),
            ("heads", self.heads),
            ("batch", self.batch),
            ("trials", self.trials),
            ("block_rows", self.block_rows),
            ("block_cols", self.block_cols),
            ("stages", self.stages),
            ("query_tiles", self.query_tiles),
        ];
        for (name, v) in counts {
            if v == Some(0) {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let file =
            ExperimentConfig::from_toml_str("seqlen = 256\nheaddim = 32\nformat = \"fp8\"\n")
                .unwrap();
        let flags = ExperimentConfig {
            seqlen: Some(64),
            ..Default::default()
        };
        let c = file.overlay(flags);
        assert_eq!(c.seqlen, Some(64));
        assert_eq!(c.headdim, Some(32));
        assert_eq!(c.format, Some(Precision::Fp8));
    }

    #[test]
    fn unknown_keys_and_zero_counts_rejected() {
        assert!(ExperimentConfig::from_toml_str("seq_len = 3").is_err());
        let c = ExperimentConfig {
            trials: Some(0),
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("trials"));
    }

    #[test]
    fn kebab_values() {
        let c = ExperimentConfig::from_toml_str(
            "quantization = \"per-tensor\"\noutput_format = \"csv\"\ndirection = \"backward\"",
        )
        .unwrap();
        assert_eq!(c.quantization, Some(QuantMode::PerTensor));
        assert_eq!(c.output_format, Some(OutputFormat::Csv));
        assert_eq!(c.direction, Some(PassDirection::Backward));
    }
}
