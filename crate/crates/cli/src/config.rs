//! Run configuration: TOML file + `--set section.key=value` overrides.
//!
//! Every section rejects unknown keys, and the fully resolved configuration
//! is echoed into each output directory so a run can be reproduced from its
//! artifacts alone.

use std::path::Path;

use mridiff_core::denoiser::DenoiserConfig;
use mridiff_core::error::{Error, Result};
use mridiff_core::io::CoilMode;
use mridiff_core::kspace::default_acs_lines;
use mridiff_core::sampler::{SampleConfig, StepRule};
use mridiff_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; all randomness in a run derives from it.
    pub seed: u64,
    pub datagen: DatagenSection,
    pub denoiser: DenoiserSection,
    pub trainer: TrainerSection,
    pub sampler: SamplerSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            datagen: DatagenSection::default(),
            denoiser: DenoiserSection::default(),
            trainer: TrainerSection::default(),
            sampler: SamplerSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSection {
    pub h: usize,
    pub w: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub accel: usize,
    /// `"single"` or `"multiN"` (e.g. `"multi4"`).
    pub coil_mode: String,
    /// Fully-sampled center rows; derived from height when omitted.
    pub acs_lines: Option<usize>,
    pub n_ellipses: usize,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            n_train: 64,
            n_valid: 16,
            accel: 4,
            coil_mode: "single".into(),
            acs_lines: None,
            n_ellipses: 6,
        }
    }
}

impl DatagenSection {
    pub fn coil_mode(&self) -> Result<CoilMode> {
        CoilMode::parse(&self.coil_mode)
    }

    pub fn acs_lines(&self) -> usize {
        self.acs_lines.unwrap_or_else(|| default_acs_lines(self.h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub base_channels: usize,
    pub depth: usize,
    pub channel_multipliers: Vec<usize>,
    pub n_rrdb: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            channel_multipliers: vec![1, 1, 2],
            n_rrdb: 2,
            time_embed_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    /// Diffusion steps the model is trained against.
    pub t_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub augment: bool,
    pub plateau_patience: Option<usize>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            t_steps: 50,
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            augment: true,
            plateau_patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub t_infer: usize,
    pub rounds: usize,
    pub step_rule: StepRule,
    pub clamp_output: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            t_infer: 50,
            rounds: 4,
            step_rule: StepRule::Corrected,
            clamp_output: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub write_csv: bool,
    pub write_summary: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            write_csv: true,
            write_summary: true,
        }
    }
}

impl RunConfig {
    /// Architecture for the current profile.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.denoiser.base_channels,
            depth: self.denoiser.depth,
            channel_multipliers: self.denoiser.channel_multipliers.clone(),
            n_rrdb: self.denoiser.n_rrdb,
            time_embed_dim: self.denoiser.time_embed_dim,
            t_max: self.trainer.t_steps,
            in_h: self.datagen.h,
            in_w: self.datagen.w,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.trainer.epochs,
            batch_size: self.trainer.batch_size,
            lr: self.trainer.lr,
            weight_decay: self.trainer.weight_decay,
            grad_clip: self.trainer.grad_clip,
            seed: self.seed,
            augment: self.trainer.augment,
            plateau_patience: self.trainer.plateau_patience,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            t_infer: self.sampler.t_infer,
            rounds: self.sampler.rounds,
            step_rule: self.sampler.step_rule,
            clamp_output: self.sampler.clamp_output,
        }
    }

    /// Load from an optional file, then apply `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse()
                    .map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        table
            .try_into()
            .map_err(|e| Error::invalid(format!("config: {e}")))
    }

    /// Serialize for provenance echo.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config encode: {e}")))
    }
}

/// Apply one `path.to.key=value` override onto a raw TOML table.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{entry}` is not key=value")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid(format!("override `{entry}` has an empty key segment")));
    }
    // parse as a TOML literal; fall back to a plain string
    let value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let mut cur = table;
    for seg in &segments[..segments.len() - 1] {
        cur = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::invalid(format!("override `{entry}`: `{seg}` is not a section"))
            })?;
    }
    cur.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let table: toml::Table = text.parse().unwrap();
        let back: RunConfig = table.try_into().unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_apply_and_parse_types() {
        let cfg = RunConfig::load(
            None,
            &[
                "seed=11".into(),
                "datagen.h=32".into(),
                "datagen.coil_mode=multi4".into(),
                "trainer.lr=0.5".into(),
                "denoiser.channel_multipliers=[1, 2]".into(),
                "sampler.step_rule=literal".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.datagen.h, 32);
        assert_eq!(cfg.datagen.coil_mode, "multi4");
        assert_eq!(cfg.trainer.lr, 0.5);
        assert_eq!(cfg.denoiser.channel_multipliers, vec![1, 2]);
        assert_eq!(cfg.sampler.step_rule, StepRule::Literal);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["datagen.hh=32".into()]).is_err());
        assert!(RunConfig::load(None, &["mystery.k=1".into()]).is_err());
    }

    #[test]
    fn malformed_overrides_rejected() {
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
        assert!(RunConfig::load(None, &["datagen..h=1".into()]).is_err());
    }

    #[test]
    fn acs_default_tracks_height() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.datagen.acs_lines(), default_acs_lines(64));
        cfg.datagen.acs_lines = Some(5);
        assert_eq!(cfg.datagen.acs_lines(), 5);
    }
}
