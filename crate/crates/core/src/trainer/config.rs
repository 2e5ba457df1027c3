use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossConfig;
use crate::optimizer::{LrSchedule, RAdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; callers may substitute a default (CLI: `RATE_NET_DATA_ROOT`).
    pub root: Option<PathBuf>,
    pub split: Split,
    /// Heatmap width in pixels; `6 * H / 256` when absent.
    pub heatmap_sigma: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, split: Split::Train, heatmap_sigma: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub radam: RAdamConfig,
    pub schedule: LrSchedule,
}

/// Which parts of the generator train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Both modules, all three phases.
    #[default]
    Full,
    /// No texture enhancer: the coarse image is the output and phase 2
    /// updates the pose transfer module alone.
    PbOnly,
    /// Pose transfer frozen (typically loaded via `init_checkpoint`);
    /// phase 1 is skipped and phase 2 updates the enhancer alone.
    PbFixed,
}

impl AblationMode {
    pub fn uses_texture(self) -> bool {
        self != AblationMode::PbOnly
    }

    pub fn trains_pose(self) -> bool {
        self != AblationMode::PbFixed
    }

    /// Optimizer phases per cycle that update a generator.
    pub fn generator_phases(self) -> u64 {
        if self.trains_pose() { 2 } else { 1 }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::PbOnly => "pb_only",
            AblationMode::PbFixed => "pb_fixed",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "pb_only" => Ok(AblationMode::PbOnly),
            "pb_fixed" => Ok(AblationMode::PbFixed),
            o => Err(Error::Config(format!("unknown ablation mode `{o}` (full, pb_only, pb_fixed)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleConfig {
    /// Discriminator steps per cycle (`K`).
    pub d_steps: u64,
    pub total_cycles: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    /// Cycles between checkpoints; the final cycle is always saved.
    pub checkpoint_every: u64,
    /// Checkpoint whose pose transfer parameters replace the fresh ones.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            d_steps: 3,
            total_cycles: 40_000,
            batch_size: 4,
            seed: 0,
            ablation_mode: AblationMode::Full,
            checkpoint_every: 500,
            init_checkpoint: None,
        }
    }
}

/// The complete run configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossConfig,
    pub optimizer: OptimizerConfig,
    pub cycle: CycleConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.losses.weights.validate()?;
        self.optimizer.radam.validate()?;
        self.optimizer.schedule.validate()?;
        let c = &self.cycle;
        if c.d_steps == 0 || c.batch_size == 0 || c.checkpoint_every == 0 {
            return Err(Error::Config("cycle: d_steps, batch_size and checkpoint_every must be at least 1".into()));
        }
        if c.total_cycles > self.optimizer.schedule.total_cycles {
            return Err(Error::Config(format!(
                "cycle.total_cycles {} exceeds the learning-rate schedule end {}",
                c.total_cycles, self.optimizer.schedule.total_cycles
            )));
        }
        if let Some(s) = self.data.heatmap_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config("data.heatmap_sigma must be positive".into()));
            }
        }
        Ok(())
    }

    /// Optimizer updates per cycle: generator phases plus `K` discriminator steps.
    pub fn iterations_per_cycle(&self) -> u64 {
        self.cycle.ablation_mode.generator_phases() + self.cycle.d_steps
    }

    /// Narrow networks and a four-cycle schedule, for smoke tests.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.generator.n_patn_blocks = 2;
        cfg.generator.base_channels = 8;
        cfg.generator.max_channels = 16;
        cfg.generator.texture_code_dim = 16;
        cfg.generator.enhancer_res_blocks = 1;
        cfg.discriminator.base_channels = 8;
        cfg.discriminator.max_channels = 16;
        cfg.cycle.total_cycles = 4;
        cfg.cycle.batch_size = 2;
        cfg.cycle.checkpoint_every = 2;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.iterations_per_cycle(), 5);
        assert_eq!(cfg.optimizer.schedule.base_lr, 1e-4);
        let j = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_str(&j, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json_str(
            r#"{"cycle": {"total_cycles": 4, "ablation_mode": "pb_only"}, "generator": {"n_patn_blocks": 2}}"#,
            Path::new("x"),
        )
        .unwrap();
        assert_eq!(cfg.cycle.total_cycles, 4);
        assert_eq!(cfg.cycle.d_steps, 3);
        assert_eq!(cfg.cycle.ablation_mode, AblationMode::PbOnly);
        assert_eq!(cfg.generator.texture_code_dim, 128);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for doc in [
            r#"{"extra": 1}"#,
            r#"{"cycle": {"k": 3}}"#,
            r#"{"losses": {"weights": {"lambda_recon": 1, "oops": 2}}}"#,
            r#"{"optimizer": {"radam": {"beta2": 1.5}}}"#,
            r#"{"cycle": {"d_steps": 0}}"#,
            r#"{"cycle": {"total_cycles": 50000}}"#,
            r#"{"cycle": {"ablation_mode": "half"}}"#,
        ] {
            assert!(RunConfig::from_json_str(doc, Path::new("x")).is_err(), "{doc}");
        }
    }

    #[test]
    fn ablation_parse() {
        assert_eq!("pb_fixed".parse::<AblationMode>().unwrap(), AblationMode::PbFixed);
        assert!("nope".parse::<AblationMode>().is_err());
        assert_eq!(AblationMode::PbFixed.to_string(), "pb_fixed");
    }
}
