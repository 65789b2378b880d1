//! Run configuration, stored as TOML with one table per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::drift::DriftMode;
use crate::error::{Result, VsdmError};
use crate::rng::checksum_bytes;
use crate::sampler::SampleMode;
use crate::schedule::BetaSchedule;
use crate::score::{MlpLayout, TrainConfig};
use crate::variational::{Averaging, Parametrization, StepSizeSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub mode: DriftMode,
    /// `false` freezes `A ≡ 0`: the SGM baseline.
    pub adaptive: bool,
    pub parametrization: Parametrization,
    pub lambda_min: f64,
    pub zeta: f64,
    pub step: StepSizeSchedule,
    pub averaging: Averaging,
    /// Run SA after every `update_every`-th stage.
    pub update_every: usize,
    /// SA steps per update, all on one backward-trajectory batch.
    pub a_iters_per_stage: usize,
    /// Backward chains simulated for each SA update.
    pub sa_batch: usize,
    pub stages: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            mode: DriftMode::DiagonalInvariant,
            adaptive: true,
            parametrization: Parametrization::Direct,
            lambda_min: 1e-3,
            zeta: 0.75,
            step: StepSizeSchedule::default(),
            averaging: Averaging::Ema { rate: 0.2 },
            update_every: 1,
            a_iters_per_stage: 100,
            sa_batch: 1024,
            stages: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub time_embed: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let l = MlpLayout::standard(2);
        ModelConfig {
            time_embed: l.time_embed,
            hidden: l.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    /// Grid steps used for sampling; 0 means the training grid.
    pub nfe: usize,
    pub count: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SampleMode::OdeEuler,
            nfe: 0,
            count: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: Dataset,
    pub schedule: BetaSchedule,
    pub drift: DriftConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn layout(&self) -> MlpLayout {
        MlpLayout {
            dim: self.data.dim(),
            time_embed: self.model.time_embed,
            hidden: self.model.hidden.clone(),
        }
    }

    /// Check every module's preconditions before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        self.layout().validate()?;
        self.train.validate()?;
        let d = &self.drift;
        d.step.validate()?;
        d.averaging.validate()?;
        if !(d.lambda_min > 0.0 && d.lambda_min < 1.0) {
            return Err(VsdmError::Config(format!("lambda_min {} must lie in (0, 1)", d.lambda_min)));
        }
        if !d.zeta.is_finite() {
            return Err(VsdmError::Config("zeta must be finite".into()));
        }
        if d.stages == 0 {
            return Err(VsdmError::Config("stages must be ≥ 1".into()));
        }
        if d.adaptive && (d.update_every == 0 || d.sa_batch == 0 || d.a_iters_per_stage == 0) {
            return Err(VsdmError::Config("adaptive drift needs update_every, sa_batch, a_iters_per_stage ≥ 1".into()));
        }
        if d.parametrization == Parametrization::Svd && d.mode.is_diagonal() {
            return Err(VsdmError::Config("svd parametrization needs a full drift mode".into()));
        }
        if self.sampler.count == 0 {
            return Err(VsdmError::Config("sampler count must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| VsdmError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VsdmError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            VsdmError::Config(msg) => VsdmError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// FNV-1a of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        checksum_bytes(self.to_toml().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    /// Built-in configurations.
    pub fn preset(name: &str) -> Result<Self> {
        let spiral = Dataset::spiral(vec![1.0, 8.0], 0);
        let checker = Dataset::checkerboard(vec![6.0, 1.0], 0);
        let base = |data: Dataset, beta_max: f64, adaptive: bool, label: &str| {
            let mut c = RunConfig {
                name: label.to_string(),
                seed: 0,
                data,
                schedule: BetaSchedule::linear(0.1, beta_max, 100).expect("valid preset"),
                drift: DriftConfig {
                    adaptive,
                    ..DriftConfig::default()
                },
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                sampler: SamplerConfig::default(),
            };
            c.train.rounds = 250;
            c
        };
        let c = match name {
            "spiral-vsdm-10" => base(spiral, 10.0, true, name),
            "spiral-sgm-10" => base(spiral, 10.0, false, name),
            "spiral-sgm-20" => base(spiral, 20.0, false, name),
            "spiral-sgm-30" => base(spiral, 30.0, false, name),
            "checkerboard-vsdm-10" => base(checker, 10.0, true, name),
            "checkerboard-sgm-20" => base(checker, 20.0, false, name),
            "checkerboard-sgm-30" => base(checker, 30.0, false, name),
            "gaussian" => {
                let g = Dataset::gaussian(vec![0.0, 0.0], vec![vec![4.0, 0.0], vec![0.0, 1.0]], 0);
                base(g, 20.0, true, name)
            }
            other => return Err(VsdmError::Config(format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")))),
        };
        Ok(c)
    }
}

pub const PRESETS: &[&str] = &[
    "spiral-vsdm-10",
    "spiral-sgm-10",
    "spiral-sgm-20",
    "spiral-sgm-30",
    "checkerboard-vsdm-10",
    "checkerboard-sgm-20",
    "checkerboard-sgm-30",
    "gaussian",
];

/// Standard file names inside an output directory.
pub fn out_path(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            let text = c.to_toml();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig::preset("spiral-vsdm-10").unwrap();
        c.drift.lambda_min = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::preset("spiral-vsdm-10").unwrap();
        c.drift.parametrization = Parametrization::Svd;
        assert!(c.validate().is_err());
        c.drift.mode = DriftMode::FullInvariant;
        assert!(c.validate().is_ok());
        let text = RunConfig::preset("gaussian").unwrap().to_toml().replace("seed = 0\n", "seed = 0\nbogus = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::preset("spiral-sgm-20").unwrap();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_hex().len(), 16);
    }
}
