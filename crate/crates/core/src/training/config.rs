//! TOML training configuration.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::loss::{LossKind, LAMBDAS};
use super::schedule::{scaled_schedule, Corpus, ScheduleStage, StageLog, Subset, Trainer};
use crate::codec::{ModelConfig, ModelState};
use crate::error::{contract_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            width: 64,
            height: 64,
            frames: 19,
            size: 100,
            seed: 1000,
        }
    }
}

/// One explicit stage; when any are given they replace the built-in table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub frames: usize,
    pub subset: String,
    pub loss: String,
    pub lr: f64,
    pub epochs: f64,
    #[serde(default)]
    pub max_repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pqa: bool,
    pub rqa: bool,
    pub repeat: bool,
    pub long: bool,
    pub corpus: CorpusConfig,
    /// Multiplier on the table's epochs.
    pub epoch_factor: f64,
    /// Multiplier on the table's learning rates.
    pub lr_factor: f64,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub lambdas: [f64; 4],
    #[serde(rename = "stage", skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pqa: true,
            rqa: true,
            repeat: true,
            long: true,
            corpus: CorpusConfig::default(),
            epoch_factor: 0.5,
            lr_factor: 5.0,
            warmup_steps: 5000,
            warmup_lr: 1e-3,
            clip_norm: 1.0,
            lambdas: LAMBDAS,
            stages: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| crate::Error::Format(format!("config: {e}")))?;
        cfg.schedule()?;
        if cfg.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return contract_err("every λ must be positive");
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            pqa: self.pqa,
            rqa: self.rqa,
        }
    }

    pub fn corpus(&self) -> Corpus {
        let c = &self.corpus;
        Corpus::new(c.width, c.height, c.frames, c.size, c.seed)
    }

    pub fn schedule(&self) -> Result<Vec<ScheduleStage>> {
        let stages = if self.stages.is_empty() {
            scaled_schedule(self.repeat, self.long, self.epoch_factor, self.lr_factor)
        } else {
            self.stages
                .iter()
                .map(|s| {
                    Ok(ScheduleStage {
                        frames: s.frames,
                        subset: Subset::parse(&s.subset)?,
                        loss: LossKind::parse(&s.loss)?,
                        lr: s.lr,
                        epochs: s.epochs,
                        max_repeats: s.max_repeats,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        for s in &stages {
            s.validate()?;
        }
        Ok(stages)
    }

    /// Stable 64-bit digest of the configuration.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    /// Initializes a model from `seed`, warms up the motion estimator and
    /// runs the schedule.
    pub fn train(&self, seed: u64, log: Option<&mut dyn Write>) -> Result<(Trainer, Vec<StageLog>)> {
        let stages = self.schedule()?;
        let corpus = self.corpus();
        let mut trainer = Trainer::new(ModelState::new(self.model_config(), seed), seed);
        trainer.lambdas = self.lambdas;
        trainer.clip_norm = (self.clip_norm > 0.0).then_some(self.clip_norm);
        trainer.warm_up_motion(&corpus, self.warmup_steps, self.warmup_lr)?;
        let logs = trainer.run(&stages, &corpus, log)?;
        Ok((trainer, logs))
    }
}
