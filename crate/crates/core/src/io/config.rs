//! Run configuration: a versioned TOML schema that, together with the
//! code version, fully determines a run. Unknown fields are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::growth::GrowthPlan;
use crate::model::{schedule_from_descriptor, LayerSchedule, Model, ModelConfig, ScheduleSpec};
use crate::numerics::Element;
use crate::rng::RunRng;
use crate::tokenizer;
use crate::trainer::{LoopAdaptation, MixtureConfig, Trainer, TrainerConfig};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

/// Model section of the run config. `vocab_size` defaults to the fixed
/// tokenizer vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_physical_layers: usize,
    pub max_context: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub tied_embedding: bool,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size.unwrap_or_else(tokenizer::vocab_size),
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_physical_layers: self.n_physical_layers,
            max_context: self.max_context,
            norm_eps: self.norm_eps,
            tied_embedding: self.tied_embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Schedule descriptor ("8", "4x6", "4-4x4-4", "custom:[...]").
    pub schedule: String,
    pub model: ModelSection,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub growth: Option<GrowthPlan>,
    /// Retrofitted recurrence applied during the cooldown phase.
    #[serde(default)]
    pub cooldown_loop: Option<LoopAdaptation>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("config parse error: {}", e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported (expected {})",
                self.version, RUN_CONFIG_VERSION
            )));
        }
        let model_config = self.model.to_model_config();
        model_config.validate()?;
        ScheduleSpec::parse(&self.schedule)?;
        schedule_from_descriptor(&self.schedule, model_config.n_physical_layers)?;
        self.trainer.validate()?;
        self.mixture.validate()?;
        if let Some(plan) = &self.growth {
            plan.validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LayerSchedule> {
        schedule_from_descriptor(&self.schedule, self.model.n_physical_layers)
    }

    /// Canonical JSON rendering, the basis of the config hash embedded in
    /// every report.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        hex(&h.finalize())
    }

    /// Effective depth of the *final* model (post-growth).
    pub fn final_effective_depth(&self) -> Result<usize> {
        match &self.growth {
            Some(plan) => Ok(plan.final_depth),
            None => Ok(self.schedule()?.effective_depth()),
        }
    }

    /// Inference FLOPs for one training-context sequence through the
    /// final model under the run's schedule.
    pub fn inference_flops(&self) -> Result<u128> {
        let cfg = self.model.to_model_config();
        let per_layer = per_virtual_layer_flops(&cfg, self.trainer.context);
        Ok(per_layer * self.final_effective_depth()? as u128)
    }

    /// Total training FLOPs, summed analytically over growth stages and
    /// the cooldown adaptation (3x-forward convention, times batch).
    pub fn training_flops(&self) -> Result<u128> {
        let cfg = self.model.to_model_config();
        let per_layer = per_virtual_layer_flops(&cfg, self.trainer.context);
        let lr = self.trainer.lr_schedule();
        let steps = self.trainer.steps;

        // Sum of effective depth over all steps.
        let mut depth_sum: u128 = 0;
        match &self.growth {
            Some(plan) => {
                let budgets = plan.budgets()?;
                let mut spent = 0u64;
                for (i, b) in budgets.iter().enumerate() {
                    let depth = plan.block_size * (i + 1);
                    depth_sum += depth as u128 * *b as u128;
                    spent += b;
                }
                // Steps after the growth horizon run at final depth.
                depth_sum += plan.final_depth as u128 * (steps - spent) as u128;
            }
            None => {
                depth_sum = self.schedule()?.effective_depth() as u128 * steps as u128;
            }
        }
        if let Some(adapt) = &self.cooldown_loop {
            let cooldown_steps = steps - lr.cooldown_start();
            depth_sum += (adapt.block_len * adapt.extra_reps) as u128 * cooldown_steps as u128;
        }
        Ok(3 * per_layer * depth_sum * self.trainer.batch_size as u128)
    }

    /// Instantiate the trainer described by this config.
    pub fn build_trainer<E: Element>(&self) -> Result<Trainer<E>> {
        let rng = RunRng::new(self.seed);
        let model: Model<E> = Model::init(self.model.to_model_config(), &rng)?;
        let schedule = self.schedule()?;
        Trainer::new(
            model,
            schedule,
            self.trainer.clone(),
            self.mixture.clone(),
            rng,
            self.growth.clone(),
            self.cooldown_loop,
        )
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn per_virtual_layer_flops(cfg: &ModelConfig, context: usize) -> u128 {
    use crate::model::{count_flops, FlopPhase};
    let one_slot = schedule_from_descriptor("custom:[0]", cfg.n_physical_layers)
        .expect("single-slot schedule");
    count_flops(cfg, &one_slot, context, FlopPhase::Inference)
}
