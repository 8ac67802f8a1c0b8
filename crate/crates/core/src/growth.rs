//! Depth growing: mid-depth layer duplication with proportional stage
//! budgets.
//!
//! Two duplication operators are supported. The block-aligned one picks
//! the middle block of the current stack (earlier block on ties); the
//! layer-aligned one picks the exact layer-wise middle `B` layers. All
//! layers stay untied throughout; the new layers start from bitwise copies
//! of their sources, including their optimizer moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Element;
use crate::trainer::{AdamwState, Moment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthOperator {
    /// Duplicates the middle block (block-aligned).
    Midas,
    /// Duplicates the exact layer-wise middle.
    Lidas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthPlan {
    pub operator: GrowthOperator,
    pub block_size: usize,
    pub final_depth: usize,
    pub alpha: f64,
    /// Steps allocated across stages (growth horizon).
    pub total_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthEvent {
    pub step: u64,
    pub operator: GrowthOperator,
    /// Source layer range `[start, start + len)` in the pre-growth model.
    pub source_start: usize,
    pub source_len: usize,
    /// New layers are inserted immediately after the source range.
    pub insert_at: usize,
    pub pre_depth: usize,
    pub post_depth: usize,
}

impl GrowthPlan {
    pub fn stages(&self) -> usize {
        self.final_depth / self.block_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::config("growth block_size must be >= 1"));
        }
        if self.final_depth == 0 || self.final_depth % self.block_size != 0 {
            return Err(Error::config(format!(
                "final_depth {} must be a positive multiple of block_size {}",
                self.final_depth, self.block_size
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config("alpha must be finite and >= 0"));
        }
        // Budgets must be computable and all >= 1.
        stage_budgets(self.total_steps, self.stages(), self.alpha)?;
        Ok(())
    }

    /// Per-stage budgets `T_i` for this plan.
    pub fn budgets(&self) -> Result<Vec<u64>> {
        stage_budgets(self.total_steps, self.stages(), self.alpha)
    }

    /// Global steps at which growth happens (end of stages 1..k-1).
    pub fn growth_steps(&self) -> Result<Vec<u64>> {
        let budgets = self.budgets()?;
        let mut acc = 0;
        Ok(budgets[..budgets.len() - 1]
            .iter()
            .map(|b| {
                acc += b;
                acc
            })
            .collect())
    }
}

/// Proportional stage budgets: `T_i ∝ i^alpha`, rounded, with the
/// rounding residual assigned to the last (longest) stage so the sum is
/// exactly `total`.
pub fn stage_budgets(total: u64, stages: usize, alpha: f64) -> Result<Vec<u64>> {
    if stages == 0 {
        return Err(Error::config("need at least one stage"));
    }
    if total < stages as u64 {
        return Err(Error::config(format!(
            "{} steps cannot cover {} stages",
            total, stages
        )));
    }
    let weights: Vec<f64> = (1..=stages).map(|i| (i as f64).powf(alpha)).collect();
    let z: f64 = weights.iter().sum();
    let mut budgets: Vec<u64> = weights
        .iter()
        .take(stages - 1)
        .map(|w| (w / z * total as f64).round() as u64)
        .collect();
    let spent: u64 = budgets.iter().sum();
    if spent >= total {
        return Err(Error::config(
            "rounded stage budgets leave nothing for the final stage",
        ));
    }
    budgets.push(total - spent);
    if budgets.iter().any(|&b| b < 1) {
        return Err(Error::config(format!(
            "stage budget below 1 for total={} stages={} alpha={}",
            total, stages, alpha
        )));
    }
    Ok(budgets)
}

/// Source range `[s, s+B)` duplicated when growing a depth-`current`
/// stack by `block` layers.
pub fn source_range(operator: GrowthOperator, current_depth: usize, block: usize) -> Result<(usize, usize)> {
    if current_depth < block {
        return Err(Error::config(format!(
            "cannot duplicate a block of {} from a {}-layer model",
            block, current_depth
        )));
    }
    let start = match operator {
        GrowthOperator::Midas => {
            if current_depth % block != 0 {
                return Err(Error::config(format!(
                    "block-aligned growth needs depth {} divisible by block {}",
                    current_depth, block
                )));
            }
            // Middle block, earlier block on ties.
            block * ((current_depth / block - 1) / 2)
        }
        GrowthOperator::Lidas => (current_depth - block) / 2,
    };
    Ok((start, block))
}

/// Describe the next growth applied to a model of depth `current`.
pub fn plan_event(
    plan: &GrowthPlan,
    current_depth: usize,
    step: u64,
) -> Result<GrowthEvent> {
    let (start, len) = source_range(plan.operator, current_depth, plan.block_size)?;
    Ok(GrowthEvent {
        step,
        operator: plan.operator,
        source_start: start,
        source_len: len,
        insert_at: start + len,
        pre_depth: current_depth,
        post_depth: current_depth + len,
    })
}

/// Duplicate the event's source layers (and their optimizer moments)
/// immediately after the source range. Embeddings, final norm and the LM
/// head are carried over untouched. Growing is only defined for untied
/// (standard-schedule) execution.
pub fn grow<E: Element>(
    model: &Model<E>,
    state: &AdamwState<E>,
    event: &GrowthEvent,
) -> Result<(Model<E>, AdamwState<E>)> {
    let depth = model.layers.len();
    if event.pre_depth != depth {
        return Err(Error::config(format!(
            "growth event expects depth {}, model has {}",
            event.pre_depth, depth
        )));
    }
    let (s, len) = (event.source_start, event.source_len);
    if s + len > depth {
        return Err(Error::config(format!(
            "source range [{}, {}) exceeds depth {}",
            s,
            s + len,
            depth
        )));
    }
    if event.insert_at != s + len {
        return Err(Error::config(
            "new layers must be inserted immediately after the source range",
        ));
    }

    let mut layers = Vec::with_capacity(depth + len);
    layers.extend(model.layers[..s + len].iter().cloned());
    layers.extend(model.layers[s..s + len].iter().cloned());
    layers.extend(model.layers[s + len..].iter().cloned());

    let mut moments: Vec<[Moment<E>; 10]> = Vec::with_capacity(depth + len);
    moments.extend(state.layers[..s + len].iter().cloned());
    moments.extend(state.layers[s..s + len].iter().cloned());
    moments.extend(state.layers[s + len..].iter().cloned());

    let mut config = model.config().clone();
    config.n_physical_layers = depth + len;
    let grown = Model::from_parts(
        config,
        model.embed.clone(),
        layers,
        model.final_gamma.clone(),
        model.final_beta.clone(),
        model.lm_head.clone(),
    )?;
    let grown_state = AdamwState {
        embed: state.embed.clone(),
        layers: moments,
        final_gamma: state.final_gamma.clone(),
        final_beta: state.final_beta.clone(),
        lm_head: state.lm_head.clone(),
        step: state.step,
    };
    Ok((grown, grown_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RunRng;

    #[test]
    fn prop_alpha_budget_example() {
        // total=170000, 8 stages, alpha=1: weights 1..8 sum to 36, so the
        // first stage gets round(170000/36) = 4722.
        let budgets = stage_budgets(170_000, 8, 1.0).unwrap();
        assert_eq!(budgets[0], 4722);
        assert_eq!(budgets.iter().sum::<u64>(), 170_000);
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let budgets = stage_budgets(1001, 4, 0.0).unwrap();
        assert_eq!(budgets.iter().sum::<u64>(), 1001);
        for &b in &budgets {
            assert!((b as i64 - 250).abs() <= 1, "budget {} far from uniform", b);
        }
    }

    #[test]
    fn budgets_reject_infeasible() {
        assert!(stage_budgets(3, 8, 1.0).is_err());
        // alpha large enough to round stage 1 to zero
        assert!(stage_budgets(20, 8, 6.0).is_err());
    }

    #[test]
    fn source_ranges_match_formulas() {
        // First growth: both operators coincide on the only block.
        assert_eq!(source_range(GrowthOperator::Midas, 4, 4).unwrap(), (0, 4));
        assert_eq!(source_range(GrowthOperator::Lidas, 4, 4).unwrap(), (0, 4));
        // Depth 8, block 4: block-aligned picks the earlier middle block,
        // layer-aligned picks the exact middle.
        assert_eq!(source_range(GrowthOperator::Midas, 8, 4).unwrap(), (0, 4));
        assert_eq!(source_range(GrowthOperator::Lidas, 8, 4).unwrap(), (2, 4));
        // Depth 12, block 4: both give [4, 8).
        assert_eq!(source_range(GrowthOperator::Midas, 12, 4).unwrap(), (4, 4));
        assert_eq!(source_range(GrowthOperator::Lidas, 12, 4).unwrap(), (4, 4));
        assert!(source_range(GrowthOperator::Midas, 2, 4).is_err());
    }

    #[test]
    fn lidas_ranges_are_symmetric() {
        for depth in 2..40 {
            for block in 1..=depth {
                let (s, b) = source_range(GrowthOperator::Lidas, depth, block).unwrap();
                let gap_before = s;
                let gap_after = depth - (s + b);
                assert!(
                    (gap_before as i64 - gap_after as i64).abs() <= 1,
                    "asymmetric at depth {} block {}",
                    depth,
                    block
                );
            }
        }
    }

    #[test]
    fn midas_ranges_are_block_aligned() {
        for stages in 1..10 {
            let depth = stages * 4;
            let (s, _) = source_range(GrowthOperator::Midas, depth, 4).unwrap();
            assert_eq!(s % 4, 0);
        }
    }

    fn tiny_model(layers: usize) -> Model<f32> {
        let config = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_physical_layers: layers,
            max_context: 16,
            norm_eps: 1e-5,
            tied_embedding: false,
        };
        Model::init(config, &RunRng::new(4)).unwrap()
    }

    #[test]
    fn grow_copies_bitwise_and_keeps_ends() {
        let model = tiny_model(4);
        let mut state = AdamwState::new(&model);
        state.step = 17;
        // Make moments nonzero so the copy is observable.
        state.layers[1][2].m.data_mut()[0] = 0.25;
        let event = plan_event(
            &GrowthPlan {
                operator: GrowthOperator::Lidas,
                block_size: 4,
                final_depth: 8,
                alpha: 1.0,
                total_steps: 100,
            },
            4,
            42,
        )
        .unwrap();
        let (grown, gstate) = grow(&model, &state, &event).unwrap();
        assert_eq!(grown.layers.len(), 8);
        assert_eq!(gstate.step, 17);
        for i in 0..4 {
            assert!(grown.layers[4 + i].bits_eq(&model.layers[i]));
            for (a, b) in gstate.layers[4 + i].iter().zip(state.layers[i].iter()) {
                assert!(a.bits_eq(b));
            }
        }
        assert!(grown.embed.bits_eq(&model.embed));
        assert!(grown
            .lm_head
            .as_ref()
            .unwrap()
            .bits_eq(model.lm_head.as_ref().unwrap()));
        // Duplication in a pre-LN residual net is not function preserving:
        // the deeper forward is well-defined but generally differs.
        let sched4 = model.standard_schedule();
        let sched8 = grown.standard_schedule();
        let tokens = [1u32, 5, 3];
        let (a, _) = model.forward(&tokens, &sched4, false).unwrap();
        let (b, _) = grown.forward(&tokens, &sched8, false).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn growth_steps_come_before_budget_end() {
        let plan = GrowthPlan {
            operator: GrowthOperator::Midas,
            block_size: 2,
            final_depth: 8,
            alpha: 1.0,
            total_steps: 1000,
        };
        plan.validate().unwrap();
        let steps = plan.growth_steps().unwrap();
        assert_eq!(steps.len(), 3);
        assert!(steps.iter().all(|&s| s < 1000));
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }
}
