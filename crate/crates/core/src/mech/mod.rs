//! Mechanistic depth-utilization diagnostics.
//!
//! Layer-skip depth scores, tuned-lens early exit, residual/sublayer norm
//! profiles, future local-effect matrices, layer swaps, and inference-time
//! block repetition. Every intervention works on *virtual slots* (schedule
//! entries), which is the only reading under which intervening on a looped
//! model is meaningful. Diagnostics never mutate the model; callers can
//! assert that with `Model::param_digest`.

mod depth;
mod effects;
mod interventions;
mod lens;
mod norms;

pub use depth::{depth_score, DepthProfile};
pub use effects::{future_local_effects, EffectMatrix};
pub use interventions::{lm_loss, repeat_block_eval, swap_eval, RepeatPoint, SwapReport};
pub use lens::{tuned_lens_eval, tuned_lens_fit, LensEvalReport, LensFitConfig, LensLayerStats, TunedLens};
pub use norms::{norm_profiles, NormProfile};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::RunRng;
use crate::trainer::data::{window_in_family, MixtureConfig};

/// KL direction used throughout lens reports: the final distribution is
/// the reference (`KL(final || early_exit)`).
pub const KL_DIRECTION: &str = "KL(final||early_exit)";

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Envelope every diagnostic report is serialized in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticReport<T> {
    pub schema_version: u32,
    pub which: String,
    pub config_hash: String,
    pub code_version: String,
    pub kl_direction: String,
    pub payload: T,
}

impl<T> DiagnosticReport<T> {
    pub fn new(which: &str, config_hash: &str, payload: T) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            which: which.to_string(),
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            kl_direction: KL_DIRECTION.to_string(),
            payload,
        }
    }
}

/// Fixed synthetic prompt batch for diagnostics (the desk-scale stand-in
/// for a fixed external prompt set), drawn from its own stream family.
pub fn diag_batch(rng: &RunRng, n_docs: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    let mixture = MixtureConfig::default();
    (0..n_docs)
        .map(|i| {
            window_in_family(rng, "diag", &mixture.components, len, 0, i).map(|w| {
                let mut t = w.tokens;
                t.truncate(len);
                t
            })
        })
        .collect()
}
