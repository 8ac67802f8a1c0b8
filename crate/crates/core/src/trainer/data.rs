//! Synthetic training corpus with mixture reweighting.
//!
//! Three components stand in for a pretraining mixture at desk scale:
//! `web` (templated natural-ish sentences), `tasks` (rendered reasoning
//! primitives with answers), and `math` (arithmetic chains, the "hard
//! math" component whose weight is raised during cooldown).
//!
//! Batches are a pure function of `(seed, step, row)`: every window is
//! assembled from its own substream, so resuming a run replays identical
//! data with no sampler state to checkpoint.

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RunRng;
use crate::tasks;
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub components: Vec<MixtureComponent>,
    /// Weights swapped in at the cooldown boundary (same component names).
    #[serde(default)]
    pub cooldown_weights: Option<Vec<MixtureComponent>>,
}

pub const COMPONENT_NAMES: [&str; 3] = ["web", "tasks", "math"];

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            components: vec![
                MixtureComponent { name: "web".into(), weight: 0.60 },
                MixtureComponent { name: "tasks".into(), weight: 0.25 },
                MixtureComponent { name: "math".into(), weight: 0.15 },
            ],
            cooldown_weights: Some(vec![
                MixtureComponent { name: "web".into(), weight: 0.45 },
                MixtureComponent { name: "tasks".into(), weight: 0.25 },
                MixtureComponent { name: "math".into(), weight: 0.30 },
            ]),
        }
    }
}

fn validate_weights(components: &[MixtureComponent]) -> Result<()> {
    if components.is_empty() {
        return Err(Error::config("mixture needs at least one component"));
    }
    let mut sum = 0.0;
    for c in components {
        if !COMPONENT_NAMES.contains(&c.name.as_str()) {
            return Err(Error::config(format!(
                "unknown mixture component {:?} (known: {:?})",
                c.name, COMPONENT_NAMES
            )));
        }
        if c.weight < 0.0 || !c.weight.is_finite() {
            return Err(Error::config("mixture weights must be nonnegative"));
        }
        sum += c.weight;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("mixture weights sum to {}, need 1", sum)));
    }
    Ok(())
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        validate_weights(&self.components)?;
        if let Some(cd) = &self.cooldown_weights {
            validate_weights(cd)?;
        }
        Ok(())
    }

    /// Active weights for a phase.
    pub fn phase_components(&self, cooldown: bool) -> &[MixtureComponent] {
        if cooldown {
            self.cooldown_weights.as_deref().unwrap_or(&self.components)
        } else {
            &self.components
        }
    }
}

/// Draw a component index from the active weights.
pub fn sample_component(components: &[MixtureComponent], rng: &mut ChaCha8Rng) -> usize {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut acc = 0.0;
    for (i, c) in components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return i;
        }
    }
    components.len() - 1
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[(rng.next_u64() % pool.len() as u64) as usize]
}

/// Templated sentences over a fixed word inventory.
pub fn gen_web_doc(rng: &mut ChaCha8Rng) -> String {
    use crate::tasks::words::{ADJECTIVES, VERBS, WORDS};
    let n_sentences = 2 + (rng.next_u64() % 4) as usize;
    let mut doc = String::new();
    for _ in 0..n_sentences {
        let template = rng.next_u64() % 4;
        let s = match template {
            0 => format!(
                "the {} {} {} the {}.",
                pick(rng, ADJECTIVES),
                pick(rng, WORDS),
                pick(rng, VERBS),
                pick(rng, WORDS)
            ),
            1 => format!(
                "a {} near the {} {} its {}.",
                pick(rng, WORDS),
                pick(rng, WORDS),
                pick(rng, VERBS),
                pick(rng, WORDS)
            ),
            2 => format!(
                "every {} {} a {} {}.",
                pick(rng, WORDS),
                pick(rng, VERBS),
                pick(rng, ADJECTIVES),
                pick(rng, WORDS)
            ),
            _ => format!(
                "the {} of the {} {} the {} and the {}.",
                pick(rng, WORDS),
                pick(rng, WORDS),
                pick(rng, VERBS),
                pick(rng, WORDS),
                pick(rng, WORDS)
            ),
        };
        if !doc.is_empty() {
            doc.push(' ');
        }
        doc.push_str(&s);
    }
    doc
}

/// Arithmetic chain: each line starts from the previous result, so
/// producing the next line requires carrying the running value.
pub fn gen_math_doc(rng: &mut ChaCha8Rng) -> String {
    let mut value: i64 = 2 + (rng.next_u64() % 40) as i64;
    let n_lines = 4 + (rng.next_u64() % 5) as usize;
    let mut doc = String::new();
    for _ in 0..n_lines {
        let op = rng.next_u64() % 3;
        let operand = 2 + (rng.next_u64() % 9) as i64;
        let (text, next) = match op {
            0 => (format!("{}+{}={}", value, operand, value + operand), value + operand),
            1 if value > operand => {
                (format!("{}-{}={}", value, operand, value - operand), value - operand)
            }
            _ => {
                let small = 2 + (rng.next_u64() % 3) as i64;
                (format!("{}*{}={}", value, small, value * small), value * small)
            }
        };
        doc.push_str(&text);
        doc.push('\n');
        value = next.min(9999); // keep numbers short
    }
    doc
}

/// A rendered reasoning-primitive document (prompt plus answer) of a
/// random kind and depth.
pub fn gen_task_doc(rng: &RunRng, stream_seed: u64) -> Result<String> {
    let mut s = rng.indexed_stream("data/taskdoc", stream_seed);
    let kind = tasks::ALL_KINDS[(s.next_u64() % 5) as usize];
    let depth = if kind.is_copy() { 0 } else { (s.next_u64() % 3) as u8 };
    let inst = tasks::gen_task(rng, kind, depth, stream_seed)?;
    Ok(format!("{} {}", inst.prompt, inst.answer()))
}

pub fn gen_component_doc(rng: &RunRng, component: &str, doc_seed: u64) -> Result<String> {
    match component {
        "web" => Ok(gen_web_doc(&mut rng.indexed_stream("data/web", doc_seed))),
        "math" => Ok(gen_math_doc(&mut rng.indexed_stream("data/math", doc_seed))),
        "tasks" => gen_task_doc(rng, doc_seed),
        other => Err(Error::config(format!("unknown component {:?}", other))),
    }
}

/// One training window: `context + 1` token ids plus per-component token
/// tallies for mixture logging.
pub struct Window {
    pub tokens: Vec<u32>,
    pub component_tokens: [usize; 3],
}

/// Deterministic window for `(step, row)` under the active mixture.
pub fn window_at(
    rng: &RunRng,
    components: &[MixtureComponent],
    context: usize,
    step: u64,
    row: usize,
) -> Result<Window> {
    window_in_family(rng, "data", components, context, step, row)
}

/// Same, under a caller-chosen stream family so evaluation and
/// diagnostic batches never collide with training data.
pub fn window_in_family(
    rng: &RunRng,
    family: &str,
    components: &[MixtureComponent],
    context: usize,
    step: u64,
    row: usize,
) -> Result<Window> {
    let mut pick_rng = rng.indexed_stream(&format!("{}/pick", family), step * 4096 + row as u64);
    let mut tokens: Vec<u32> = Vec::with_capacity(context + 2);
    let mut tallies = [0usize; 3];
    let mut doc_no = 0u64;
    while tokens.len() < context + 1 {
        let ci = sample_component(components, &mut pick_rng);
        let name = components[ci].name.as_str();
        let doc_seed = rng.derive_seed(
            &format!("{}/doc/{}/{}", family, step, row),
            doc_no,
        );
        let doc = gen_component_doc(rng, name, doc_seed)?;
        let ids = tokenizer::encode(&doc)?;
        let take = ids.len().min(context + 1 - tokens.len());
        let slot = COMPONENT_NAMES.iter().position(|n| *n == name).unwrap();
        tallies[slot] += take;
        tokens.extend_from_slice(&ids[..take]);
        if tokens.len() < context + 1 {
            tokens.push(tokenizer::sep_id());
            tallies[slot] += 1;
        }
        doc_no += 1;
    }
    tokens.truncate(context + 1);
    Ok(Window {
        tokens,
        component_tokens: tallies,
    })
}
