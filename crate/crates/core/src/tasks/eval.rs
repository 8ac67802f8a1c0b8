//! Few-shot multiple-choice evaluation.
//!
//! Each choice is scored by the summed log-likelihood of its tokens given
//! the episode prompt; prediction is the argmax with ties broken toward
//! the lowest choice index (and counted). Episodes that do not fit the
//! model context are an error, never a silent truncation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_task, templates, TaskInstance, TaskKind};
use crate::error::{Error, Result};
use crate::model::{LayerSchedule, Model};
use crate::numerics::{kernels, Element};
use crate::rng::RunRng;
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotEpisode {
    pub shots: Vec<TaskInstance>,
    pub query: TaskInstance,
}

impl FewShotEpisode {
    pub fn new(shots: Vec<TaskInstance>, query: TaskInstance) -> Result<Self> {
        let mut prompts: Vec<&str> = shots.iter().map(|s| s.prompt.as_str()).collect();
        prompts.push(&query.prompt);
        for i in 0..prompts.len() {
            for j in i + 1..prompts.len() {
                if prompts[i] == prompts[j] {
                    return Err(Error::Eval("episode contains duplicate instances".into()));
                }
            }
        }
        Ok(Self { shots, query })
    }

    /// Episode text: each shot's prompt completed with its answer, then
    /// the query prompt awaiting a continuation.
    pub fn render_prompt(&self) -> String {
        let mut text = String::new();
        for shot in &self.shots {
            text.push_str(&shot.prompt);
            text.push(' ');
            text.push_str(shot.answer());
            text.push_str(templates::SHOT_SEPARATOR);
        }
        text.push_str(&self.query.prompt);
        text
    }

    /// Continuation text scored for a choice.
    pub fn continuation(choice: &str) -> String {
        format!(" {}", choice)
    }
}

/// Anything that can score candidate continuations of a prompt.
pub trait ChoiceScorer: Sync {
    fn score(&self, prompt: &str, continuations: &[String]) -> Result<Vec<f64>>;
}

/// Log-likelihood scoring through a model under a fixed schedule.
pub struct LmScorer<'a, E: Element> {
    pub model: &'a Model<E>,
    pub schedule: &'a LayerSchedule,
}

impl<'a, E: Element> LmScorer<'a, E> {
    pub fn new(model: &'a Model<E>, schedule: &'a LayerSchedule) -> Self {
        Self { model, schedule }
    }

    fn continuation_logprob(&self, prompt_ids: &[u32], cont_ids: &[u32]) -> Result<f64> {
        let mut full = Vec::with_capacity(prompt_ids.len() + cont_ids.len());
        full.extend_from_slice(prompt_ids);
        full.extend_from_slice(cont_ids);
        if full.len() > self.model.config().max_context {
            return Err(Error::Eval(format!(
                "episode of {} tokens exceeds max_context {} (refusing to truncate)",
                full.len(),
                self.model.config().max_context
            )));
        }
        let (logits, _) = self.model.forward(&full, self.schedule, false)?;
        let vocab = self.model.config().vocab_size;
        let mut total = 0.0;
        for (k, &tok) in cont_ids.iter().enumerate() {
            let pos = prompt_ids.len() + k - 1; // logits at pos predict pos+1
            let row = &logits.data()[pos * vocab..(pos + 1) * vocab];
            let lsm = kernels::log_softmax_row(row);
            total += lsm[tok as usize].to_f64();
        }
        Ok(total)
    }
}

impl<'a, E: Element> ChoiceScorer for LmScorer<'a, E> {
    fn score(&self, prompt: &str, continuations: &[String]) -> Result<Vec<f64>> {
        let prompt_ids = tokenizer::encode(prompt)?;
        if prompt_ids.is_empty() {
            return Err(Error::Eval("empty prompt".into()));
        }
        continuations
            .iter()
            .map(|c| {
                let cont_ids = tokenizer::encode(c)?;
                if cont_ids.is_empty() {
                    return Err(Error::Eval("empty continuation".into()));
                }
                self.continuation_logprob(&prompt_ids, &cont_ids)
            })
            .collect()
    }
}

/// Test scorer: a fixed per-rank score table applied to the choices after
/// sorting them, so accuracy is invariant to choice-order permutations.
pub struct PermutationScorer;

impl ChoiceScorer for PermutationScorer {
    fn score(&self, _prompt: &str, continuations: &[String]) -> Result<Vec<f64>> {
        let mut sorted: Vec<&String> = continuations.iter().collect();
        sorted.sort();
        Ok(continuations
            .iter()
            .map(|c| {
                let rank = sorted.iter().position(|s| *s == c).unwrap();
                -(rank as f64)
            })
            .collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McReport {
    pub n_episodes: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Episodes where at least two choices tied at the top score
    /// (broken toward the lowest index).
    pub n_ties: usize,
}

/// Score every episode; accuracy is the fraction predicted correctly.
pub fn eval_mc(scorer: &(impl ChoiceScorer + ?Sized), episodes: &[FewShotEpisode]) -> Result<McReport> {
    if episodes.is_empty() {
        return Err(Error::Eval("no episodes to evaluate".into()));
    }
    let results: Vec<(bool, bool)> = episodes
        .par_iter()
        .map(|ep| {
            let prompt = ep.render_prompt();
            let conts: Vec<String> = ep
                .query
                .choices
                .iter()
                .map(|c| FewShotEpisode::continuation(c))
                .collect();
            let scores = scorer.score(&prompt, &conts)?;
            let mut best = 0usize;
            let mut tie = false;
            for (i, &s) in scores.iter().enumerate().skip(1) {
                if s > scores[best] {
                    best = i;
                    tie = false;
                } else if s == scores[best] {
                    tie = true;
                }
            }
            Ok((best == ep.query.answer_index, tie))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_correct = results.iter().filter(|(c, _)| *c).count();
    let n_ties = results.iter().filter(|(_, t)| *t).count();
    Ok(McReport {
        n_episodes: episodes.len(),
        n_correct,
        accuracy: n_correct as f64 / episodes.len() as f64,
        n_ties,
    })
}

/// Build `n_episodes` episodes with `n_shots` examples each. Queries come
/// from the `stream/query` substream and shots from `stream/shots`, so
/// evaluation sets are reproducible and disjoint from training pools by
/// stream naming.
pub fn gen_episodes(
    rng: &RunRng,
    stream: &str,
    kind: TaskKind,
    depth: u8,
    n_shots: usize,
    n_episodes: usize,
) -> Result<Vec<FewShotEpisode>> {
    let mut episodes = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let query = gen_task(rng, kind, depth, rng.derive_seed(&format!("{}/query", stream), e as u64))?;
        let mut shots = Vec::with_capacity(n_shots);
        let mut attempt = 0u64;
        while shots.len() < n_shots {
            let idx = rng.derive_seed(&format!("{}/shots/{}", stream, e), shots.len() as u64 + attempt);
            let shot = gen_task(rng, kind, depth, idx)?;
            let dup = shot.prompt == query.prompt
                || shots.iter().any(|s: &TaskInstance| s.prompt == shot.prompt);
            if dup {
                attempt += 1;
                if attempt > 100 {
                    return Err(Error::Eval("could not build distinct episode".into()));
                }
                continue;
            }
            shots.push(shot);
        }
        episodes.push(FewShotEpisode::new(shots, query)?);
    }
    Ok(episodes)
}

/// Accuracy for each shot count over a fixed query set.
pub fn icl_sweep(
    scorer: &(impl ChoiceScorer + ?Sized),
    rng: &RunRng,
    stream: &str,
    kind: TaskKind,
    depth: u8,
    shots_list: &[usize],
    n_episodes: usize,
) -> Result<Vec<(usize, McReport)>> {
    let mut out = Vec::with_capacity(shots_list.len());
    for &n_shots in shots_list {
        // Same query substream for every entry: identical queries across
        // the sweep, only the shot count varies.
        let episodes = gen_episodes(rng, stream, kind, depth, n_shots, n_episodes)?;
        let report = eval_mc(scorer, &episodes)?;
        out.push((n_shots, report));
    }
    Ok(out)
}

/// Largest shot count whose episodes (plus the longest continuation)
/// provably fit `max_context`, measured over a probe set.
pub fn max_feasible_shots(
    rng: &RunRng,
    kind: TaskKind,
    depth: u8,
    max_context: usize,
    probes: usize,
) -> Result<usize> {
    let mut max_shot_len = 0usize;
    let mut max_query_len = 0usize;
    for i in 0..probes {
        let inst = gen_task(rng, kind, depth, rng.derive_seed("probe", i as u64))?;
        let shot_len = tokenizer::encode(&inst.prompt)?.len()
            + tokenizer::encode(&format!(" {}", inst.answer()))?.len()
            + templates::SHOT_SEPARATOR.len();
        let longest_choice = inst
            .choices
            .iter()
            .map(|c| c.len() + 1)
            .max()
            .unwrap_or(0);
        let query_len = tokenizer::encode(&inst.prompt)?.len() + longest_choice;
        max_shot_len = max_shot_len.max(shot_len);
        max_query_len = max_query_len.max(query_len);
    }
    if max_query_len > max_context {
        return Err(Error::Eval("even a zero-shot episode cannot fit the context".into()));
    }
    Ok((max_context - max_query_len) / max_shot_len)
}
