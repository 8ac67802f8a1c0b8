//! `eval`: few-shot multiple-choice accuracy over the reasoning
//! primitives from a checkpoint.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use looplab_core::io::checkpoint::LoadedCheckpoint;
use looplab_core::model::{LayerSchedule, Model};
use looplab_core::numerics::Element;
use looplab_core::rng::RunRng;
use looplab_core::tasks::{eval_mc, gen_episodes, LmScorer, TaskKind, ALL_KINDS};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub kind: TaskKind,
    pub depth: u8,
    pub shots: usize,
    pub episodes: usize,
    pub accuracy: f64,
    pub ties: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub code_version: String,
    pub schedule: String,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub mean_accuracy: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    ckpt: &Path,
    out: Option<PathBuf>,
    seed: u64,
    kinds: &[String],
    depths: &[u8],
    shots: usize,
    episodes: usize,
    schedule: Option<&str>,
) -> Result<()> {
    let loaded = looplab_core::io::load_checkpoint(ckpt)?;
    let report = match loaded {
        LoadedCheckpoint::F32(c) => evaluate(
            &c.model,
            &c.schedule_for(schedule)?,
            &c.run_config.config_hash(),
            seed,
            kinds,
            depths,
            shots,
            episodes,
        )?,
        LoadedCheckpoint::F64(c) => evaluate(
            &c.model,
            &c.schedule_for(schedule)?,
            &c.run_config.config_hash(),
            seed,
            kinds,
            depths,
            shots,
            episodes,
        )?,
    };

    let out_dir = super::resolve_out(out, "eval");
    super::ensure_dir(&out_dir)?;
    super::write_json(&out_dir.join("eval.json"), &report)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("eval.csv"))?);
    writeln!(csv, "kind,depth,shots,episodes,accuracy,ties")?;
    for r in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.kind.as_str(),
            r.depth,
            r.shots,
            r.episodes,
            r.accuracy,
            r.ties
        )?;
    }
    csv.flush()?;
    for r in &report.rows {
        println!(
            "{:<12} d{}  {} episodes, {}-shot: accuracy {:.3}",
            r.kind.as_str(),
            r.depth,
            r.episodes,
            r.shots,
            r.accuracy
        );
    }
    println!("mean accuracy {:.3}", report.mean_accuracy);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    config_hash: &str,
    seed: u64,
    kinds: &[String],
    depths: &[u8],
    shots: usize,
    episodes: usize,
) -> Result<EvalReport> {
    let kinds: Vec<TaskKind> = if kinds.is_empty() {
        ALL_KINDS.to_vec()
    } else {
        kinds
            .iter()
            .map(|k| k.parse::<TaskKind>())
            .collect::<looplab_core::Result<Vec<_>>>()?
    };
    let rng = RunRng::new(seed);
    let scorer = LmScorer::new(model, schedule);
    let mut rows = Vec::new();
    for kind in kinds {
        let kind_depths: Vec<u8> = if kind.is_copy() {
            vec![0]
        } else if depths.is_empty() {
            vec![0, 1, 2]
        } else {
            depths.to_vec()
        };
        for depth in kind_depths {
            let eps = gen_episodes(
                &rng,
                &format!("eval/{}/d{}", kind.as_str(), depth),
                kind,
                depth,
                shots,
                episodes,
            )?;
            let report = eval_mc(&scorer, &eps)?;
            rows.push(EvalRow {
                kind,
                depth,
                shots,
                episodes,
                accuracy: report.accuracy,
                ties: report.n_ties,
            });
        }
    }
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        schedule: schedule.descriptor().to_string(),
        seed,
        rows,
        mean_accuracy: mean,
    })
}
