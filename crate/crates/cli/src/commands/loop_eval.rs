//! `loop-eval`: inference-time block repetition sweep from a checkpoint.
//! `--reps 0` reproduces the plain evaluation.

use std::path::{Path, PathBuf};

use anyhow::Result;

use looplab_core::io::checkpoint::LoadedCheckpoint;
use looplab_core::io::figures;
use looplab_core::mech::{repeat_block_eval, DiagnosticReport};
use looplab_core::model::{LayerSchedule, Model};
use looplab_core::numerics::Element;
use looplab_core::rng::RunRng;
use looplab_core::tasks::{TaskKind, ALL_KINDS};

pub fn run(
    ckpt: &Path,
    out: Option<PathBuf>,
    seed: u64,
    start: usize,
    len: usize,
    reps: usize,
    episodes: usize,
) -> Result<()> {
    let loaded = looplab_core::io::load_checkpoint(ckpt)?;
    match loaded {
        LoadedCheckpoint::F32(c) => sweep(
            &c.model,
            &c.schedule_for(None)?,
            &c.run_config.config_hash(),
            out,
            seed,
            start,
            len,
            reps,
            episodes,
        ),
        LoadedCheckpoint::F64(c) => sweep(
            &c.model,
            &c.schedule_for(None)?,
            &c.run_config.config_hash(),
            out,
            seed,
            start,
            len,
            reps,
            episodes,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    config_hash: &str,
    out: Option<PathBuf>,
    seed: u64,
    start: usize,
    len: usize,
    reps: usize,
    episodes: usize,
) -> Result<()> {
    let rng = RunRng::new(seed);
    let kinds: Vec<(TaskKind, u8)> = ALL_KINDS.into_iter().map(|k| (k, 0)).collect();
    let points = repeat_block_eval(model, schedule, start, len, reps, &rng, &kinds, episodes)?;

    let out_dir = super::resolve_out(out, "loop-eval");
    super::ensure_dir(&out_dir)?;
    super::write_json(
        &out_dir.join("loop_eval.json"),
        &DiagnosticReport::new("repeat", config_hash, &points),
    )?;
    figures::write_repeat_curve(&out_dir.join("fig7_repeat_block.csv"), &kinds, &points, "base")?;

    for p in &points {
        let accs: Vec<String> = kinds
            .iter()
            .zip(&p.accuracy)
            .map(|((k, d), a)| format!("{} d{}: {:.3}", k.as_str(), d, a))
            .collect();
        println!(
            "+{} reps (depth {}): {}",
            p.extra_reps,
            p.effective_depth,
            accs.join("  ")
        );
    }
    Ok(())
}
