//! `train`: full run orchestration with checkpoints, metrics, growth
//! events, and bit-exact resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use looplab_core::io::checkpoint::{Checkpoint, LoadedCheckpoint};
use looplab_core::io::config::{Precision, RunConfig};
use looplab_core::io::metrics::{
    append_event, write_manifest, write_summary, Manifest, MetricsWriter, RunSummary,
};
use looplab_core::numerics::Element;
use looplab_core::rng::RunRng;
use looplab_core::trainer::Trainer;

pub fn run(
    config_path: &Path,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
    resume: Option<PathBuf>,
    dry_run: bool,
) -> Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let mut config = RunConfig::from_toml(&text)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }

    if dry_run {
        // Validate everything buildable, print the plan, change nothing.
        match config.precision {
            Precision::F32 => drop(config.build_trainer::<f32>()?),
            Precision::F64 => drop(config.build_trainer::<f64>()?),
        }
        println!("config ok: hash {}", config.config_hash());
        println!(
            "schedule {} (effective depth {}), {} steps, batch {} x context {}",
            config.schedule,
            config.schedule()?.effective_depth(),
            config.trainer.steps,
            config.trainer.batch_size,
            config.trainer.context
        );
        if let Some(plan) = &config.growth {
            println!(
                "growth: {:?} block {} to depth {} over {} steps (budgets {:?})",
                plan.operator,
                plan.block_size,
                plan.final_depth,
                plan.total_steps,
                plan.budgets()?
            );
        }
        println!("training FLOPs (analytic): {}", config.training_flops()?);
        return Ok(());
    }

    let run_name = format!("run-{}-s{}", &config.config_hash()[..12], config.seed);
    let run_dir = super::resolve_out(out, &run_name);
    super::ensure_dir(&run_dir)?;

    match config.precision {
        Precision::F32 => run_typed::<f32>(&config, &run_dir, resume),
        Precision::F64 => run_typed::<f64>(&config, &run_dir, resume),
    }
}

fn run_typed<E: Element>(config: &RunConfig, run_dir: &Path, resume: Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let mut trainer: Trainer<E> = match &resume {
        None => config.build_trainer()?,
        Some(ckpt_path) => resume_trainer(config, ckpt_path)?,
    };

    write_manifest(
        &run_dir.join("manifest.json"),
        &Manifest {
            config_hash: config.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            schedule: config.schedule.clone(),
            precision: E::DTYPE.to_string(),
            seed: config.seed,
        },
    )?;
    std::fs::write(
        run_dir.join("config.toml"),
        toml::to_string_pretty(config).map_err(|e| anyhow!("config render: {}", e))?,
    )?;

    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        // Appending after resume would duplicate the header; keep it
        // simple and truncate to this segment's rows.
        MetricsWriter::create(&run_dir.join(format!("metrics_from_{}.csv", trainer.step())))?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let events_path = run_dir.join("events.jsonl");
    let ckpt_dir = run_dir.join("checkpoints");
    let every = config.trainer.checkpoint_every;
    let total = config.trainer.steps;
    let mut events_written = trainer.events.len();
    let mut last_loss = f64::NAN;

    while trainer.step() < total {
        let m = trainer.step_once()?;
        last_loss = m.loss;
        metrics.append(&m)?;
        while events_written < trainer.events.len() {
            append_event(&events_path, &trainer.events[events_written])?;
            events_written += 1;
        }
        let done = trainer.step();
        if every > 0 && done % every == 0 && done < total {
            save_checkpoint(&trainer, config, &ckpt_dir.join(format!("ckpt_{}.llck", done)))?;
        }
        if done % 500 == 0 || done == total {
            eprintln!(
                "step {}/{} loss {:.4} lr {:.2e} [{}]",
                done, total, m.loss, m.lr, m.dominant_component
            );
        }
    }
    metrics.flush()?;
    save_checkpoint(&trainer, config, &ckpt_dir.join("final.llck"))?;

    write_summary(
        &run_dir.join("summary.json"),
        &RunSummary {
            config_hash: config.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            final_step: trainer.step(),
            final_loss: last_loss,
            tokens_trained: config.trainer.tokens_per_step() * trainer.step(),
            n_growth_events: trainer.events.len(),
            final_depth: trainer.model.config().n_physical_layers,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    eprintln!("run complete: {}", run_dir.display());
    Ok(())
}

fn save_checkpoint<E: Element>(trainer: &Trainer<E>, config: &RunConfig, path: &Path) -> Result<()> {
    Checkpoint {
        model: trainer.model.clone(),
        opt: trainer.opt.clone(),
        step: trainer.step(),
        schedule_descriptor: trainer.schedule.descriptor().to_string(),
        run_config: config.clone(),
        growth_events: trainer.events.clone(),
        rng_seed: config.seed,
    }
    .save(path)?;
    Ok(())
}

fn resume_trainer<E: Element>(config: &RunConfig, ckpt_path: &Path) -> Result<Trainer<E>> {
    let loaded = looplab_core::io::load_checkpoint(ckpt_path)?;
    if loaded.run_config().config_hash() != config.config_hash() {
        bail!(
            "checkpoint was written by a different config (hash {} vs {})",
            loaded.run_config().config_hash(),
            config.config_hash()
        );
    }
    let ckpt = downcast::<E>(loaded, ckpt_path)?;
    let schedule = ckpt.schedule_for(None)?;
    Ok(Trainer::from_state(
        ckpt.model,
        ckpt.opt,
        schedule,
        config.trainer.clone(),
        config.mixture.clone(),
        RunRng::new(config.seed),
        config.growth.clone(),
        config.cooldown_loop,
        ckpt.growth_events,
    )?)
}

/// Match the checkpoint dtype against the requested element type.
pub fn downcast<E: Element>(loaded: LoadedCheckpoint, path: &Path) -> Result<Checkpoint<E>> {
    // Two dtypes exist; dispatch by the DTYPE string.
    match (E::DTYPE, loaded) {
        ("f32", LoadedCheckpoint::F32(c)) => {
            // Caller asked for the stored dtype; transmute-free repack via
            // byte round-trip is unnecessary: the types match.
            let any: Box<dyn std::any::Any> = Box::new(c);
            Ok(*any.downcast::<Checkpoint<E>>().expect("dtype match"))
        }
        ("f64", LoadedCheckpoint::F64(c)) => {
            let any: Box<dyn std::any::Any> = Box::new(c);
            Ok(*any.downcast::<Checkpoint<E>>().expect("dtype match"))
        }
        (want, got) => bail!(
            "{} holds dtype {}, but this run needs {}",
            path.display(),
            match got {
                LoadedCheckpoint::F32(_) => "f32",
                LoadedCheckpoint::F64(_) => "f64",
            },
            want
        ),
    }
}
