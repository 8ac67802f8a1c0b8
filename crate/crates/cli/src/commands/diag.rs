//! `diag`: mechanistic diagnostics over a checkpoint, with JSON reports
//! and per-figure CSV tables.

use std::path::PathBuf;

use anyhow::{bail, Result};

use looplab_core::io::checkpoint::LoadedCheckpoint;
use looplab_core::io::figures;
use looplab_core::mech::{
    depth_score, diag_batch, future_local_effects, norm_profiles, repeat_block_eval, swap_eval,
    tuned_lens_eval, tuned_lens_fit, DiagnosticReport, LensFitConfig,
};
use looplab_core::model::{LayerSchedule, Model};
use looplab_core::numerics::Element;
use looplab_core::rng::RunRng;
use looplab_core::tasks::TaskKind;

pub struct DiagArgs {
    pub ckpt: PathBuf,
    pub which: String,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub schedule: Option<String>,
    pub docs: usize,
    pub episodes: usize,
    pub swap_len: usize,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub reps: usize,
}

const WHICH: [&str; 7] = ["depth", "lens", "norms", "effects", "swap", "repeat", "all"];

pub fn run(args: DiagArgs) -> Result<()> {
    if !WHICH.contains(&args.which.as_str()) {
        bail!("--which must be one of {:?}", WHICH);
    }
    let loaded = looplab_core::io::load_checkpoint(&args.ckpt)?;
    match loaded {
        LoadedCheckpoint::F32(c) => {
            let sched = c.schedule_for(args.schedule.as_deref())?;
            let block = c.run_config.growth.as_ref().map(|p| p.block_size);
            diagnose(&c.model, &sched, &c.run_config.config_hash(), block, &args)
        }
        LoadedCheckpoint::F64(c) => {
            let sched = c.schedule_for(args.schedule.as_deref())?;
            let block = c.run_config.growth.as_ref().map(|p| p.block_size);
            diagnose(&c.model, &sched, &c.run_config.config_hash(), block, &args)
        }
    }
}

fn diagnose<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    config_hash: &str,
    growth_block: Option<usize>,
    args: &DiagArgs,
) -> Result<()> {
    let out_dir = super::resolve_out(args.out.clone(), "diag");
    super::ensure_dir(&out_dir)?;
    let rng = RunRng::new(args.seed);
    let context = (model.config().max_context - 1).min(128);
    let batch = diag_batch(&rng, args.docs, context)?;
    let digest_before = model.param_digest();
    let all = args.which == "all";
    let depth = schedule.effective_depth();

    let mut depth_profile = None;
    let mut lens_report = None;

    if all || args.which == "depth" {
        let profile = depth_score(model, schedule, &batch)?;
        super::write_json(
            &out_dir.join("diag_depth.json"),
            &DiagnosticReport::new("depth", config_hash, &profile),
        )?;
        println!("depth score: {:.3} / {}", profile.score, depth - 1);
        depth_profile = Some(profile);
    }
    if all || args.which == "lens" {
        // Adapter training data and held-out evaluation data are disjoint
        // slices of one generated set.
        let train_n = args.docs.max(8) * 4;
        let combined = diag_batch(&rng, train_n + args.docs.max(4), context)?;
        let (train, heldout) = combined.split_at(train_n);
        let lens = tuned_lens_fit(model, schedule, train, &LensFitConfig::default(), &rng)?;
        let report = tuned_lens_eval(model, schedule, &lens, heldout)?;
        super::write_json(
            &out_dir.join("diag_lens.json"),
            &DiagnosticReport::new("lens", config_hash, &report),
        )?;
        lens_report = Some(report);
    }
    if depth_profile.is_some() {
        figures::write_depth_usage(
            &out_dir.join("fig3_depth_usage.csv"),
            depth_profile.as_ref().unwrap(),
            lens_report.as_ref(),
        )?;
    }
    if all || args.which == "norms" {
        let profile = norm_profiles(model, schedule, &batch)?;
        super::write_json(
            &out_dir.join("diag_norms.json"),
            &DiagnosticReport::new("norms", config_hash, &profile),
        )?;
        figures::write_norm_profiles(&out_dir.join("fig4_norm_profiles.csv"), &profile)?;
        if let Some(lag) = profile.attn_ratio_peak_lag {
            println!("attention-ratio autocorrelation peak lag: {}", lag);
        }
    }
    if all || args.which == "effects" {
        let matrix = future_local_effects(model, schedule, &batch)?;
        super::write_json(
            &out_dir.join("diag_effects.json"),
            &DiagnosticReport::new("effects", config_hash, &matrix),
        )?;
        figures::write_future_effects(&out_dir.join("fig5_future_effects.csv"), &matrix)?;
    }
    if all || args.which == "swap" {
        // Adjacent swaps across the depth.
        let mut reports = Vec::new();
        for i in 0..depth.saturating_sub(args.swap_len) {
            let j = i + args.swap_len;
            if j + args.swap_len > depth {
                break;
            }
            reports.push(swap_eval(
                model,
                schedule,
                i,
                j,
                args.swap_len,
                &rng,
                TaskKind::VaMath,
                0,
                args.episodes,
            )?);
        }
        super::write_json(
            &out_dir.join("diag_swap.json"),
            &DiagnosticReport::new("swap", config_hash, &reports),
        )?;
        figures::write_swaps(&out_dir.join("fig6_swap.csv"), &reports)?;
    }
    if all || args.which == "repeat" {
        let len = args.len.or(growth_block).unwrap_or(2).min(depth);
        let start = args.start.unwrap_or((depth - len) / 2);
        let kinds: Vec<(TaskKind, u8)> = looplab_core::tasks::ALL_KINDS
            .into_iter()
            .map(|k| (k, 0))
            .collect();
        let points = repeat_block_eval(
            model,
            schedule,
            start,
            len,
            args.reps,
            &rng,
            &kinds,
            args.episodes,
        )?;
        super::write_json(
            &out_dir.join("diag_repeat.json"),
            &DiagnosticReport::new("repeat", config_hash, &points),
        )?;
        figures::write_repeat_curve(
            &out_dir.join("fig7_repeat_block.csv"),
            &kinds,
            &points,
            "base",
        )?;
    }

    assert_eq!(
        digest_before,
        model.param_digest(),
        "diagnostics must not mutate parameters"
    );
    println!("diagnostics written to {}", out_dir.display());
    Ok(())
}
