//! `compare`: trade-off table across run directories (unique parameters,
//! inference FLOPs, training FLOPs, accuracy).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use looplab_core::io::checkpoint::LoadedCheckpoint;
use looplab_core::io::config::RunConfig;
use looplab_core::io::figures::{write_tradeoffs, TradeoffRow};

pub fn run(run_dirs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    if run_dirs.len() < 2 {
        bail!("compare needs at least two run directories");
    }
    let mut rows = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        rows.push(row_for(dir).with_context(|| format!("reading run {}", dir.display()))?);
    }

    let out_dir = super::resolve_out(out, "compare");
    super::ensure_dir(&out_dir)?;
    write_tradeoffs(&out_dir.join("fig1_tradeoffs.csv"), &rows)?;

    println!(
        "{:<28} {:>14} {:>18} {:>18} {:>9}",
        "run", "unique_params", "inference_flops", "training_flops", "accuracy"
    );
    for r in &rows {
        println!(
            "{:<28} {:>14} {:>18} {:>18} {:>9}",
            r.label,
            r.unique_params,
            r.inference_flops,
            r.training_flops,
            r.accuracy.map(|a| format!("{:.3}", a)).unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

fn row_for(dir: &Path) -> Result<TradeoffRow> {
    let config_text = std::fs::read_to_string(dir.join("config.toml"))?;
    let config = RunConfig::from_toml(&config_text)?;
    let ckpt_path = dir.join("checkpoints").join("final.llck");
    let unique_params = match looplab_core::io::load_checkpoint(&ckpt_path)? {
        LoadedCheckpoint::F32(c) => c.model.unique_param_count(),
        LoadedCheckpoint::F64(c) => c.model.unique_param_count(),
    };
    // Accuracy from a prior `eval --out <run dir>/eval`, when present.
    let accuracy = std::fs::read_to_string(dir.join("eval").join("eval.json"))
        .ok()
        .and_then(|text| serde_json::from_str::<serde_json::Value>(&text).ok())
        .and_then(|v| v.get("mean_accuracy").and_then(|a| a.as_f64()));
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(TradeoffRow {
        label,
        unique_params,
        inference_flops: config.inference_flops()?,
        training_flops: config.training_flops()?,
        accuracy,
    })
}
