//! `sft`: supervised fine-tuning sweep (accuracy vs dataset size,
//! mean +/- std over seeds).

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use looplab_core::error::Error;
use looplab_core::io::checkpoint::LoadedCheckpoint;
use looplab_core::io::figures;
use looplab_core::rng::RunRng;
use looplab_core::trainer::{sft_sweep, SftConfig};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SftFileConfig {
    version: u32,
    /// Base seed for the fixed evaluation set.
    #[serde(default = "default_eval_seed")]
    eval_seed: u64,
    sft: SftConfig,
}

fn default_eval_seed() -> u64 {
    42
}

#[derive(Serialize)]
struct SftReport<'a> {
    config_hash: String,
    code_version: String,
    eval_seed: u64,
    curves: &'a [looplab_core::trainer::SftCurve],
}

pub fn run(ckpt: &Path, config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config_path)?;
    let mut file_config: SftFileConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("sft config: {}", e)))?;
    if file_config.version != 1 {
        return Err(Error::config("sft config version must be 1").into());
    }
    if let Some(s) = seed {
        file_config.eval_seed = s;
    }
    file_config.sft.validate()?;

    let loaded = looplab_core::io::load_checkpoint(ckpt)?;
    let eval_rng = RunRng::new(file_config.eval_seed);
    let (curves, hash) = match loaded {
        LoadedCheckpoint::F32(c) => (
            sft_sweep(&c.model, &c.schedule_for(None)?, &file_config.sft, &eval_rng)?,
            c.run_config.config_hash(),
        ),
        LoadedCheckpoint::F64(c) => (
            sft_sweep(&c.model, &c.schedule_for(None)?, &file_config.sft, &eval_rng)?,
            c.run_config.config_hash(),
        ),
    };

    let out_dir = super::resolve_out(out, "sft");
    super::ensure_dir(&out_dir)?;
    super::write_json(
        &out_dir.join("sft.json"),
        &SftReport {
            config_hash: hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            eval_seed: file_config.eval_seed,
            curves: &curves,
        },
    )?;
    figures::write_sft_curves(&out_dir.join("fig8_sft.csv"), &curves)?;
    for c in &curves {
        for p in &c.points {
            println!(
                "{} d{} size {:>4}: {:.3} +/- {:.3}",
                c.kind.as_str(),
                c.depth,
                p.size,
                p.mean,
                p.std
            );
        }
    }
    Ok(())
}
