//! `gen-tasks`: write a JSONL dataset of task instances.

use std::path::Path;

use anyhow::Result;

use looplab_core::rng::RunRng;
use looplab_core::tasks::{gen_task, write_dataset, TaskKind};

pub fn run(kind: &str, depth: u8, n: usize, seed: u64, out: &Path) -> Result<()> {
    let kind: TaskKind = kind.parse()?;
    let rng = RunRng::new(seed);
    let instances = (0..n)
        .map(|i| gen_task(&rng, kind, depth, i as u64))
        .collect::<looplab_core::Result<Vec<_>>>()?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_dataset(out, &instances)?;
    println!("wrote {} {} instances (depth {}) to {}", n, kind.as_str(), depth, out.display());
    Ok(())
}
