pub mod compare;
pub mod diag;
pub mod eval;
pub mod gen_tasks;
pub mod loop_eval;
pub mod sft;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::Result;

/// Resolve an output directory: explicit `--out`, else `$LOOPLAB_OUT/<name>`,
/// else `./<name>`.
pub fn resolve_out(out: Option<PathBuf>, name: &str) -> PathBuf {
    match out {
        Some(p) => p,
        None => match std::env::var_os(crate::OUT_ENV) {
            Some(root) => Path::new(&root).join(name),
            None => PathBuf::from(name),
        },
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
