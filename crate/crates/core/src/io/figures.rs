//! Flat CSV tables for plotting, one file per figure analog.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::mech::{DepthProfile, EffectMatrix, LensEvalReport, NormProfile, RepeatPoint, SwapReport};
use crate::tasks::TaskKind;
use crate::trainer::SftCurve;

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Depth-usage profile: per-layer skip magnitudes and lens stats.
pub fn write_depth_usage(
    path: &Path,
    depth: &DepthProfile,
    lens: Option<&LensEvalReport>,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "layer,skip_magnitude,skip_probability,lens_kl,lens_top5_overlap")?;
    for (i, (m, p)) in depth.magnitudes.iter().zip(&depth.distribution).enumerate() {
        let (kl, top5) = lens
            .and_then(|l| l.per_layer.get(i))
            .map(|s| (s.kl_mean.to_string(), s.top5_overlap_mean.to_string()))
            .unwrap_or_default();
        writeln!(f, "{},{},{},{},{}", i, m, p, kl, top5)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_norm_profiles(path: &Path, norms: &NormProfile) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "layer,residual_in_norm,residual_out_norm,attn_ratio,mlp_ratio")?;
    for i in 0..norms.residual_in_norm.len() {
        writeln!(
            f,
            "{},{},{},{},{}",
            i,
            norms.residual_in_norm[i],
            norms.residual_out_norm[i],
            norms.attn_ratio[i],
            norms.mlp_ratio[i]
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_future_effects(path: &Path, effects: &EffectMatrix) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "source,target,relative_change")?;
    for s in 0..effects.effective_depth {
        for l in 0..effects.effective_depth {
            if let Some(v) = effects.get(s, l) {
                writeln!(f, "{},{},{}", s, l, v)?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn write_swaps(path: &Path, reports: &[SwapReport]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(
        f,
        "slot_a,slot_b,block_len,lm_loss_before,lm_loss_after,lm_relative_degradation,accuracy_before,accuracy_after,accuracy_relative_degradation,same_physical"
    )?;
    for r in reports {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.slot_a,
            r.slot_b,
            r.block_len,
            r.lm_loss_before,
            r.lm_loss_after,
            r.lm_relative_degradation,
            r.accuracy_before,
            r.accuracy_after,
            r.accuracy_relative_degradation,
            r.same_physical
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Repeat-block sweep; `phase` distinguishes before/after retrofit runs.
pub fn write_repeat_curve(
    path: &Path,
    kinds: &[(TaskKind, u8)],
    points: &[RepeatPoint],
    phase: &str,
) -> Result<()> {
    let mut f = create(path)?;
    let mut header = String::from("phase,extra_reps,effective_depth");
    for (kind, depth) in kinds {
        header.push_str(&format!(",acc_{}_d{}", kind.as_str(), depth));
    }
    writeln!(f, "{}", header)?;
    for p in points {
        let mut row = format!("{},{},{}", phase, p.extra_reps, p.effective_depth);
        for a in &p.accuracy {
            row.push_str(&format!(",{}", a));
        }
        writeln!(f, "{}", row)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_sft_curves(path: &Path, curves: &[SftCurve]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "kind,depth,size,mean,std")?;
    for c in curves {
        for p in &c.points {
            writeln!(f, "{},{},{},{},{}", c.kind.as_str(), c.depth, p.size, p.mean, p.std)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Trade-off table row (unique parameters / inference / training FLOPs
/// against accuracy).
pub struct TradeoffRow {
    pub label: String,
    pub unique_params: u64,
    pub inference_flops: u128,
    pub training_flops: u128,
    pub accuracy: Option<f64>,
}

pub fn write_tradeoffs(path: &Path, rows: &[TradeoffRow]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "run,unique_params,inference_flops,training_flops,accuracy")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.label,
            r.unique_params,
            r.inference_flops,
            r.training_flops,
            r.accuracy.map(|a| a.to_string()).unwrap_or_default()
        )?;
    }
    f.flush()?;
    Ok(())
}

/// ICL sweep table.
pub fn write_icl_curve(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "n_shots,accuracy")?;
    for (n, acc) in rows {
        writeln!(f, "{},{}", n, acc)?;
    }
    f.flush()?;
    Ok(())
}
