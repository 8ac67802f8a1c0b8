//! Layer schedules: the ordered virtual-depth -> physical-layer mapping
//! that unifies standard, looped, and block-repeated execution.
//!
//! Descriptor mini-grammar (used in config files and CLI flags):
//!   "24"            standard 24-layer execution
//!   "4x6"           loop: a 4-layer block unrolled 6 times (depth 24)
//!   "4-4x4-4"       middle loop: unique prefix, repeated block, unique suffix
//!   "custom:[0,1,1,2]"  explicit steps

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Standard,
    /// `block` unique layers unrolled `reps` times.
    Loop { block: usize, reps: usize },
    /// Unique prefix of `prefix` layers, `block` layers looped `reps`
    /// times, unique suffix of `suffix` layers.
    MiddleLoop {
        prefix: usize,
        block: usize,
        reps: usize,
        suffix: usize,
    },
    Custom,
}

/// Ordered physical-layer indices, one per virtual layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    steps: Vec<usize>,
    kind: ScheduleKind,
    descriptor: String,
}

impl LayerSchedule {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Number of virtual layers executed in one forward pass.
    pub fn effective_depth(&self) -> usize {
        self.steps.len()
    }

    /// Number of distinct physical layers referenced.
    pub fn unique_layers(&self) -> usize {
        let mut seen: Vec<usize> = self.steps.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn is_standard(&self) -> bool {
        self.kind == ScheduleKind::Standard
    }

    fn custom(steps: Vec<usize>) -> Self {
        let descriptor = format!(
            "custom:[{}]",
            steps
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        Self {
            steps,
            kind: ScheduleKind::Custom,
            descriptor,
        }
    }

    /// Swap two virtual slots (blocks of `len` consecutive slots).
    pub fn swap_blocks(&self, i: usize, j: usize, len: usize) -> Result<Self> {
        let d = self.steps.len();
        if len == 0 || i + len > d || j + len > d {
            return Err(Error::Schedule(format!(
                "swap range out of depth {}: i={} j={} len={}",
                d, i, j, len
            )));
        }
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        if i != j && lo + len > hi {
            return Err(Error::Schedule(format!(
                "swap ranges overlap: i={} j={} len={}",
                i, j, len
            )));
        }
        let mut steps = self.steps.clone();
        for o in 0..len {
            steps.swap(i + o, j + o);
        }
        Ok(Self::custom(steps))
    }

    /// Insert `extra` additional copies of the virtual slots
    /// `[start, start+len)` immediately after the original block.
    pub fn repeat_block(&self, start: usize, len: usize, extra: usize) -> Result<Self> {
        let d = self.steps.len();
        if len == 0 || start + len > d {
            return Err(Error::Schedule(format!(
                "repeat range [{}, {}) out of depth {}",
                start,
                start + len,
                d
            )));
        }
        if extra == 0 {
            return Ok(self.clone());
        }
        let mut steps = Vec::with_capacity(d + extra * len);
        steps.extend_from_slice(&self.steps[..start + len]);
        for _ in 0..extra {
            steps.extend_from_slice(&self.steps[start..start + len]);
        }
        steps.extend_from_slice(&self.steps[start + len..]);
        Ok(Self::custom(steps))
    }
}

/// Parsed schedule descriptor, prior to binding against a model's
/// physical layer count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleSpec {
    Standard { layers: usize },
    Loop { block: usize, reps: usize },
    MiddleLoop { prefix: usize, block: usize, reps: usize, suffix: usize },
    Custom { steps: Vec<usize> },
}

impl ScheduleSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Schedule("empty schedule descriptor".into()));
        }
        if let Some(rest) = text.strip_prefix("custom:") {
            let inner = rest
                .trim()
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| {
                    Error::Schedule(format!("custom descriptor must be custom:[i,j,...]: {:?}", text))
                })?;
            let steps = inner
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Schedule(format!("bad step index {:?}", s)))
                })
                .collect::<Result<Vec<_>>>()?;
            if steps.is_empty() {
                return Err(Error::Schedule("custom schedule has no steps".into()));
            }
            return Ok(ScheduleSpec::Custom { steps });
        }
        let parts: Vec<&str> = text.split('-').collect();
        match parts.len() {
            1 => {
                if let Some((a, b)) = split_x(parts[0]) {
                    let (block, reps) = (parse_count(a)?, parse_count(b)?);
                    Ok(ScheduleSpec::Loop { block, reps })
                } else {
                    Ok(ScheduleSpec::Standard {
                        layers: parse_count(parts[0])?,
                    })
                }
            }
            3 => {
                let prefix = parse_count(parts[0])?;
                let suffix = parse_count(parts[2])?;
                let (a, b) = split_x(parts[1]).ok_or_else(|| {
                    Error::Schedule(format!("middle segment must be AxB: {:?}", text))
                })?;
                Ok(ScheduleSpec::MiddleLoop {
                    prefix,
                    block: parse_count(a)?,
                    reps: parse_count(b)?,
                    suffix,
                })
            }
            _ => Err(Error::Schedule(format!("unrecognized descriptor {:?}", text))),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            ScheduleSpec::Standard { layers } => layers.to_string(),
            ScheduleSpec::Loop { block, reps } => format!("{}x{}", block, reps),
            ScheduleSpec::MiddleLoop {
                prefix,
                block,
                reps,
                suffix,
            } => format!("{}-{}x{}-{}", prefix, block, reps, suffix),
            ScheduleSpec::Custom { steps } => format!(
                "custom:[{}]",
                steps
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        }
    }
}

fn split_x(s: &str) -> Option<(&str, &str)> {
    s.split_once('x')
}

fn parse_count(s: &str) -> Result<usize> {
    let n: usize = s
        .trim()
        .parse()
        .map_err(|_| Error::Schedule(format!("bad count {:?}", s)))?;
    if n == 0 {
        return Err(Error::Schedule(format!("counts must be positive, got {:?}", s)));
    }
    Ok(n)
}

/// Expand a descriptor against a model's physical layer count.
pub fn build_schedule(spec: &ScheduleSpec, n_physical_layers: usize) -> Result<LayerSchedule> {
    let descriptor = spec.descriptor();
    let (steps, kind) = match spec {
        ScheduleSpec::Standard { layers } => {
            if *layers != n_physical_layers {
                return Err(Error::Schedule(format!(
                    "standard schedule of {} layers on a {}-layer model",
                    layers, n_physical_layers
                )));
            }
            ((0..*layers).collect(), ScheduleKind::Standard)
        }
        ScheduleSpec::Loop { block, reps } => {
            if *block != n_physical_layers {
                return Err(Error::Schedule(format!(
                    "loop block {} does not cover the {} physical layers",
                    block, n_physical_layers
                )));
            }
            let mut steps = Vec::with_capacity(block * reps);
            for _ in 0..*reps {
                steps.extend(0..*block);
            }
            (
                steps,
                ScheduleKind::Loop {
                    block: *block,
                    reps: *reps,
                },
            )
        }
        ScheduleSpec::MiddleLoop {
            prefix,
            block,
            reps,
            suffix,
        } => {
            if prefix + block + suffix != n_physical_layers {
                return Err(Error::Schedule(format!(
                    "{}+{}+{} unique layers != {} physical layers",
                    prefix, block, suffix, n_physical_layers
                )));
            }
            let mut steps: Vec<usize> = (0..*prefix).collect();
            for _ in 0..*reps {
                steps.extend(*prefix..prefix + block);
            }
            steps.extend(prefix + block..n_physical_layers);
            (
                steps,
                ScheduleKind::MiddleLoop {
                    prefix: *prefix,
                    block: *block,
                    reps: *reps,
                    suffix: *suffix,
                },
            )
        }
        ScheduleSpec::Custom { steps } => {
            for &s in steps {
                if s >= n_physical_layers {
                    return Err(Error::Schedule(format!(
                        "custom step {} out of range for {} physical layers",
                        s, n_physical_layers
                    )));
                }
            }
            (steps.clone(), ScheduleKind::Custom)
        }
    };
    Ok(LayerSchedule {
        steps,
        kind,
        descriptor,
    })
}

/// Parse and expand in one call.
pub fn schedule_from_descriptor(text: &str, n_physical_layers: usize) -> Result<LayerSchedule> {
    build_schedule(&ScheduleSpec::parse(text)?, n_physical_layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loop_4x6_reaches_depth_24() {
        let s = schedule_from_descriptor("4x6", 4).unwrap();
        assert_eq!(s.effective_depth(), 24);
        assert_eq!(s.unique_layers(), 4);
        let expected: Vec<usize> = (0..6).flat_map(|_| 0..4).collect();
        assert_eq!(s.steps(), &expected[..]);
    }

    #[test]
    fn standard_is_identity() {
        let s = schedule_from_descriptor("24", 24).unwrap();
        assert_eq!(s.steps(), (0..24).collect::<Vec<_>>().as_slice());
        assert!(s.is_standard());
    }

    #[test]
    fn middle_loop_4_4x4_4() {
        let s = schedule_from_descriptor("4-4x4-4", 12).unwrap();
        assert_eq!(s.unique_layers(), 12);
        assert_eq!(s.effective_depth(), 24);
        let mut expected: Vec<usize> = (0..4).collect();
        for _ in 0..4 {
            expected.extend(4..8);
        }
        expected.extend(8..12);
        assert_eq!(s.steps(), &expected[..]);
    }

    #[test]
    fn custom_descriptor_round_trips() {
        let s = schedule_from_descriptor("custom:[0,1,1,0]", 2).unwrap();
        assert_eq!(s.steps(), &[0, 1, 1, 0]);
        let again = schedule_from_descriptor(s.descriptor(), 2).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn rejects_bad_descriptors() {
        assert!(ScheduleSpec::parse("").is_err());
        assert!(ScheduleSpec::parse("4x").is_err());
        assert!(ScheduleSpec::parse("0x3").is_err());
        assert!(ScheduleSpec::parse("4-4x4").is_err());
        assert!(ScheduleSpec::parse("custom:0,1").is_err());
        assert!(schedule_from_descriptor("8", 4).is_err());
        assert!(schedule_from_descriptor("custom:[5]", 4).is_err());
        assert!(schedule_from_descriptor("2-2x2-2", 8).is_err());
    }

    #[test]
    fn repeat_block_inserts_copies_after_block() {
        let s = schedule_from_descriptor("8", 8).unwrap();
        let r = s.repeat_block(3, 2, 1).unwrap();
        assert_eq!(r.steps(), &[0, 1, 2, 3, 4, 3, 4, 5, 6, 7]);
        assert_eq!(r.effective_depth(), s.effective_depth() + 2);
        let same = s.repeat_block(3, 2, 0).unwrap();
        assert_eq!(same, s);
    }

    #[test]
    fn repeating_loop_block_equals_more_reps() {
        // On a fully looped model, repeating the recurrent block is the
        // same schedule as looping k+extra times.
        let base = schedule_from_descriptor("2x3", 2).unwrap();
        let grown = base.repeat_block(4, 2, 2).unwrap();
        let direct = schedule_from_descriptor("2x5", 2).unwrap();
        assert_eq!(grown.steps(), direct.steps());
    }

    #[test]
    fn swap_validates_ranges() {
        let s = schedule_from_descriptor("8", 8).unwrap();
        assert!(s.swap_blocks(3, 4, 2).is_err()); // overlap
        assert!(s.swap_blocks(7, 0, 2).is_err()); // out of depth
        let sw = s.swap_blocks(1, 5, 1).unwrap();
        assert_eq!(sw.steps(), &[0, 5, 2, 3, 4, 1, 6, 7]);
        let idem = s.swap_blocks(2, 2, 1).unwrap();
        assert_eq!(idem.steps(), s.steps());
    }
}
