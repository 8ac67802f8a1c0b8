//! Reasoning-primitive task generators and their brute-force resolver.
//!
//! Two families: copying (a token sequence is restated up to a blank and
//! the model must continue it in the original order) and variable
//! assignment (resolve a queried variable through `depth` substitution
//! hops). Copy instances carry 10 choices, variable assignment 5, which
//! pins chance at 10% and 20%.
//!
//! All prompt surface forms live in `templates` so the rendering is
//! editable in one place.

mod eval;
pub mod words;

pub use eval::{
    gen_episodes,
    eval_mc, icl_sweep, max_feasible_shots, ChoiceScorer, FewShotEpisode, LmScorer, McReport,
    PermutationScorer,
};
pub use words::WORDS;

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RunRng;

pub mod templates {
    pub const COPY_HEADER: &str = "Fill in the blank:\n";
    pub const VA_HEADER: &str = "Fill in blank:\n\n";
    pub const BLANK: &str = "___. ->";
    /// Separator between few-shot examples in an episode.
    pub const SHOT_SEPARATOR: &str = "\n\n";
}

pub const COPY_CHOICES: usize = 10;
pub const VA_CHOICES: usize = 5;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "copy-random")]
    CopyRandom,
    #[serde(rename = "copy-real")]
    CopyReal,
    #[serde(rename = "va-basic")]
    VaBasic,
    #[serde(rename = "va-math")]
    VaMath,
    #[serde(rename = "va-code")]
    VaCode,
}

pub const ALL_KINDS: [TaskKind; 5] = [
    TaskKind::CopyRandom,
    TaskKind::CopyReal,
    TaskKind::VaBasic,
    TaskKind::VaMath,
    TaskKind::VaCode,
];

impl TaskKind {
    pub fn is_copy(self) -> bool {
        matches!(self, TaskKind::CopyRandom | TaskKind::CopyReal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CopyRandom => "copy-random",
            TaskKind::CopyReal => "copy-real",
            TaskKind::VaBasic => "va-basic",
            TaskKind::VaMath => "va-math",
            TaskKind::VaCode => "va-code",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_KINDS
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Task(format!("unknown task kind {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub var: String,
    pub rhs: Rhs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rhs {
    Value(i64),
    /// Rendered as `a+b`; evaluates to their sum.
    Expr { a: i64, b: i64 },
    Var(String),
}

impl Rhs {
    fn base_value(&self) -> Option<i64> {
        match self {
            Rhs::Value(v) => Some(*v),
            Rhs::Expr { a, b } => Some(a + b),
            Rhs::Var(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskMeta {
    Copy {
        tokens: Vec<String>,
        prefix_len: usize,
    },
    Va {
        assignments: Vec<Assignment>,
        query: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub schema_version: u32,
    pub kind: TaskKind,
    pub depth: u8,
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    pub seed: u64,
    pub meta: TaskMeta,
}

impl TaskInstance {
    pub fn answer(&self) -> &str {
        &self.choices[self.answer_index]
    }

    /// Stable content hash of the prompt, for leakage checks.
    pub fn prompt_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.prompt.as_bytes());
        h.finalize().into()
    }

    fn validate(&self) -> Result<()> {
        if self.answer_index >= self.choices.len() {
            return Err(Error::Task("answer_index out of range".into()));
        }
        let expected = if self.kind.is_copy() { COPY_CHOICES } else { VA_CHOICES };
        if self.choices.len() != expected {
            return Err(Error::Task(format!(
                "{} choices for {:?}, expected {}",
                self.choices.len(),
                self.kind,
                expected
            )));
        }
        for i in 0..self.choices.len() {
            for j in i + 1..self.choices.len() {
                if self.choices[i] == self.choices[j] {
                    return Err(Error::Task("choices must be pairwise distinct".into()));
                }
            }
        }
        Ok(())
    }
}

// ── Generators ──────────────────────────────────────────────────────

fn rand_below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    // Rejection sampling for an unbiased draw.
    let bound = (u64::MAX / n as u64) * n as u64;
    loop {
        let x = rng.next_u64();
        if x < bound {
            return (x % n as u64) as usize;
        }
    }
}

fn sample_distinct<T: Clone + PartialEq>(
    rng: &mut ChaCha8Rng,
    pool: &[T],
    n: usize,
) -> Result<Vec<T>> {
    if pool.len() < n {
        return Err(Error::Task(format!(
            "lexicon of {} entries cannot provide {} distinct tokens",
            pool.len(),
            n
        )));
    }
    let mut picked: Vec<T> = Vec::with_capacity(n);
    let mut guard = 0;
    while picked.len() < n {
        let cand = pool[rand_below(rng, pool.len())].clone();
        if !picked.contains(&cand) {
            picked.push(cand);
        }
        guard += 1;
        if guard > 10_000 * n {
            return Err(Error::Task("distinct sampling stalled".into()));
        }
    }
    Ok(picked)
}

fn random_three_letter(rng: &mut ChaCha8Rng) -> String {
    (0..3)
        .map(|_| (b'a' + rand_below(rng, 26) as u8) as char)
        .collect()
}

/// Copying task: a fresh token sequence, its first `prefix_len` tokens
/// restated, and a blank for the next token in original order.
pub fn gen_copy(
    rng: &RunRng,
    kind: TaskKind,
    seq_len: usize,
    prefix_len: usize,
    index: u64,
) -> Result<TaskInstance> {
    if !kind.is_copy() {
        return Err(Error::Task(format!("{:?} is not a copying task", kind)));
    }
    if prefix_len >= seq_len {
        return Err(Error::Task(format!(
            "prefix_len {} must be < seq_len {}",
            prefix_len, seq_len
        )));
    }
    let seed = rng.derive_seed(kind.as_str(), index);
    let mut stream = rng.indexed_stream(kind.as_str(), index);
    let tokens: Vec<String> = match kind {
        TaskKind::CopyRandom => {
            let mut seen: Vec<String> = Vec::with_capacity(seq_len);
            let mut guard = 0;
            while seen.len() < seq_len {
                let t = random_three_letter(&mut stream);
                if !seen.contains(&t) {
                    seen.push(t);
                }
                guard += 1;
                if guard > 10_000 {
                    return Err(Error::Task("random-letter sampling stalled".into()));
                }
            }
            seen
        }
        TaskKind::CopyReal => sample_distinct(&mut stream, words::WORDS, seq_len)?
            .into_iter()
            .map(String::from)
            .collect(),
        _ => unreachable!(),
    };
    let prompt = format!(
        "{}{} {} {}",
        templates::COPY_HEADER,
        tokens.join(" "),
        tokens[..prefix_len].join(" "),
        templates::BLANK
    );
    let instance = TaskInstance {
        schema_version: DATASET_SCHEMA_VERSION,
        kind,
        depth: 0,
        prompt,
        choices: tokens.clone(),
        answer_index: prefix_len,
        seed,
        meta: TaskMeta::Copy {
            tokens,
            prefix_len,
        },
    };
    instance.validate()?;
    Ok(instance)
}

/// Variable-assignment task at substitution depth `d`.
///
/// Layer 0 binds `n_base` variables to distinct values; each later layer
/// binds fresh variables onto a permutation of the previous layer. The
/// query picks a depth-`d` variable, so resolving it takes `d` hops.
pub fn gen_var_assignment(
    rng: &RunRng,
    kind: TaskKind,
    depth: u8,
    n_base: usize,
    index: u64,
) -> Result<TaskInstance> {
    if kind.is_copy() {
        return Err(Error::Task(format!("{:?} is not a variable-assignment task", kind)));
    }
    if depth > 2 {
        return Err(Error::Task("depth must be 0, 1 or 2".into()));
    }
    let layers = depth as usize + 1;
    if layers * n_base > 26 {
        return Err(Error::Task("not enough variable names".into()));
    }
    let seed = rng.derive_seed(&format!("{}/d{}", kind.as_str(), depth), index);
    let mut stream = rng.indexed_stream(&format!("{}/d{}", kind.as_str(), depth), index);

    let letters: Vec<char> = ('a'..='z').collect();
    let vars: Vec<String> = sample_distinct(&mut stream, &letters, layers * n_base)?
        .into_iter()
        .map(String::from)
        .collect();
    let value_pool: Vec<i64> = (1..=29).collect();
    let values = sample_distinct(&mut stream, &value_pool, n_base)?;

    let mut assignments: Vec<Assignment> = Vec::with_capacity(layers * n_base);
    // Base layer.
    for (i, v) in values.iter().enumerate() {
        let rhs = if kind == TaskKind::VaMath {
            let a = rand_below(&mut stream, *v as usize + 1) as i64;
            Rhs::Expr { a, b: v - a }
        } else {
            Rhs::Value(*v)
        };
        assignments.push(Assignment {
            var: vars[i].clone(),
            rhs,
        });
    }
    // Reference layers: permutation of the previous layer's variables.
    for layer in 1..layers {
        let mut perm: Vec<usize> = (0..n_base).collect();
        for i in (1..n_base).rev() {
            perm.swap(i, rand_below(&mut stream, i + 1));
        }
        for i in 0..n_base {
            assignments.push(Assignment {
                var: vars[layer * n_base + i].clone(),
                rhs: Rhs::Var(vars[(layer - 1) * n_base + perm[i]].clone()),
            });
        }
    }
    // Query a variable from the deepest layer.
    let q = rand_below(&mut stream, n_base);
    let query = vars[(layers - 1) * n_base + q].clone();

    // Resolve through the chain for the stored answer.
    let mut cur = query.clone();
    let answer_value = loop {
        let a = assignments
            .iter()
            .rev()
            .find(|a| a.var == cur)
            .expect("generator emitted dangling reference");
        match &a.rhs {
            Rhs::Var(next) => cur = next.clone(),
            rhs => break rhs.base_value().unwrap(),
        }
    };
    let choices: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let answer_index = values
        .iter()
        .position(|v| *v == answer_value)
        .expect("answer must be a base value");

    let mut lines = String::from(templates::VA_HEADER);
    for a in &assignments {
        lines.push_str(&render_line(kind, &a.var, Some(&a.rhs)));
        lines.push('\n');
    }
    lines.push_str(&render_line(kind, &query, None));
    let instance = TaskInstance {
        schema_version: DATASET_SCHEMA_VERSION,
        kind,
        depth,
        prompt: lines,
        choices,
        answer_index,
        seed,
        meta: TaskMeta::Va { assignments, query },
    };
    instance.validate()?;
    Ok(instance)
}

fn render_line(kind: TaskKind, var: &str, rhs: Option<&Rhs>) -> String {
    let rhs_text = match rhs {
        None => return render_query(kind, var),
        Some(Rhs::Value(v)) => v.to_string(),
        Some(Rhs::Expr { a, b }) => format!("{}+{}", a, b),
        Some(Rhs::Var(v)) => v.clone(),
    };
    match kind {
        TaskKind::VaCode => format!("{} = {};", var, rhs_text),
        _ => format!("{}={}", var, rhs_text),
    }
}

fn render_query(kind: TaskKind, var: &str) -> String {
    match kind {
        TaskKind::VaCode => format!("{} = {}", var, templates::BLANK),
        _ => format!("{}={}", var, templates::BLANK),
    }
}

/// Generate any task kind with its default shape.
pub fn gen_task(rng: &RunRng, kind: TaskKind, depth: u8, index: u64) -> Result<TaskInstance> {
    if kind.is_copy() {
        gen_copy(rng, kind, 10, 5, index)
    } else {
        gen_var_assignment(rng, kind, depth, 5, index)
    }
}

// ── Brute-force resolver ────────────────────────────────────────────

/// Resolve an instance from its rendered prompt alone: re-parses the
/// text, follows substitution chains (or locates the copy continuation),
/// and returns the answer string. Independent of generator internals.
pub fn resolve_oracle(instance: &TaskInstance) -> Result<String> {
    resolve_prompt(&instance.prompt)
}

pub fn resolve_prompt(prompt: &str) -> Result<String> {
    if let Some(body) = prompt.strip_prefix(templates::COPY_HEADER) {
        return resolve_copy_text(body);
    }
    if let Some(body) = prompt.strip_prefix(templates::VA_HEADER) {
        return resolve_va_text(body);
    }
    Err(Error::Task("unrecognized prompt header".into()))
}

fn resolve_copy_text(body: &str) -> Result<String> {
    let mut toks: Vec<&str> = body.split_whitespace().collect();
    // Strip the blank marker ("___." "->").
    while matches!(toks.last(), Some(&"->") | Some(&"___.")) {
        toks.pop();
    }
    if toks.len() < 3 {
        return Err(Error::Task("copy prompt too short".into()));
    }
    // The sequence tokens are distinct, so the restated prefix begins at
    // the second occurrence of the first token.
    let n = toks[1..]
        .iter()
        .position(|t| *t == toks[0])
        .map(|p| p + 1)
        .ok_or_else(|| Error::Task("no restated prefix found".into()))?;
    let p = toks.len() - n;
    if p >= n || toks[n..] != toks[..p] {
        return Err(Error::Task("restated prefix does not match sequence".into()));
    }
    Ok(toks[p].to_string())
}

fn resolve_va_text(body: &str) -> Result<String> {
    let lines: Vec<&str> = body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::Task("empty assignment prompt".into()));
    }
    let parse = |line: &str| -> Result<(String, String)> {
        let cleaned = line.trim_end_matches(';');
        let (var, rhs) = cleaned
            .split_once('=')
            .ok_or_else(|| Error::Task(format!("bad assignment line {:?}", line)))?;
        Ok((var.trim().to_string(), rhs.trim().to_string()))
    };
    let (query_var, blank) = parse(lines[lines.len() - 1])?;
    if !blank.starts_with("___") {
        return Err(Error::Task("final line is not a query".into()));
    }
    let bindings: Vec<(String, String)> = lines[..lines.len() - 1]
        .iter()
        .map(|l| parse(l))
        .collect::<Result<Vec<_>>>()?;

    let mut cur = query_var;
    let mut hops = 0;
    let mut visited: Vec<String> = Vec::new();
    loop {
        if visited.contains(&cur) {
            return Err(Error::Task(format!("cycle detected at {:?}", cur)));
        }
        visited.push(cur.clone());
        // Last binding wins.
        let rhs = bindings
            .iter()
            .rev()
            .find(|(v, _)| *v == cur)
            .map(|(_, r)| r.clone())
            .ok_or_else(|| Error::Task(format!("unbound variable {:?}", cur)))?;
        if let Some(v) = eval_numeric(&rhs) {
            return Ok(v.to_string());
        }
        cur = rhs;
        hops += 1;
        if hops > bindings.len() {
            return Err(Error::Task("substitution chain exceeds binding count".into()));
        }
    }
}

fn eval_numeric(rhs: &str) -> Option<i64> {
    if let Ok(v) = rhs.parse::<i64>() {
        return Some(v);
    }
    if let Some((a, b)) = rhs.split_once('+') {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<i64>(), b.trim().parse::<i64>()) {
            return Some(a + b);
        }
    }
    None
}

// ── Dataset files (JSONL) ───────────────────────────────────────────

pub fn write_dataset(path: &std::path::Path, instances: &[TaskInstance]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &std::path::Path) -> Result<Vec<TaskInstance>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(line)
            .map_err(|e| Error::Task(format!("line {}: {}", i + 1, e)))?;
        if inst.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Task(format!(
                "dataset schema {} unsupported (expected {})",
                inst.schema_version, DATASET_SCHEMA_VERSION
            )));
        }
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_prompt_matches_worked_example() {
        // The documented example sequence; rendering and resolution must
        // reproduce it exactly.
        let tokens = ["jic", "dqy", "sof", "uzg", "ewr", "oxw", "osp", "tkj", "rvw", "mnu"];
        let prompt = format!(
            "{}{} {} {}",
            templates::COPY_HEADER,
            tokens.join(" "),
            tokens[..5].join(" "),
            templates::BLANK
        );
        assert_eq!(
            prompt,
            "Fill in the blank:\njic dqy sof uzg ewr oxw osp tkj rvw mnu jic dqy sof uzg ewr ___. ->"
        );
        assert_eq!(resolve_prompt(&prompt).unwrap(), "oxw");
    }

    #[test]
    fn va_worked_examples_resolve() {
        let d0 = "Fill in blank:\n\no=23\nk=3\nt=13\na=1\ne=9\no=___. ->";
        assert_eq!(resolve_prompt(d0).unwrap(), "23");
        let d1 = "Fill in blank:\n\no=2\nk=23\nt=13\na=1\ne=9\nv=k\nc=e\ns=o\ny=t\nr=a\ny=___. ->";
        assert_eq!(resolve_prompt(d1).unwrap(), "13");
        let d2 = "Fill in blank:\n\no=2\nk=23\nt=13\na=1\ne=9\nv=k\nc=e\ns=o\ny=t\nr=a\nb=r\nh=c\nf=y\nx=s\ng=v\nh=___. ->";
        assert_eq!(resolve_prompt(d2).unwrap(), "9");
    }

    #[test]
    fn generators_are_deterministic() {
        let rng = RunRng::new(7);
        for kind in ALL_KINDS {
            let depth = if kind.is_copy() { 0 } else { 2 };
            let a = gen_task(&rng, kind, depth, 3).unwrap();
            let b = gen_task(&rng, kind, depth, 3).unwrap();
            assert_eq!(a, b);
            let c = gen_task(&rng, kind, depth, 4).unwrap();
            assert_ne!(a.prompt, c.prompt);
        }
    }

    #[test]
    fn boundary_prefix_is_last_token() {
        let rng = RunRng::new(9);
        let inst = gen_copy(&rng, TaskKind::CopyRandom, 10, 9, 0).unwrap();
        assert_eq!(inst.answer_index, 9);
        assert_eq!(resolve_oracle(&inst).unwrap(), inst.answer());
    }

    #[test]
    fn generator_oracle_agreement_sample() {
        let rng = RunRng::new(11);
        for kind in ALL_KINDS {
            let depths: &[u8] = if kind.is_copy() { &[0] } else { &[0, 1, 2] };
            for &d in depths {
                for i in 0..200 {
                    let inst = gen_task(&rng, kind, d, i).unwrap();
                    assert_eq!(
                        resolve_oracle(&inst).unwrap(),
                        inst.answer(),
                        "disagreement for {:?} depth {} index {}",
                        kind,
                        d,
                        i
                    );
                }
            }
        }
    }

    #[test]
    fn cycle_detection_fires() {
        let looped = "Fill in blank:\n\na=b\nb=a\na=___. ->";
        assert!(matches!(resolve_prompt(looped), Err(Error::Task(m)) if m.contains("cycle")));
    }

    #[test]
    fn rejects_bad_shapes() {
        let rng = RunRng::new(1);
        assert!(gen_copy(&rng, TaskKind::CopyRandom, 10, 10, 0).is_err());
        assert!(gen_copy(&rng, TaskKind::VaBasic, 10, 5, 0).is_err());
        assert!(gen_var_assignment(&rng, TaskKind::VaBasic, 3, 5, 0).is_err());
        assert!(gen_var_assignment(&rng, TaskKind::VaBasic, 2, 9, 0).is_err());
    }

    #[test]
    fn dataset_round_trips_losslessly() {
        let rng = RunRng::new(21);
        let instances: Vec<TaskInstance> = (0..12)
            .map(|i| gen_task(&rng, ALL_KINDS[i % 5], (i % 3) as u8 * u8::from(i % 5 >= 2), i as u64).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_dataset(&path, &instances).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(instances, back);
    }

    #[test]
    fn math_variant_renders_expressions() {
        let rng = RunRng::new(31);
        let inst = gen_var_assignment(&rng, TaskKind::VaMath, 1, 5, 0).unwrap();
        assert!(inst.prompt.contains('+'), "math surface form missing: {}", inst.prompt);
        assert_eq!(resolve_oracle(&inst).unwrap(), inst.answer());
    }

    #[test]
    fn code_variant_renders_statements() {
        let rng = RunRng::new(32);
        let inst = gen_var_assignment(&rng, TaskKind::VaCode, 1, 5, 0).unwrap();
        assert!(inst.prompt.contains(" = "), "code surface form missing");
        assert!(inst.prompt.contains(';'));
        assert_eq!(resolve_oracle(&inst).unwrap(), inst.answer());
    }
}
