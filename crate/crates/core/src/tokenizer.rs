//! Fixed character-level vocabulary.
//!
//! Character tokenization keeps copying tasks free of tokenizer artifacts;
//! the table is a compile-time constant plus one document separator, so
//! every run shares the identical mapping.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Every character the corpus and task templates may produce.
pub const CHARSET: &str = concat!(
    "abcdefghijklmnopqrstuvwxyz",
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ",
    "0123456789",
    " \n",
    ".,:;=_->+*/()?!'\"<",
);

fn index() -> &'static [Option<u32>; 128] {
    static TABLE: OnceLock<[Option<u32>; 128]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [None; 128];
        for (i, c) in CHARSET.chars().enumerate() {
            table[c as usize] = Some(i as u32);
        }
        table
    })
}

pub fn vocab_size() -> usize {
    CHARSET.chars().count() + 1
}

/// Document separator token (the one id beyond the charset).
pub fn sep_id() -> u32 {
    CHARSET.chars().count() as u32
}

pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .map(|c| {
            let slot = (c as usize) < 128;
            slot.then(|| index()[c as usize])
                .flatten()
                .ok_or_else(|| Error::Task(format!("character {:?} not in vocabulary", c)))
        })
        .collect()
}

pub fn decode(ids: &[u32]) -> String {
    let chars: Vec<char> = CHARSET.chars().collect();
    ids.iter()
        .map(|&id| {
            if id == sep_id() {
                '\u{241E}' // visible separator for debugging output
            } else {
                chars.get(id as usize).copied().unwrap_or('?')
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_task_text() {
        let text = "Fill in blank:\n\no=23\nk = 3;\ny=___. ->";
        let ids = encode(text).unwrap();
        assert_eq!(decode(&ids), text);
    }

    #[test]
    fn rejects_unknown_characters() {
        assert!(encode("héllo").is_err());
    }

    #[test]
    fn charset_has_no_duplicates() {
        let chars: Vec<char> = CHARSET.chars().collect();
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(chars.len(), sorted.len());
        assert_eq!(vocab_size(), chars.len() + 1);
    }
}
