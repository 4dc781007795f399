//! Word-level hashing tokenizer.
//!
//! Text is lowercased and split on whitespace; each word hashes into a fixed
//! id space. Ids 0..=2 are reserved for the sequence markers and the learned
//! context slot.

use crate::error::{Error, Result};

pub const SOS_TOKEN: u32 = 0;
pub const EOS_TOKEN: u32 = 1;
/// Marks a learned context position in an assembled prompt.
pub const CTX_TOKEN: u32 = 2;
const RESERVED: u32 = 3;

/// Token budget per sequence, including SOS and EOS.
pub const MAX_TOKENS: usize = 77;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Id of a single word within `hash_space` total ids.
pub fn word_id(word: &str, hash_space: u32) -> u32 {
    debug_assert!(hash_space > RESERVED);
    RESERVED + (fnv1a64(word.as_bytes()) % (hash_space - RESERVED) as u64) as u32
}

/// Tokenizes `text` into `[SOS, word ids.., EOS]`. Errors when the result
/// exceeds `max_tokens`.
pub fn tokenize(text: &str, hash_space: u32, max_tokens: usize) -> Result<Vec<u32>> {
    let lowered = text.to_lowercase();
    let mut ids = vec![SOS_TOKEN];
    ids.extend(lowered.split_whitespace().map(|w| word_id(w, hash_space)));
    ids.push(EOS_TOKEN);
    if ids.len() > max_tokens {
        return Err(Error::TokenLimit(format!(
            "text tokenizes to {} tokens, budget is {max_tokens}: {:?}",
            ids.len(),
            truncate_for_error(text)
        )));
    }
    Ok(ids)
}

fn truncate_for_error(text: &str) -> String {
    if text.len() > 60 {
        format!("{}...", &text[..60])
    } else {
        text.to_string()
    }
}
