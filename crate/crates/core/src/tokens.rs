//! Reserved token ids and the id-level tokenizer.
//!
//! Tasks operate directly on integer ids; "tokenizing" validates that content
//! ids stay clear of the reserved range.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Replaces a hidden span in span-fill inputs.
pub const MASK: u32 = 3;
/// Objective markers used only by the pretraining corpus.
pub const MODE_RECONSTRUCT: u32 = 4;
pub const MODE_REVERSE: u32 = 5;
pub const MODE_SPAN: u32 = 6;
pub const MODE_CONTINUE: u32 = 7;

/// Ids below this are never produced as task content.
pub const FIRST_CONTENT: u32 = 8;

/// Ids `tokenize` refuses as content.
pub const RESERVED: [u32; 3] = [PAD, BOS, EOS];

/// Number of content ids available in a vocabulary of `vocab_size`.
pub fn content_count(vocab_size: usize) -> usize {
    vocab_size.saturating_sub(FIRST_CONTENT as usize)
}

/// Validates raw ids as sequence content and returns them unchanged.
pub fn tokenize(ids: &[u32], vocab_size: usize) -> Result<Vec<u32>> {
    for &id in ids {
        if RESERVED.contains(&id) || id as usize >= vocab_size {
            return Err(Error::ReservedToken { id, vocab_size });
        }
    }
    Ok(ids.to_vec())
}

/// Content ids up to (excluding) the first EOS, with PAD and BOS dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u32> {
    ids.iter()
        .copied()
        .take_while(|&id| id != EOS)
        .filter(|&id| id != PAD && id != BOS)
        .collect()
}

/// Target sequence as seen by the loss: content followed by one EOS.
pub fn with_eos(target: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(target.len() + 1);
    out.extend_from_slice(target);
    out.push(EOS);
    out
}
