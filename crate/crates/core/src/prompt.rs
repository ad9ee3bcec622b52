//! Prompt sequence assembly.
//!
//! The inference input is the fixed segment order
//! `[s1 | T1 | M | X | T2 | K | s2]`: soft tokens at both ends, the first
//! hard template, the mask block, the (possibly truncated) case tokens, the
//! second hard template, and the matched-keyword tokens.

use crate::corpus::{tokenize, Vocab, MASK_ID, PAD_ID};
use crate::error::{Error, Result};

/// Hard template texts wrapped around the mask block and the keyword block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardTemplates {
    pub t1: String,
    pub t2: String,
}

impl Default for HardTemplates {
    fn default() -> Self {
        HardTemplates {
            t1: "He will be charged with criminal responsibility for".to_string(),
            t2: "Keywords in the case description are as follows:".to_string(),
        }
    }
}

impl HardTemplates {
    pub fn token_ids(&self, vocab: &Vocab) -> (Vec<usize>, Vec<usize>) {
        (
            tokenize(vocab, &self.t1, usize::MAX),
            tokenize(vocab, &self.t2, usize::MAX),
        )
    }
}

/// Token ids of the assembled sequence plus the positions the model treats
/// specially. Soft positions are always first and last; mask positions are
/// contiguous right after T1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub ids: Vec<usize>,
    pub soft_positions: [usize; 2],
    pub mask_start: usize,
    pub mask_count: usize,
    /// Kept case tokens (after truncation), for inspection.
    pub case_len: usize,
    pub snippet_len: usize,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_positions(&self) -> std::ops::Range<usize> {
        self.mask_start..self.mask_start + self.mask_count
    }
}

/// Build the layout. Case tokens are the only segment that truncates: when
/// the total would exceed `cap`, the case keeps `cap` minus the size of
/// everything else. A scaffold that exceeds `cap` on its own is an error.
pub fn assemble_prompt(
    case_tokens: &[usize],
    snippet_tokens: &[usize],
    t1: &[usize],
    t2: &[usize],
    mask_count: usize,
    cap: usize,
) -> Result<PromptLayout> {
    if mask_count == 0 {
        return Err(Error::Usage("mask count must be at least 1".into()));
    }
    let overhead = 2 + t1.len() + mask_count + t2.len() + snippet_tokens.len();
    if overhead > cap {
        return Err(Error::Data(format!(
            "prompt scaffolding needs {overhead} positions but the model cap is {cap}"
        )));
    }
    let keep = case_tokens.len().min(cap - overhead);

    let mut ids = Vec::with_capacity(overhead + keep);
    ids.push(PAD_ID); // s1 slot; its embedding comes from the soft matrix
    ids.extend_from_slice(t1);
    let mask_start = ids.len();
    ids.extend(std::iter::repeat_n(MASK_ID, mask_count));
    ids.extend_from_slice(&case_tokens[..keep]);
    ids.extend_from_slice(t2);
    ids.extend_from_slice(snippet_tokens);
    ids.push(PAD_ID); // s2 slot

    let len = ids.len();
    debug_assert_eq!(
        len,
        2 + t1.len() + mask_count + keep + t2.len() + snippet_tokens.len()
    );
    Ok(PromptLayout {
        ids,
        soft_positions: [0, len - 1],
        mask_start,
        mask_count,
        case_len: keep,
        snippet_len: snippet_tokens.len(),
    })
}
