//! Vocabulary with fixed reserved ids and frequency-ordered assignment.

use std::collections::HashMap;

use crate::corpus::Dataset;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";
pub const UNK_TOKEN: &str = "<unk>";

/// Character-level by default (the target corpora are Chinese, which needs no
/// segmenter); whitespace splitting is selectable for Latin-script fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Char,
    Whitespace,
}

impl TokenMode {
    pub fn split(&self, text: &str) -> Vec<String> {
        match self {
            TokenMode::Char => text.chars().map(|c| c.to_string()).collect(),
            TokenMode::Whitespace => text.split_whitespace().map(|s| s.to_string()).collect(),
        }
    }

    pub fn join(&self, tokens: &[String]) -> String {
        match self {
            TokenMode::Char => tokens.concat(),
            TokenMode::Whitespace => tokens.join(" "),
        }
    }

    pub fn token_set(&self, text: &str) -> std::collections::BTreeSet<String> {
        self.split(text).into_iter().collect()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenMode::Char => "char",
            TokenMode::Whitespace => "whitespace",
        }
    }

    pub fn parse(s: &str) -> Option<TokenMode> {
        match s {
            "char" => Some(TokenMode::Char),
            "whitespace" => Some(TokenMode::Whitespace),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    mode: TokenMode,
}

impl Vocab {
    fn with_reserved(mode: TokenMode) -> Self {
        let id_to_token = vec![
            PAD_TOKEN.to_string(),
            MASK_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn is_reserved(id: usize) -> bool {
        id <= UNK_ID
    }

    /// FNV-1a over the id-ordered token list; ties checkpoints to the vocab
    /// they were trained with.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.mode.as_str().as_bytes());
        for token in &self.id_to_token {
            eat(token.as_bytes());
            eat(&[0]);
        }
        h
    }
}

/// Assign ids >= 3 to every token with frequency >= `min_freq`, in descending
/// frequency order, ties broken by token (code point order). An empty corpus
/// yields the reserved-only vocab.
pub fn build_vocab(dataset: &Dataset, min_freq: u64, mode: TokenMode) -> Vocab {
    let counts = crate::corpus::corpus_token_counts(dataset, mode);
    let mut entries: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut vocab = Vocab::with_reserved(mode);
    for (token, _) in entries {
        if vocab.token_to_id.contains_key(&token) {
            continue;
        }
        let id = vocab.id_to_token.len();
        vocab.id_to_token.push(token.clone());
        vocab.token_to_id.insert(token, id);
    }
    vocab
}

/// Token-id sequence for `text`, truncated to a prefix of at most `max_len`.
/// Unknown tokens map to UNK; so does corpus text that happens to spell a
/// reserved marker, keeping reserved ids out of encoded text.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Vec<usize> {
    vocab
        .mode()
        .split(text)
        .into_iter()
        .take(max_len)
        .map(|tok| match vocab.id(&tok) {
            Some(id) if !Vocab::is_reserved(id) => id,
            _ => UNK_ID,
        })
        .collect()
}

/// Inverse of [`tokenize`] for in-vocab ids; reserved ids render as their
/// marker tokens.
pub fn detokenize(vocab: &Vocab, ids: &[usize]) -> String {
    let tokens: Vec<String> = ids
        .iter()
        .filter_map(|&id| vocab.token(id).map(|t| t.to_string()))
        .collect();
    vocab.mode().join(&tokens)
}
