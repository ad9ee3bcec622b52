//! Keyword matching against a legal lexicon.
//!
//! Terms are compiled into a char-level multi-pattern automaton (trie plus
//! BFS failure links), giving one linear scan per case text with the same
//! observable semantics as matching each keyword individually: plain
//! substring occurrences, no word boundaries, overlaps allowed.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::corpus::{tokenize, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnippetMatch {
    pub term: String,
    /// Character index of the first occurrence in the scanned text.
    pub first_offset: usize,
}

#[derive(Debug, Clone, Default)]
struct AcState {
    next: BTreeMap<char, usize>,
    fail: usize,
    /// Indices of terms ending at this state (own + inherited via fail links).
    out: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    terms: Vec<String>,
    term_chars: Vec<usize>,
    states: Vec<AcState>,
}

impl Lexicon {
    /// Build from raw term strings; empties and duplicates are dropped
    /// (first occurrence wins).
    pub fn from_terms<I: IntoIterator<Item = String>>(raw: I) -> Lexicon {
        let mut terms: Vec<String> = Vec::new();
        for term in raw {
            let term = term.trim().to_string();
            if term.is_empty() || terms.contains(&term) {
                continue;
            }
            terms.push(term);
        }

        // trie
        let mut states = vec![AcState::default()];
        for (idx, term) in terms.iter().enumerate() {
            let mut at = 0usize;
            for ch in term.chars() {
                at = match states[at].next.get(&ch) {
                    Some(&n) => n,
                    None => {
                        states.push(AcState::default());
                        let n = states.len() - 1;
                        states[at].next.insert(ch, n);
                        n
                    }
                };
            }
            states[at].out.push(idx);
        }

        // BFS failure links
        let mut queue = std::collections::VecDeque::new();
        let root_children: Vec<(char, usize)> =
            states[0].next.iter().map(|(c, n)| (*c, *n)).collect();
        for (_, child) in root_children {
            states[child].fail = 0;
            queue.push_back(child);
        }
        while let Some(state) = queue.pop_front() {
            let children: Vec<(char, usize)> =
                states[state].next.iter().map(|(c, n)| (*c, *n)).collect();
            for (ch, child) in children {
                let mut f = states[state].fail;
                loop {
                    if let Some(&n) = states[f].next.get(&ch) {
                        if n != child {
                            states[child].fail = n;
                            break;
                        }
                    }
                    if f == 0 {
                        states[child].fail = 0;
                        break;
                    }
                    f = states[f].fail;
                }
                let inherited = states[states[child].fail].out.clone();
                states[child].out.extend(inherited);
                queue.push_back(child);
            }
        }

        let term_chars = terms.iter().map(|t| t.chars().count()).collect();
        Lexicon {
            terms,
            term_chars,
            states,
        }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Load a lexicon file: one term per line, optionally followed by a TAB and a
/// frequency column (ignored). Duplicates are dropped; an empty file warns
/// and yields an empty lexicon.
pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut raw = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let term = line.split('\t').next().unwrap_or("").trim();
        if !term.is_empty() {
            raw.push(term.to_string());
        }
    }
    if raw.is_empty() {
        eprintln!("warning: lexicon {} has no terms", path.display());
    }
    Ok(Lexicon::from_terms(raw))
}

/// All distinct lexicon terms occurring in `text`, each reported once at its
/// first occurrence, ordered by offset ascending with longer terms first on
/// ties.
pub fn match_snippets(lexicon: &Lexicon, text: &str) -> Vec<SnippetMatch> {
    let chars: Vec<char> = text.chars().collect();
    let mut first: Vec<Option<usize>> = vec![None; lexicon.terms.len()];

    let mut state = 0usize;
    for (pos, ch) in chars.iter().enumerate() {
        loop {
            if let Some(&n) = lexicon.states[state].next.get(ch) {
                state = n;
                break;
            }
            if state == 0 {
                break;
            }
            state = lexicon.states[state].fail;
        }
        for &term_idx in &lexicon.states[state].out {
            let start = pos + 1 - lexicon.term_chars[term_idx];
            let slot = &mut first[term_idx];
            if slot.is_none() || slot.unwrap() > start {
                *slot = Some(start);
            }
        }
    }

    let mut matches: Vec<SnippetMatch> = first
        .iter()
        .enumerate()
        .filter_map(|(idx, off)| {
            off.map(|first_offset| SnippetMatch {
                term: lexicon.terms[idx].clone(),
                first_offset,
            })
        })
        .collect();
    matches.sort_by(|a, b| {
        a.first_offset
            .cmp(&b.first_offset)
            .then_with(|| b.term.chars().count().cmp(&a.term.chars().count()))
            .then_with(|| a.term.cmp(&b.term))
    });
    matches
}

/// Token ids for the matched terms joined with `separator`; the K segment of
/// the prompt.
pub fn snippets_to_tokens(
    matches: &[SnippetMatch],
    vocab: &Vocab,
    separator: &str,
) -> Vec<usize> {
    if matches.is_empty() {
        return Vec::new();
    }
    let joined = matches
        .iter()
        .map(|m| m.term.as_str())
        .collect::<Vec<_>>()
        .join(separator);
    tokenize(vocab, &joined, usize::MAX)
}
