//! Deterministic synthetic corpora for desk-scale experiments.
//!
//! Each charge gets cue keywords (drawn from a char pool disjoint from the
//! filler alphabet) and one statute containing those cues. Case texts are
//! filler sentences with cues embedded at a configurable position. Two knobs
//! build adversarial variants: `cue_placement: Tail` pushes cues past any
//! prefix truncation, and `shared_cues`/`hidden_evidence` make charges
//! distinguishable only through statute-grounded evidence tokens that the
//! lexicon does not contain.

use crate::corpus::{Article, Case, Dataset, TokenMode, Verbalizer};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CuePlacement {
    /// Cues at the start of the first sentence (survive prefix truncation).
    Lead,
    /// Cues inside the last sentence (lost to prefix truncation).
    Tail,
}

#[derive(Debug, Clone)]
pub struct ToyCorpusSpec {
    pub charges: usize,
    pub cases_per_charge: usize,
    pub cues_per_charge: usize,
    pub cue_len: usize,
    pub filler_alphabet: String,
    pub sentences_per_case: usize,
    /// Filler characters per sentence, before cue insertion.
    pub sentence_len: usize,
    /// Probability of dropping each cue beyond the first; the primary cue is
    /// always present.
    pub noise_rate: f64,
    pub cue_placement: CuePlacement,
    /// All charges share one cue set, so keywords alone cannot separate them.
    pub shared_cues: bool,
    /// Add a per-charge evidence token to the statute and the tail of the
    /// case; evidence tokens are kept out of the lexicon.
    pub hidden_evidence: bool,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            charges: 3,
            cases_per_charge: 10,
            cues_per_charge: 2,
            cue_len: 3,
            filler_alphabet: "abcdefgh".to_string(),
            sentences_per_case: 3,
            sentence_len: 12,
            noise_rate: 0.0,
            cue_placement: CuePlacement::Lead,
            shared_cues: false,
            hidden_evidence: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub dataset: Dataset,
    /// Cue keywords, one entry per distinct cue word; feed these to the
    /// lexicon file. Evidence and label words are intentionally absent.
    pub lexicon: Vec<String>,
    /// Cue words per charge (equal lists when cues are shared).
    pub cue_words: Vec<Vec<String>>,
    /// Per-charge evidence words; empty unless hidden evidence is on.
    pub evidence_words: Vec<String>,
    /// Per-charge label texts; chars disjoint from cues, evidence, filler.
    pub label_words: Vec<String>,
}

/// Characters for cue/evidence words: uppercase, then digits, then CJK.
fn pool_char(i: usize) -> char {
    if i < 26 {
        (b'A' + i as u8) as char
    } else if i < 36 {
        (b'0' + (i - 26) as u8) as char
    } else {
        char::from_u32(0x4E00 + (i - 36) as u32).expect("pool char")
    }
}

fn pool_word(start: usize, len: usize) -> String {
    (0..len).map(|j| pool_char(start + j)).collect()
}

pub fn generate_toy_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<ToyCorpus> {
    if spec.charges == 0 {
        return Err(Error::Data("toy corpus needs at least one charge".into()));
    }
    if spec.cues_per_charge == 0 || spec.cue_len == 0 {
        return Err(Error::Data("cue words must be non-empty".into()));
    }
    if spec.filler_alphabet.is_empty() {
        return Err(Error::Data("filler alphabet must be non-empty".into()));
    }
    if spec.sentences_per_case == 0 {
        return Err(Error::Data("cases need at least one sentence".into()));
    }

    let mut rng = Rng::new(seed);
    let filler: Vec<char> = spec.filler_alphabet.chars().collect();

    // Cue words per charge.
    let mut consumed = 0usize;
    let cue_sets: Vec<Vec<String>> = if spec.shared_cues {
        let one: Vec<String> = (0..spec.cues_per_charge)
            .map(|j| pool_word(j * spec.cue_len, spec.cue_len))
            .collect();
        consumed += spec.cues_per_charge * spec.cue_len;
        vec![one; spec.charges]
    } else {
        (0..spec.charges)
            .map(|k| {
                (0..spec.cues_per_charge)
                    .map(|j| {
                        pool_word((k * spec.cues_per_charge + j) * spec.cue_len, spec.cue_len)
                    })
                    .collect()
            })
            .collect()
    };
    if !spec.shared_cues {
        consumed = spec.charges * spec.cues_per_charge * spec.cue_len;
    }

    let evidence: Vec<String> = if spec.hidden_evidence {
        let words = (0..spec.charges)
            .map(|k| pool_word(consumed + k * spec.cue_len, spec.cue_len))
            .collect();
        consumed += spec.charges * spec.cue_len;
        words
    } else {
        Vec::new()
    };

    // Label words get their own characters: targets the model emits at mask
    // positions must not collide with the content characters it reads, or
    // the tied embedding rows serve two masters.
    let label_words: Vec<String> = (0..spec.charges)
        .map(|k| pool_word(consumed + k * spec.cue_len, spec.cue_len))
        .collect();

    // Generated words must stay disjoint from the filler alphabet.
    for word in cue_sets
        .iter()
        .flatten()
        .chain(evidence.iter())
        .chain(label_words.iter())
    {
        if word.chars().any(|c| filler.contains(&c)) {
            return Err(Error::Data(format!(
                "filler alphabet overlaps generated keyword {word:?}"
            )));
        }
    }

    // One statute per charge; a preamble shared by all statutes keeps the
    // untrained retriever uninformative.
    let preamble: String = (0..8).map(|i| filler[i % filler.len()]).collect();
    let articles: Vec<Article> = (0..spec.charges)
        .map(|k| {
            let mut text = format!("{preamble} {}", cue_sets[k].join(" "));
            if spec.hidden_evidence {
                text.push(' ');
                text.push_str(&evidence[k]);
            }
            Article {
                id: 101 + k as u32,
                text,
            }
        })
        .collect();

    let verbalizer = Verbalizer::new(
        label_words.clone().into_iter().enumerate().collect(),
        TokenMode::Char,
    )?;

    let filler_sentence = |rng: &mut Rng| -> String {
        let mut s = String::new();
        for i in 0..spec.sentence_len {
            if i > 0 && i % 4 == 0 {
                s.push(' ');
            }
            s.push(filler[rng.below(filler.len())]);
        }
        s
    };

    let mut cases = Vec::with_capacity(spec.charges * spec.cases_per_charge);
    for k in 0..spec.charges {
        for i in 0..spec.cases_per_charge {
            let mut sentences: Vec<String> = (0..spec.sentences_per_case)
                .map(|_| filler_sentence(&mut rng))
                .collect();

            let mut included = vec![cue_sets[k][0].clone()];
            for cue in cue_sets[k].iter().skip(1) {
                if rng.next_f64() >= spec.noise_rate {
                    included.push(cue.clone());
                }
            }
            let cue_text = included.join(" ");
            match spec.cue_placement {
                CuePlacement::Lead => {
                    sentences[0] = format!("{cue_text} {}", sentences[0]);
                }
                CuePlacement::Tail => {
                    let last = sentences.len() - 1;
                    sentences[last] = format!("{} {cue_text}", sentences[last]);
                }
            }
            if spec.hidden_evidence {
                let last = sentences.len() - 1;
                sentences[last] = format!("{} {}", sentences[last], evidence[k]);
            }

            cases.push(Case {
                id: format!("case-{k}-{i}"),
                text: format!("{}.", sentences.join(". ")),
                charge: k,
                articles: vec![101 + k as u32],
            });
        }
    }

    let mut lexicon = Vec::new();
    for set in &cue_sets {
        for cue in set {
            if !lexicon.contains(cue) {
                lexicon.push(cue.clone());
            }
        }
    }

    let dataset = Dataset {
        cases,
        articles,
        verbalizer,
    };
    dataset.validate()?;
    Ok(ToyCorpus {
        dataset,
        lexicon,
        cue_words: cue_sets,
        evidence_words: evidence,
        label_words,
    })
}
