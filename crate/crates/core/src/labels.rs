//! Mask-prediction to charge-label mapping by Jaccard similarity.

use std::collections::BTreeSet;

use crate::corpus::{Verbalizer, Vocab};
use crate::error::{Error, Result};

/// Predicted mask token ids plus the cleaned token set used for matching:
/// reserved ids dropped, remaining ids de-tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionTokens {
    pub ids: Vec<usize>,
    pub cleaned: BTreeSet<String>,
}

impl PredictionTokens {
    pub fn from_ids(ids: &[usize], vocab: &Vocab) -> Self {
        let cleaned = ids
            .iter()
            .filter(|&&id| !Vocab::is_reserved(id))
            .filter_map(|&id| vocab.token(id).map(|t| t.to_string()))
            .collect();
        PredictionTokens {
            ids: ids.to_vec(),
            cleaned,
        }
    }
}

/// |A - B| / |A u B|; 0 when both sets are empty.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappedLabel {
    pub label: usize,
    pub score: f64,
    /// True when no label shares any token with the prediction; the returned
    /// label is then just the smallest id.
    pub zero_confidence: bool,
}

/// Jaccard score of the prediction against every label's token set.
pub fn label_scores(prediction: &PredictionTokens, verbalizer: &Verbalizer) -> Vec<f64> {
    (0..verbalizer.len())
        .map(|label| jaccard(&prediction.cleaned, verbalizer.token_set(label)))
        .collect()
}

/// Argmax over the verbalizer; ties (including the all-zero case) go to the
/// smallest label id.
pub fn map_to_label(prediction: &PredictionTokens, verbalizer: &Verbalizer) -> Result<MappedLabel> {
    if verbalizer.is_empty() {
        return Err(Error::Data("empty verbalizer".into()));
    }
    let scores = label_scores(prediction, verbalizer);
    let mut best = 0usize;
    for (label, score) in scores.iter().enumerate().skip(1) {
        if *score > scores[best] {
            best = label;
        }
    }
    Ok(MappedLabel {
        label: best,
        score: scores[best],
        zero_confidence: scores[best] == 0.0,
    })
}
