//! Joint case/statute embedding space: contrastive training and top-N search.
//!
//! The desk-scale encoder is a mean of token embeddings followed by a linear
//! projection. Training pulls case vectors toward their annotated statutes
//! with a temperature-scaled contrastive loss over cosine similarities;
//! search scores candidates by raw inner product. The two deliberately
//! differ (encoders are not L2-normalized), matching the printed method.

use crate::corpus::{tokenize, Article, Dataset, Vocab};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{contrastive_loss_value, Tape};
use crate::tensor::{dot, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// One contrastive pair: case index into the dataset, statute id, polarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub case_idx: usize,
    pub article_id: u32,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs grouped by case, preserving case order of first appearance.
    pub fn by_case(&self) -> Vec<(usize, Vec<u32>, Vec<u32>)> {
        let mut order: Vec<usize> = Vec::new();
        let mut grouped: std::collections::HashMap<usize, (Vec<u32>, Vec<u32>)> =
            std::collections::HashMap::new();
        for pair in &self.pairs {
            let entry = grouped.entry(pair.case_idx).or_insert_with(|| {
                order.push(pair.case_idx);
                (Vec::new(), Vec::new())
            });
            match pair.polarity {
                Polarity::Positive => entry.0.push(pair.article_id),
                Polarity::Negative => entry.1.push(pair.article_id),
            }
        }
        order
            .into_iter()
            .map(|idx| {
                let (pos, neg) = grouped.remove(&idx).expect("grouped entry");
                (idx, pos, neg)
            })
            .collect()
    }
}

/// Per case: one positive pair per annotated statute, and the same number of
/// negatives sampled uniformly from statutes outside the annotation set
/// (with replacement only when fewer candidates exist). Cases without
/// annotated statutes are skipped with a warning.
pub fn build_pairs(dataset: &Dataset, seed: u64) -> PairSet {
    let mut rng = Rng::new(seed);
    let mut pairs = Vec::new();
    for (case_idx, case) in dataset.cases.iter().enumerate() {
        if case.articles.is_empty() {
            eprintln!(
                "warning: case {} has no relevant statutes; skipped in pair construction",
                case.id
            );
            continue;
        }
        let count = case.articles.len();
        for &article_id in &case.articles {
            pairs.push(Pair {
                case_idx,
                article_id,
                polarity: Polarity::Positive,
            });
        }
        let candidates: Vec<u32> = dataset
            .articles
            .iter()
            .map(|a| a.id)
            .filter(|id| !case.articles.contains(id))
            .collect();
        if candidates.is_empty() {
            eprintln!(
                "warning: case {} has no negative candidates; skipped negatives",
                case.id
            );
            // keep polarity balance by dropping the positives as well
            pairs.truncate(pairs.len() - count);
            continue;
        }
        for idx in rng.sample_indices(candidates.len(), count) {
            pairs.push(Pair {
                case_idx,
                article_id: candidates[idx],
                polarity: Polarity::Negative,
            });
        }
    }
    PairSet { pairs }
}

/// Cosine similarity; errors on dimension mismatch or zero-norm input.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Numeric(format!(
            "cosine dimensions differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine of zero-norm vector".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Contrastive loss over one query's positive/negative similarities:
/// -log( sum_c e^{pos_c/tau} / sum_c (e^{pos_c/tau} + e^{neg_c/tau}) ).
pub fn contrastive_loss(pos_sims: &[f64], neg_sims: &[f64], tau: f64) -> Result<f64> {
    if pos_sims.is_empty() || pos_sims.len() != neg_sims.len() {
        return Err(Error::Numeric(
            "contrastive loss needs equal, non-zero positive/negative counts".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Numeric("temperature must be positive".into()));
    }
    Ok(contrastive_loss_value(pos_sims, neg_sims, tau))
}

/// Mean-pool + projection sentence encoder over the shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoder {
    pub embed: Tensor,
    pub proj: Tensor,
}

impl SentenceEncoder {
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        SentenceEncoder {
            embed: Tensor::uniform(vocab_size, dim, 0.1, &mut rng),
            proj: Tensor::uniform(dim, dim, 0.1, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.cols()
    }

    /// Mean of token embedding rows, then projection. Empty input encodes to
    /// the zero vector.
    pub fn encode_ids(&self, ids: &[usize]) -> Vec<f64> {
        let dim = self.dim();
        if ids.is_empty() {
            return vec![0.0; dim];
        }
        let mut pooled = vec![0.0; dim];
        for &id in ids {
            for (p, e) in pooled.iter_mut().zip(self.embed.row(id)) {
                *p += e;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for p in pooled.iter_mut() {
            *p *= inv;
        }
        let pooled = Tensor::row_vec(pooled);
        pooled.matmul(&self.proj).data().to_vec()
    }

    pub fn encode_text(&self, vocab: &Vocab, text: &str) -> Vec<f64> {
        self.encode_ids(&tokenize(vocab, text, usize::MAX))
    }
}

#[derive(Debug, Clone)]
pub struct RetrieverConfig {
    pub dim: usize,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            dim: 32,
            tau: 0.1,
            lr: 0.1,
            epochs: 40,
            batch: 8,
            seed: 1,
        }
    }
}

/// Statute vectors aligned with their ids; immutable once built.
#[derive(Debug, Clone)]
pub struct ArticleIndex {
    ids: Vec<u32>,
    vecs: Vec<Vec<f64>>,
}

impl ArticleIndex {
    pub fn build(encoder: &SentenceEncoder, vocab: &Vocab, articles: &[Article]) -> Self {
        let ids = articles.iter().map(|a| a.id).collect();
        let vecs = articles
            .iter()
            .map(|a| encoder.encode_text(vocab, &a.text))
            .collect();
        ArticleIndex { ids, vecs }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Top-N statutes for a case by raw inner product, descending; ties broken by
/// ascending statute id. Returns min(N, |A|) entries.
pub fn retrieve_top_n(
    encoder: &SentenceEncoder,
    vocab: &Vocab,
    case_text: &str,
    index: &ArticleIndex,
    n: usize,
) -> Vec<(u32, f64)> {
    let query = encoder.encode_text(vocab, case_text);
    let mut scored: Vec<(u32, f64)> = index
        .ids
        .iter()
        .zip(&index.vecs)
        .map(|(&id, vec)| (id, dot(&query, vec)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(n.min(scored.len()));
    scored
}

/// Contrastive training over the pair set. Returns the per-epoch mean loss
/// history; aborts with a numeric error if the loss stops being finite.
pub fn train_joint_space(
    encoder: &mut SentenceEncoder,
    dataset: &Dataset,
    vocab: &Vocab,
    pairs: &PairSet,
    config: &RetrieverConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Data("empty pair set".into()));
    }
    let article_ids_by_id: std::collections::HashMap<u32, Vec<usize>> = dataset
        .articles
        .iter()
        .map(|a| (a.id, tokenize(vocab, &a.text, usize::MAX)))
        .collect();
    let case_ids: Vec<Vec<usize>> = dataset
        .cases
        .iter()
        .map(|c| tokenize(vocab, &c.text, usize::MAX))
        .collect();

    let grouped = pairs.by_case();
    let mut order: Vec<usize> = (0..grouped.len()).collect();
    let mut rng = Rng::new(config.seed);
    let mut history = Vec::with_capacity(config.epochs);

    for _epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch.max(1)) {
            let mut tape = Tape::new();
            let embed = tape.leaf(encoder.embed.clone());
            let proj = tape.leaf(encoder.proj.clone());

            let mut batch_loss = None;
            let mut included = 0usize;
            for &gi in chunk {
                let (case_idx, pos, neg) = &grouped[gi];
                let encode = |tape: &mut Tape, ids: &[usize]| {
                    let rows = tape.gather_rows(embed, ids);
                    let pooled = tape.mean_rows(rows);
                    tape.matmul(pooled, proj)
                };
                if case_ids[*case_idx].is_empty() {
                    continue;
                }
                let query = encode(&mut tape, &case_ids[*case_idx]);
                let sims = |tape: &mut Tape, ids: &[u32], query| {
                    let mut parts = Vec::with_capacity(ids.len());
                    for id in ids {
                        let art = encode(tape, &article_ids_by_id[id]);
                        parts.push(tape.cosine(query, art));
                    }
                    tape.concat_cols(&parts)
                };
                let pos_sims = sims(&mut tape, pos, query);
                let neg_sims = sims(&mut tape, neg, query);
                let loss = tape.contrastive(pos_sims, neg_sims, config.tau);
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss),
                });
                included += 1;
                seen += 1;
            }
            let Some(total) = batch_loss else { continue };
            let mean = tape.scale(total, 1.0 / included as f64);
            let loss_value = tape.value(mean).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "contrastive loss diverged (loss = {loss_value})"
                )));
            }
            epoch_loss += tape.value(total).item();

            let grads = tape.backward(mean);
            encoder.embed.sgd_step(&grads.get(embed, &tape), config.lr);
            encoder.proj.sgd_step(&grads.get(proj, &tape), config.lr);
        }
        history.push(if seen > 0 { epoch_loss / seen as f64 } else { 0.0 });
    }
    Ok(history)
}

/// Mean cosine over positive pairs minus mean cosine over negative pairs;
/// the separation measure used by the training tests.
pub fn pair_cosine_gap(
    encoder: &SentenceEncoder,
    dataset: &Dataset,
    vocab: &Vocab,
    pairs: &PairSet,
) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for pair in &pairs.pairs {
        let case = &dataset.cases[pair.case_idx];
        let article = dataset
            .article_by_id(pair.article_id)
            .ok_or_else(|| Error::Data(format!("missing article {}", pair.article_id)))?;
        let u = encoder.encode_text(vocab, &case.text);
        let v = encoder.encode_text(vocab, &article.text);
        let sim = cosine_sim(&u, &v)?;
        match pair.polarity {
            Polarity::Positive => pos.push(sim),
            Polarity::Negative => neg.push(sim),
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    Ok(mean(&pos) - mean(&neg))
}
