//! Central finite-difference verification of every trainable parameter
//! family, on deliberately small instances. Used by the `gradcheck` CLI
//! subcommand and the acceptance suite.

use crate::corpus::{build_vocab, tokenize, Case, Dataset, TokenMode, Verbalizer, Vocab};
use crate::error::{Error, Result};
use crate::model::{
    forward, mlm_targets, push_leaves, ModelDims, PromptModel, TrainExample,
};
use crate::prompt::assemble_prompt;
use crate::retrieval::SentenceEncoder;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Central differences carry ~ulp(loss)/(2 eps) = 1e-11 of absolute noise at
/// these loss scales, so gradients under this floor are noise-dominated and
/// excluded; everything above it must match to MAX_REL_ERR.
const ABS_FLOOR: f64 = 2e-6;

#[derive(Debug, Clone)]
pub struct FamilyReport {
    pub family: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl FamilyReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() < ABS_FLOOR && n.abs() < ABS_FLOOR {
        return 0.0;
    }
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

fn family_of(name: &str) -> &'static str {
    if name == "embed" {
        "token embeddings"
    } else if name == "soft" {
        "soft prompts"
    } else if name.starts_with("gru.") {
        "gru gates"
    } else {
        "attention/ffn"
    }
}

fn tiny_vocab() -> (Dataset, Vocab) {
    let verbalizer = Verbalizer::new(
        vec![(0, "pq".into()), (1, "rs".into())],
        TokenMode::Char,
    )
    .expect("verbalizer");
    let dataset = Dataset {
        cases: vec![Case {
            id: "c".into(),
            text: "pq rs abcdefgh,:".into(),
            charge: 0,
            articles: vec![],
        }],
        articles: vec![],
        verbalizer,
    };
    let vocab = build_vocab(&dataset, 1, TokenMode::Char);
    (dataset, vocab)
}

/// Check every model parameter family against central differences on a
/// d_h = 8, length <= 24 instance. Samples up to `samples_per_tensor`
/// coordinates of each tensor.
pub fn check_model_gradients(seed: u64, samples_per_tensor: usize) -> Result<Vec<FamilyReport>> {
    let (dataset, vocab) = tiny_vocab();
    let dims = ModelDims {
        d_h: 8,
        layers: 2,
        heads: 2,
        ff: 12,
        cap: 24,
    };
    let model = PromptModel::init(&vocab, dims, seed)?;

    let case_ids = tokenize(&vocab, "abc de fg", 8);
    let snippet_ids = tokenize(&vocab, "pq", 4);
    let t1 = tokenize(&vocab, "a:", 4);
    let t2 = tokenize(&vocab, "b:", 4);
    let layout = assemble_prompt(&case_ids, &snippet_ids, &t1, &t2, 3, dims.cap)?;
    let example = TrainExample {
        layout,
        fact_ids: tokenize(&vocab, "pq,rs", 8),
        label: 0,
    };
    let (targets, active) = mlm_targets(
        dataset.verbalizer.text(example.label),
        &vocab,
        example.layout.mask_count,
    )?;

    let loss_of = |m: &PromptModel| -> f64 {
        let mut tape = Tape::new();
        let leaves = push_leaves(&mut tape, m);
        let pass = forward(&mut tape, &leaves, &m.dims, &example.layout, &example.fact_ids, true);
        let loss = tape.cross_entropy_rows(pass.mask_logits, &targets, &active);
        tape.value(loss).item()
    };

    // analytic gradients, one backward pass
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, &model);
    let pass = forward(
        &mut tape,
        &leaves,
        &model.dims,
        &example.layout,
        &example.fact_ids,
        true,
    );
    let loss = tape.cross_entropy_rows(pass.mask_logits, &targets, &active);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = leaves.flat.iter().map(|v| grads.get(*v, &tape)).collect();

    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut rng = Rng::new(seed ^ 0xFD);
    let mut reports: std::collections::BTreeMap<&'static str, FamilyReport> = Default::default();

    for (t_idx, name) in names.iter().enumerate() {
        let tensor_len = analytic[t_idx].len();
        let picks = rng.sample_indices(tensor_len, samples_per_tensor.min(tensor_len));
        for flat in picks {
            let (r, c) = (flat / analytic[t_idx].cols(), flat % analytic[t_idx].cols());
            let mut plus = model.clone();
            let mut minus = model.clone();
            {
                let mut params = plus.named_params_mut();
                let (_, t) = params.iter_mut().find(|(n, _)| n == name).unwrap();
                let v = t.get(r, c);
                t.set(r, c, v + FD_EPS);
            }
            {
                let mut params = minus.named_params_mut();
                let (_, t) = params.iter_mut().find(|(n, _)| n == name).unwrap();
                let v = t.get(r, c);
                t.set(r, c, v - FD_EPS);
            }
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_EPS);
            let err = rel_err(analytic[t_idx].get(r, c), numeric);
            let entry = reports.entry(family_of(name)).or_insert_with(|| FamilyReport {
                family: family_of(name).to_string(),
                checked: 0,
                max_rel_err: 0.0,
            });
            entry.checked += 1;
            entry.max_rel_err = entry.max_rel_err.max(err);
        }
    }
    Ok(reports.into_values().collect())
}

/// Check the retriever encoder (embedding table and projection) against
/// central differences of the contrastive loss.
pub fn check_retriever_gradients(seed: u64, samples_per_tensor: usize) -> Result<FamilyReport> {
    let dim = 6;
    let encoder = SentenceEncoder::init(10, dim, seed);
    let mut rng = Rng::new(seed ^ 0xBEEF);

    let case_ids = vec![3usize, 4, 5, 6];
    let pos_ids = vec![vec![4usize, 5], vec![6usize, 7, 3]];
    let neg_ids = vec![vec![8usize, 9], vec![9usize, 3, 8]];
    let tau = 0.2;

    let loss_of = |enc: &SentenceEncoder| -> f64 {
        let mut tape = Tape::new();
        let embed = tape.leaf(enc.embed.clone());
        let proj = tape.leaf(enc.proj.clone());
        let encode = |tape: &mut Tape, ids: &[usize]| {
            let rows = tape.gather_rows(embed, ids);
            let pooled = tape.mean_rows(rows);
            tape.matmul(pooled, proj)
        };
        let query = encode(&mut tape, &case_ids);
        let mut pos = Vec::new();
        for ids in &pos_ids {
            let v = encode(&mut tape, ids);
            pos.push(tape.cosine(query, v));
        }
        let mut neg = Vec::new();
        for ids in &neg_ids {
            let v = encode(&mut tape, ids);
            neg.push(tape.cosine(query, v));
        }
        let pos = tape.concat_cols(&pos);
        let neg = tape.concat_cols(&neg);
        let loss = tape.contrastive(pos, neg, tau);
        tape.value(loss).item()
    };

    // analytic
    let mut tape = Tape::new();
    let embed = tape.leaf(encoder.embed.clone());
    let proj = tape.leaf(encoder.proj.clone());
    {
        let encode = |tape: &mut Tape, ids: &[usize]| {
            let rows = tape.gather_rows(embed, ids);
            let pooled = tape.mean_rows(rows);
            tape.matmul(pooled, proj)
        };
        let query = encode(&mut tape, &case_ids);
        let mut pos = Vec::new();
        for ids in &pos_ids {
            let v = encode(&mut tape, ids);
            pos.push(tape.cosine(query, v));
        }
        let mut neg = Vec::new();
        for ids in &neg_ids {
            let v = encode(&mut tape, ids);
            neg.push(tape.cosine(query, v));
        }
        let pos = tape.concat_cols(&pos);
        let neg = tape.concat_cols(&neg);
        let loss = tape.contrastive(pos, neg, tau);
        let grads = tape.backward(loss);
        let g_embed = grads.get(embed, &tape);
        let g_proj = grads.get(proj, &tape);

        let mut report = FamilyReport {
            family: "retriever encoder".into(),
            checked: 0,
            max_rel_err: 0.0,
        };
        for (which, analytic) in [(&g_embed, true), (&g_proj, false)]
            .iter()
            .map(|(g, is_embed)| (*is_embed, (*g).clone()))
        {
            fn pick(e: &mut SentenceEncoder, embed: bool) -> &mut Tensor {
                if embed {
                    &mut e.embed
                } else {
                    &mut e.proj
                }
            }
            let picks = rng.sample_indices(analytic.len(), samples_per_tensor.min(analytic.len()));
            for flat in picks {
                let (r, c) = (flat / analytic.cols(), flat % analytic.cols());
                let mut plus = encoder.clone();
                let mut minus = encoder.clone();
                let v = pick(&mut plus, which).get(r, c);
                pick(&mut plus, which).set(r, c, v + FD_EPS);
                pick(&mut minus, which).set(r, c, v - FD_EPS);
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_EPS);
                let err = rel_err(analytic.get(r, c), numeric);
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(err);
            }
        }
        Ok(report)
    }
}

/// Run every family and fail if any exceeds the tolerance.
pub fn run_all(seed: u64, samples_per_tensor: usize) -> Result<Vec<FamilyReport>> {
    let mut reports = check_model_gradients(seed, samples_per_tensor)?;
    reports.push(check_retriever_gradients(seed, samples_per_tensor)?);
    for report in &reports {
        if !report.passed() {
            return Err(Error::Numeric(format!(
                "gradient family {} failed: max relative error {:.3e} over {} samples",
                report.family, report.max_rel_err, report.checked
            )));
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_families_pass() {
        let reports = run_all(7, 6).unwrap();
        // retriever + embeddings + soft + gru + attention/ffn
        assert_eq!(reports.len(), 5);
        for report in &reports {
            assert!(report.checked > 0);
            assert!(
                report.max_rel_err < MAX_REL_ERR,
                "{} err {}",
                report.family,
                report.max_rel_err
            );
        }
    }
}
