//! Masked-LM inference model with trainable soft prompts and fact injection.
//!
//! Forward pass: look up embeddings for the assembled layout (the two soft
//! slots come from the trainable soft matrix), add sinusoidal positions, add
//! the BiGRU fact vector onto both soft rows, run the self-attention encoder
//! stack, and project mask rows through the tied embedding table. Training
//! minimizes mean cross-entropy between mask logits and the tokenized label
//! text.

use crate::corpus::{tokenize, Verbalizer, Vocab, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::gru::{encode_facts_tape, BiGruParams, GruLeaves};
use crate::labels::{map_to_label, PredictionTokens};
use crate::metrics::EvalReport;
use crate::prompt::PromptLayout;
use crate::rng::Rng;
use crate::tape::{log_softmax_at, Grads, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Maximum sequence length the encoder accepts.
    pub cap: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_h: 32,
            layers: 2,
            heads: 2,
            ff: 64,
            cap: 256,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::Usage(format!(
                "embedding width {} must divide evenly into {} heads",
                self.d_h, self.heads
            )));
        }
        if !self.d_h.is_multiple_of(2) {
            return Err(Error::Usage(
                "embedding width must be even (fact vector concatenates two halves)".into(),
            ));
        }
        if self.cap < 4 {
            return Err(Error::Usage("sequence cap must be at least 4".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

impl EncoderLayer {
    fn init(dims: &ModelDims, rng: &mut Rng) -> Self {
        let d = dims.d_h;
        let dk = dims.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let heads = |rng: &mut Rng| -> Vec<Tensor> {
            (0..dims.heads).map(|_| Tensor::uniform(d, dk, scale, rng)).collect()
        };
        EncoderLayer {
            wq: heads(rng),
            wk: heads(rng),
            wv: heads(rng),
            wo: Tensor::uniform(d, d, scale, rng),
            bo: Tensor::zeros(1, d),
            ln1_g: Tensor::from_vec(1, d, vec![1.0; d]),
            ln1_b: Tensor::zeros(1, d),
            w1: Tensor::uniform(d, dims.ff, scale, rng),
            b1: Tensor::zeros(1, dims.ff),
            w2: Tensor::uniform(dims.ff, d, 1.0 / (dims.ff as f64).sqrt(), rng),
            b2: Tensor::zeros(1, d),
            ln2_g: Tensor::from_vec(1, d, vec![1.0; d]),
            ln2_b: Tensor::zeros(1, d),
        }
    }
}

/// All trainable state plus the constant positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptModel {
    pub dims: ModelDims,
    pub embed: Tensor,
    /// Soft-prompt matrix S: row 0 is s1, row 1 is s2.
    pub soft: Tensor,
    pub layers: Vec<EncoderLayer>,
    /// Final layer-norm gain/bias applied after the last block.
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub gru: BiGruParams,
    pub pos: Tensor,
    pub vocab_hash: u64,
}

pub fn sinusoidal_positions(cap: usize, d: usize) -> Tensor {
    let mut pos = Tensor::zeros(cap, d);
    for p in 0..cap {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            pos.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pos
}

impl PromptModel {
    pub fn init(vocab: &Vocab, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = Rng::new(seed);
        let embed = Tensor::uniform(vocab.len(), dims.d_h, 0.1, &mut rng);
        // S starts from the embedding rows of two reserved tokens, then
        // trains independently.
        let mut soft = Tensor::zeros(2, dims.d_h);
        soft.row_mut(0).copy_from_slice(embed.row(PAD_ID));
        soft.row_mut(1).copy_from_slice(embed.row(UNK_ID));
        let layers = (0..dims.layers).map(|_| EncoderLayer::init(&dims, &mut rng)).collect();
        let gru = BiGruParams::init(dims.d_h, &mut rng);
        Ok(PromptModel {
            dims,
            embed,
            soft,
            layers,
            lnf_g: Tensor::from_vec(1, dims.d_h, vec![1.0; dims.d_h]),
            lnf_b: Tensor::zeros(1, dims.d_h),
            gru,
            pos: sinusoidal_positions(dims.cap, dims.d_h),
            vocab_hash: vocab.hash(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    /// Stable name -> tensor listing; the single source of parameter order
    /// for checkpoints, optimizer state, and gradient checks.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("soft".into(), &self.soft),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (h, t) in layer.wq.iter().enumerate() {
                out.push((format!("layer{i}.wq{h}"), t));
            }
            for (h, t) in layer.wk.iter().enumerate() {
                out.push((format!("layer{i}.wk{h}"), t));
            }
            for (h, t) in layer.wv.iter().enumerate() {
                out.push((format!("layer{i}.wv{h}"), t));
            }
            out.push((format!("layer{i}.wo"), &layer.wo));
            out.push((format!("layer{i}.bo"), &layer.bo));
            out.push((format!("layer{i}.ln1_g"), &layer.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &layer.ln1_b));
            out.push((format!("layer{i}.w1"), &layer.w1));
            out.push((format!("layer{i}.b1"), &layer.b1));
            out.push((format!("layer{i}.w2"), &layer.w2));
            out.push((format!("layer{i}.b2"), &layer.b2));
            out.push((format!("layer{i}.ln2_g"), &layer.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &layer.ln2_b));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("gru.fwd.wz".into(), &self.gru.fwd.wz));
        out.push(("gru.fwd.wr".into(), &self.gru.fwd.wr));
        out.push(("gru.fwd.wh".into(), &self.gru.fwd.wh));
        out.push(("gru.fwd.bz".into(), &self.gru.fwd.bz));
        out.push(("gru.fwd.br".into(), &self.gru.fwd.br));
        out.push(("gru.fwd.bh".into(), &self.gru.fwd.bh));
        out.push(("gru.bwd.wz".into(), &self.gru.bwd.wz));
        out.push(("gru.bwd.wr".into(), &self.gru.bwd.wr));
        out.push(("gru.bwd.wh".into(), &self.gru.bwd.wh));
        out.push(("gru.bwd.bz".into(), &self.gru.bwd.bz));
        out.push(("gru.bwd.br".into(), &self.gru.bwd.br));
        out.push(("gru.bwd.bh".into(), &self.gru.bwd.bh));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed".into(), &mut self.embed),
            ("soft".into(), &mut self.soft),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (h, t) in layer.wq.iter_mut().enumerate() {
                out.push((format!("layer{i}.wq{h}"), t));
            }
            for (h, t) in layer.wk.iter_mut().enumerate() {
                out.push((format!("layer{i}.wk{h}"), t));
            }
            for (h, t) in layer.wv.iter_mut().enumerate() {
                out.push((format!("layer{i}.wv{h}"), t));
            }
            out.push((format!("layer{i}.wo"), &mut layer.wo));
            out.push((format!("layer{i}.bo"), &mut layer.bo));
            out.push((format!("layer{i}.ln1_g"), &mut layer.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &mut layer.ln1_b));
            out.push((format!("layer{i}.w1"), &mut layer.w1));
            out.push((format!("layer{i}.b1"), &mut layer.b1));
            out.push((format!("layer{i}.w2"), &mut layer.w2));
            out.push((format!("layer{i}.b2"), &mut layer.b2));
            out.push((format!("layer{i}.ln2_g"), &mut layer.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &mut layer.ln2_b));
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("gru.fwd.wz".into(), &mut self.gru.fwd.wz));
        out.push(("gru.fwd.wr".into(), &mut self.gru.fwd.wr));
        out.push(("gru.fwd.wh".into(), &mut self.gru.fwd.wh));
        out.push(("gru.fwd.bz".into(), &mut self.gru.fwd.bz));
        out.push(("gru.fwd.br".into(), &mut self.gru.fwd.br));
        out.push(("gru.fwd.bh".into(), &mut self.gru.fwd.bh));
        out.push(("gru.bwd.wz".into(), &mut self.gru.bwd.wz));
        out.push(("gru.bwd.wr".into(), &mut self.gru.bwd.wr));
        out.push(("gru.bwd.wh".into(), &mut self.gru.bwd.wh));
        out.push(("gru.bwd.bz".into(), &mut self.gru.bwd.bz));
        out.push(("gru.bwd.br".into(), &mut self.gru.bwd.br));
        out.push(("gru.bwd.bh".into(), &mut self.gru.bwd.bh));
        out
    }
}

/// Leaves for one forward/backward pass, in `named_params` order plus the
/// constant positional table.
pub struct ModelLeaves {
    pub flat: Vec<Var>,
    pub embed: Var,
    pub soft: Var,
    pub pos: Var,
    layer_vars: Vec<Vec<Var>>,
    lnf: (Var, Var),
    gru_fwd: GruLeaves,
    gru_bwd: GruLeaves,
}

pub fn push_leaves(tape: &mut Tape, model: &PromptModel) -> ModelLeaves {
    let named = model.named_params();
    let flat: Vec<Var> = named.iter().map(|(_, t)| tape.leaf((*t).clone())).collect();
    let embed = flat[0];
    let soft = flat[1];
    let per_layer = 3 * model.dims.heads + 10;
    let layer_vars: Vec<Vec<Var>> = (0..model.dims.layers)
        .map(|i| {
            let start = 2 + i * per_layer;
            flat[start..start + per_layer].to_vec()
        })
        .collect();
    let lnf_at = 2 + model.dims.layers * per_layer;
    let gru_at = lnf_at + 2;
    let gru_fwd = GruLeaves {
        wz: flat[gru_at],
        wr: flat[gru_at + 1],
        wh: flat[gru_at + 2],
        bz: flat[gru_at + 3],
        br: flat[gru_at + 4],
        bh: flat[gru_at + 5],
    };
    let gru_bwd = GruLeaves {
        wz: flat[gru_at + 6],
        wr: flat[gru_at + 7],
        wh: flat[gru_at + 8],
        bz: flat[gru_at + 9],
        br: flat[gru_at + 10],
        bh: flat[gru_at + 11],
    };
    let pos = tape.leaf(model.pos.clone());
    let lnf = (flat[lnf_at], flat[lnf_at + 1]);
    ModelLeaves {
        flat,
        embed,
        soft,
        pos,
        layer_vars,
        lnf,
        gru_fwd,
        gru_bwd,
    }
}

/// Intermediate nodes a forward pass exposes for tests and training.
pub struct ForwardPass {
    /// E: embeddings plus positions, before fact injection.
    pub embedded: Var,
    /// E': embeddings after the fact vector lands on the soft rows.
    pub injected: Var,
    /// u as used (zero when facts are empty or disabled).
    pub fact_vec: Var,
    /// R: encoder output, one row per position.
    pub encoded: Var,
    /// Mask-row logits over the vocabulary.
    pub mask_logits: Var,
    /// Per layer and head attention probability matrices.
    pub attention: Vec<Var>,
}

/// Run the model graph for one layout. `fact_ids` are the fact-list token
/// ids; pass `inject = false` to force u = 0 (the no-facts ablation).
pub fn forward(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    dims: &ModelDims,
    layout: &PromptLayout,
    fact_ids: &[usize],
    inject: bool,
) -> ForwardPass {
    let n = layout.len();
    assert!(n >= 3, "layout too short");
    assert!(n <= dims.cap, "layout exceeds model cap");

    // E: soft rows from S, everything else from the tied table, plus
    // positions everywhere (soft slots included).
    let s1 = tape.slice_rows(leaves.soft, 0, 1);
    let interior = tape.gather_rows(leaves.embed, &layout.ids[1..n - 1]);
    let s2 = tape.slice_rows(leaves.soft, 1, 1);
    let tok = tape.concat_rows(&[s1, interior, s2]);
    let pos = tape.slice_rows(leaves.pos, 0, n);
    let embedded = tape.add(tok, pos);

    // u from the fact tokens through the BiGRU.
    let fact_vec = if inject && !fact_ids.is_empty() {
        let inputs = tape.gather_rows(leaves.embed, fact_ids);
        encode_facts_tape(tape, inputs, &leaves.gru_fwd, &leaves.gru_bwd, dims.d_h / 2)
    } else {
        tape.leaf(Tensor::zeros(1, dims.d_h))
    };
    let injected = tape.add_at_rows(embedded, fact_vec, &layout.soft_positions);

    // pre-norm encoder stack with a final layer norm
    let mut x = injected;
    let mut attention = Vec::with_capacity(dims.layers * dims.heads);
    let scale = 1.0 / (dims.head_dim() as f64).sqrt();
    for layer in &leaves.layer_vars {
        let heads = dims.heads;
        let (wq, wk, wv) = (&layer[..heads], &layer[heads..2 * heads], &layer[2 * heads..3 * heads]);
        let wo = layer[3 * heads];
        let bo = layer[3 * heads + 1];
        let ln1_g = layer[3 * heads + 2];
        let ln1_b = layer[3 * heads + 3];
        let w1 = layer[3 * heads + 4];
        let b1 = layer[3 * heads + 5];
        let w2 = layer[3 * heads + 6];
        let b2 = layer[3 * heads + 7];
        let ln2_g = layer[3 * heads + 8];
        let ln2_b = layer[3 * heads + 9];

        let normed1 = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS);
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.matmul(normed1, wq[h]);
            let k = tape.matmul(normed1, wk[h]);
            let v = tape.matmul(normed1, wv[h]);
            let scores = {
                let raw = tape.matmul_nt(q, k);
                tape.scale(raw, scale)
            };
            let probs = tape.softmax_rows(scores);
            attention.push(probs);
            contexts.push(tape.matmul(probs, v));
        }
        let merged = tape.concat_cols(&contexts);
        let attn_out = {
            let proj = tape.matmul(merged, wo);
            tape.add_row(proj, bo)
        };
        x = tape.add(x, attn_out);

        let normed2 = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS);
        let ffn = {
            let h1 = tape.matmul(normed2, w1);
            let h1 = tape.add_row(h1, b1);
            let h1 = tape.relu(h1);
            let h2 = tape.matmul(h1, w2);
            tape.add_row(h2, b2)
        };
        x = tape.add(x, ffn);
    }
    let encoded = tape.layer_norm(x, leaves.lnf.0, leaves.lnf.1, LN_EPS);

    let masks = tape.slice_rows(encoded, layout.mask_start, layout.mask_count);
    let mask_logits = tape.matmul_nt(masks, leaves.embed);
    ForwardPass {
        embedded,
        injected,
        fact_vec,
        encoded,
        mask_logits,
        attention,
    }
}

/// Argmax token id per mask row, reserved ids excluded. A vocabulary with
/// no non-reserved entries degenerates to UNK.
pub fn predict_token_ids(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            if row.len() <= UNK_ID + 1 {
                return UNK_ID;
            }
            let mut best = UNK_ID + 1;
            for c in UNK_ID + 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Mask targets: tokenized label text, truncated or PAD-padded to
/// `mask_count`; the activity mask marks non-PAD positions.
pub fn mlm_targets(
    label_text: &str,
    vocab: &Vocab,
    mask_count: usize,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let ids = tokenize(vocab, label_text, mask_count);
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "label text {label_text:?} tokenizes to nothing"
        )));
    }
    let mut targets = ids.clone();
    targets.resize(mask_count, PAD_ID);
    let active: Vec<bool> = (0..mask_count).map(|i| i < ids.len() && targets[i] != PAD_ID).collect();
    Ok((targets, active))
}

/// Mean cross-entropy of the mask logits against the tokenized label text,
/// over non-PAD target positions.
pub fn mlm_loss(
    logits: &Tensor,
    gold_label_text: &str,
    vocab: &Vocab,
    mask_count: usize,
) -> Result<f64> {
    assert_eq!(logits.rows(), mask_count, "logit rows != mask count");
    let (targets, active) = mlm_targets(gold_label_text, vocab, mask_count)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for r in 0..mask_count {
        if !active[r] {
            continue;
        }
        total += -log_softmax_at(logits.row(r), targets[r]);
        n += 1;
    }
    Ok(total / n as f64)
}

/// One prepared training/eval instance.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub layout: PromptLayout,
    pub fact_ids: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub optimizer: Optimizer,
    /// Force u = 0 everywhere (no-facts ablation).
    pub no_facts: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-2,
            batch: 8,
            max_epochs: 50,
            patience: 5,
            seed: 1,
            clip: 25.0,
            optimizer: Optimizer::default(),
            no_facts: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_f1: Vec<f64>,
    pub best_epoch: usize,
}

fn example_loss(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    dims: &ModelDims,
    example: &TrainExample,
    targets: &[usize],
    active: &[bool],
    no_facts: bool,
) -> Var {
    let pass = forward(tape, leaves, dims, &example.layout, &example.fact_ids, !no_facts);
    tape.cross_entropy_rows(pass.mask_logits, targets, active)
}

/// Predicted label for one example under the current parameters.
pub fn predict_example(
    model: &PromptModel,
    example: &TrainExample,
    verbalizer: &Verbalizer,
    vocab: &Vocab,
    no_facts: bool,
) -> (usize, Vec<usize>, Tensor) {
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, model);
    let pass = forward(
        &mut tape,
        &leaves,
        &model.dims,
        &example.layout,
        &example.fact_ids,
        !no_facts,
    );
    let logits = tape.value(pass.mask_logits).clone();
    let predicted = predict_token_ids(&logits);
    let tokens = PredictionTokens::from_ids(&predicted, vocab);
    let mapped = map_to_label(&tokens, verbalizer).expect("non-empty verbalizer");
    (mapped.label, predicted, logits)
}

fn macro_f1_over(
    model: &PromptModel,
    examples: &[TrainExample],
    verbalizer: &Verbalizer,
    vocab: &Vocab,
    no_facts: bool,
) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let pred: Vec<usize> = examples
        .iter()
        .map(|e| predict_example(model, e, verbalizer, vocab, no_facts).0)
        .collect();
    EvalReport::from_pairs(&gold, &pred, verbalizer.len())
        .map(|r| r.macro_f1)
        .unwrap_or(0.0)
}

/// Mini-batch training (Adam by default, SGD selectable) with early
/// stopping on validation macro-F1. The best parameters (by validation
/// score; final epoch when no validation set is given) are left in `model`
/// on return.
pub fn train_model(
    model: &mut PromptModel,
    train: &[TrainExample],
    val: &[TrainExample],
    verbalizer: &Verbalizer,
    vocab: &Vocab,
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let mask_count = train[0].layout.mask_count;
    let target_table: Vec<(Vec<usize>, Vec<bool>)> = (0..verbalizer.len())
        .map(|label| mlm_targets(verbalizer.text(label), vocab, mask_count))
        .collect::<Result<_>>()?;

    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let zeros_like: Vec<Tensor> = model
        .named_params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut slot_a = zeros_like.clone(); // momentum / first moment
    let mut slot_b = zeros_like; // second moment (adam only)
    let mut step = 0usize;
    let mut history = TrainHistory::default();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut wait = 0usize;

    for epoch in 0..opts.max_epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch.max(1)) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut chunk_loss = 0.0;
            for &idx in chunk {
                let example = &train[idx];
                let (targets, active) = &target_table[example.label];
                let mut tape = Tape::new();
                let leaves = push_leaves(&mut tape, model);
                let loss = example_loss(
                    &mut tape,
                    &leaves,
                    &model.dims,
                    example,
                    targets,
                    active,
                    opts.no_facts,
                );
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training loss diverged at epoch {epoch} (loss = {loss_value})"
                    )));
                }
                chunk_loss += loss_value;
                let grads: Grads = tape.backward(loss);
                let example_grads: Vec<Tensor> = leaves
                    .flat
                    .iter()
                    .map(|v| grads.get(*v, &tape))
                    .collect();
                acc = Some(match acc {
                    None => example_grads,
                    Some(mut tensors) => {
                        for (a, g) in tensors.iter_mut().zip(&example_grads) {
                            a.add_assign(g);
                        }
                        tensors
                    }
                });
            }
            epoch_loss += chunk_loss;
            let Some(mut grads) = acc else { continue };
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                g.scale_assign(inv);
            }
            // global-norm clip keeps early updates sane
            let norm_sq: f64 = grads.iter().map(|g| g.frob_norm_sq()).sum();
            let norm = norm_sq.sqrt();
            if norm > opts.clip {
                let shrink = opts.clip / norm;
                for g in grads.iter_mut() {
                    g.scale_assign(shrink);
                }
            }
            step += 1;
            for ((((_, param), grad), state_a), state_b) in model
                .named_params_mut()
                .into_iter()
                .zip(&grads)
                .zip(slot_a.iter_mut())
                .zip(slot_b.iter_mut())
            {
                match opts.optimizer {
                    Optimizer::Sgd { momentum } if momentum > 0.0 => {
                        state_a.scale_assign(momentum);
                        state_a.add_assign(grad);
                        param.sgd_step(state_a, opts.lr);
                    }
                    Optimizer::Sgd { .. } => param.sgd_step(grad, opts.lr),
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let bc1 = 1.0 - beta1.powi(step as i32);
                        let bc2 = 1.0 - beta2.powi(step as i32);
                        for i in 0..param.len() {
                            let g = grad.data()[i];
                            let m = &mut state_a.data_mut()[i];
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            let m_hat = *m / bc1;
                            let v = &mut state_b.data_mut()[i];
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let v_hat = *v / bc2;
                            param.data_mut()[i] -= opts.lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
        history.train_loss.push(epoch_loss / train.len() as f64);

        let val_f1 = macro_f1_over(model, val, verbalizer, vocab, opts.no_facts);
        history.val_f1.push(val_f1);
        if val.is_empty() {
            continue;
        }
        if val_f1 > best_f1 + 1e-12 {
            best_f1 = val_f1;
            history.best_epoch = epoch;
            best_params = Some(
                model
                    .named_params()
                    .into_iter()
                    .map(|(_, t)| t.clone())
                    .collect(),
            );
            wait = 0;
        } else {
            wait += 1;
            if wait > opts.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for ((_, param), saved) in model.named_params_mut().into_iter().zip(best) {
            *param = saved;
        }
    } else {
        history.best_epoch = history.train_loss.len().saturating_sub(1);
    }
    Ok(history)
}
