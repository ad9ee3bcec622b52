//! Bidirectional GRU that squashes the factual-element list into one summary
//! vector. Hidden size is half the embedding width so the concatenated
//! output (forward final state, backward final state) can be added directly
//! to soft-prompt embeddings.

use crate::corpus::{tokenize, Vocab};
use crate::llm::FactList;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate parameters for one direction. Weight matrices act on the
/// concatenated `[input; hidden]` row.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection {
    pub wz: Tensor,
    pub wr: Tensor,
    pub wh: Tensor,
    pub bz: Tensor,
    pub br: Tensor,
    pub bh: Tensor,
}

impl GruDirection {
    fn init(d_in: usize, d_hidden: usize, rng: &mut Rng) -> Self {
        let rows = d_in + d_hidden;
        GruDirection {
            wz: Tensor::uniform(rows, d_hidden, 0.1, rng),
            wr: Tensor::uniform(rows, d_hidden, 0.1, rng),
            wh: Tensor::uniform(rows, d_hidden, 0.1, rng),
            bz: Tensor::zeros(1, d_hidden),
            br: Tensor::zeros(1, d_hidden),
            bh: Tensor::zeros(1, d_hidden),
        }
    }

    fn zeros(d_in: usize, d_hidden: usize) -> Self {
        let rows = d_in + d_hidden;
        GruDirection {
            wz: Tensor::zeros(rows, d_hidden),
            wr: Tensor::zeros(rows, d_hidden),
            wh: Tensor::zeros(rows, d_hidden),
            bz: Tensor::zeros(1, d_hidden),
            br: Tensor::zeros(1, d_hidden),
            bh: Tensor::zeros(1, d_hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.wz.rows() - self.wz.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiGruParams {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

impl BiGruParams {
    /// `d_in` must be even: the summary vector concatenates two hidden states
    /// of size `d_in / 2` so it can be added to `d_in`-wide embeddings.
    pub fn init(d_in: usize, rng: &mut Rng) -> Self {
        assert!(d_in.is_multiple_of(2), "fact-encoder input width must be even");
        let d_hidden = d_in / 2;
        BiGruParams {
            fwd: GruDirection::init(d_in, d_hidden, rng),
            bwd: GruDirection::init(d_in, d_hidden, rng),
        }
    }

    pub fn zeros(d_in: usize) -> Self {
        assert!(d_in.is_multiple_of(2), "fact-encoder input width must be even");
        let d_hidden = d_in / 2;
        BiGruParams {
            fwd: GruDirection::zeros(d_in, d_hidden),
            bwd: GruDirection::zeros(d_in, d_hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden_dim()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU step: z and r gates from `[x; h]`, candidate from `[x; r .* h]`,
/// new state `(1-z) .* h + z .* cand`.
pub fn gru_cell(x: &[f64], h_prev: &[f64], dir: &GruDirection) -> Vec<f64> {
    let d_hidden = dir.hidden_dim();
    assert_eq!(x.len(), dir.input_dim(), "gru_cell input width mismatch");
    assert_eq!(h_prev.len(), d_hidden, "gru_cell hidden width mismatch");

    let gate = |w: &Tensor, b: &Tensor, left: &[f64], right: &[f64]| -> Vec<f64> {
        let mut out = b.row(0).to_vec();
        for (i, v) in left.iter().chain(right.iter()).enumerate() {
            if *v == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(w.row(i)) {
                *o += v * wv;
            }
        }
        out
    };

    let z: Vec<f64> = gate(&dir.wz, &dir.bz, x, h_prev).iter().map(|v| sigmoid(*v)).collect();
    let r: Vec<f64> = gate(&dir.wr, &dir.br, x, h_prev).iter().map(|v| sigmoid(*v)).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(rv, hv)| rv * hv).collect();
    let cand: Vec<f64> = gate(&dir.wh, &dir.bh, x, &rh).iter().map(|v| v.tanh()).collect();
    (0..d_hidden)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * cand[i])
        .collect()
}

/// Summary vector over an input row sequence: `[forward final state;
/// backward final state]`. The backward half is the state after the reverse
/// pass reaches position one. Empty input encodes to the zero vector.
pub fn encode_facts(params: &BiGruParams, inputs: &Tensor) -> Vec<f64> {
    let d_hidden = params.hidden_dim();
    if inputs.rows() == 0 {
        return vec![0.0; params.output_dim()];
    }
    let mut h_fwd = vec![0.0; d_hidden];
    for t in 0..inputs.rows() {
        h_fwd = gru_cell(inputs.row(t), &h_fwd, &params.fwd);
    }
    let mut h_bwd = vec![0.0; d_hidden];
    for t in (0..inputs.rows()).rev() {
        h_bwd = gru_cell(inputs.row(t), &h_bwd, &params.bwd);
    }
    h_fwd.extend(h_bwd);
    h_fwd
}

/// Token ids for the fact list: elements joined with `separator`, tokenized,
/// truncated to `max_fact_len`.
pub fn fact_token_ids(
    facts: &FactList,
    vocab: &Vocab,
    separator: &str,
    max_fact_len: usize,
) -> Vec<usize> {
    if facts.is_empty() {
        return Vec::new();
    }
    tokenize(vocab, &facts.joined(separator), max_fact_len)
}

/// Embedding rows for the fact tokens, ready for [`encode_facts`].
pub fn facts_to_inputs(
    facts: &FactList,
    vocab: &Vocab,
    embed: &Tensor,
    separator: &str,
    max_fact_len: usize,
) -> Tensor {
    let ids = fact_token_ids(facts, vocab, separator, max_fact_len);
    let mut out = Tensor::zeros(ids.len(), embed.cols());
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).copy_from_slice(embed.row(id));
    }
    out
}

/// Tape leaves for one direction's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruLeaves {
    pub wz: Var,
    pub wr: Var,
    pub wh: Var,
    pub bz: Var,
    pub br: Var,
    pub bh: Var,
}

impl GruLeaves {
    pub fn push(tape: &mut Tape, dir: &GruDirection) -> Self {
        GruLeaves {
            wz: tape.leaf(dir.wz.clone()),
            wr: tape.leaf(dir.wr.clone()),
            wh: tape.leaf(dir.wh.clone()),
            bz: tape.leaf(dir.bz.clone()),
            br: tape.leaf(dir.br.clone()),
            bh: tape.leaf(dir.bh.clone()),
        }
    }
}

fn gru_cell_tape(tape: &mut Tape, x: Var, h_prev: Var, dir: &GruLeaves) -> Var {
    let xh = tape.concat_cols(&[x, h_prev]);
    let z = {
        let lin = tape.matmul(xh, dir.wz);
        let biased = tape.add_row(lin, dir.bz);
        tape.sigmoid(biased)
    };
    let r = {
        let lin = tape.matmul(xh, dir.wr);
        let biased = tape.add_row(lin, dir.br);
        tape.sigmoid(biased)
    };
    let rh = tape.mul(r, h_prev);
    let xrh = tape.concat_cols(&[x, rh]);
    let cand = {
        let lin = tape.matmul(xrh, dir.wh);
        let biased = tape.add_row(lin, dir.bh);
        tape.tanh(biased)
    };
    let keep = {
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        tape.mul(one_minus_z, h_prev)
    };
    let update = tape.mul(z, cand);
    tape.add(keep, update)
}

/// Differentiable version of [`encode_facts`]: same recurrence built on the
/// tape. `inputs` must be a non-empty n x d_in node.
pub fn encode_facts_tape(
    tape: &mut Tape,
    inputs: Var,
    fwd: &GruLeaves,
    bwd: &GruLeaves,
    d_hidden: usize,
) -> Var {
    let n = tape.value(inputs).rows();
    assert!(n > 0, "encode_facts_tape needs at least one input row");
    let mut h_fwd = tape.leaf(Tensor::zeros(1, d_hidden));
    for t in 0..n {
        let x = tape.slice_rows(inputs, t, 1);
        h_fwd = gru_cell_tape(tape, x, h_fwd, fwd);
    }
    let mut h_bwd = tape.leaf(Tensor::zeros(1, d_hidden));
    for t in (0..n).rev() {
        let x = tape.slice_rows(inputs, t, 1);
        h_bwd = gru_cell_tape(tape, x, h_bwd, bwd);
    }
    tape.concat_cols(&[h_fwd, h_bwd])
}
