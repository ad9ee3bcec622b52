//! Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
//! line. Run with `cargo test --test acceptance -- --nocapture` to see the
//! lines as they complete.

use std::time::{Duration, Instant};

use lexprompt::checkpoint::{checkpoint_bytes, model_to_checkpoint};
use lexprompt::config::RunConfig;
use lexprompt::corpus::{
    build_vocab, generate_toy_corpus, tokenize, CuePlacement, TokenMode, ToyCorpus,
    ToyCorpusSpec,
};
use lexprompt::gradcheck;
use lexprompt::labels::{label_scores, map_to_label, PredictionTokens};
use lexprompt::llm::MockExtractorClient;
use lexprompt::matcher::{match_snippets, Lexicon, SnippetMatch};
use lexprompt::model::{forward, push_leaves, ModelDims, PromptModel};
use lexprompt::pipeline::{data_fraction_sweep, run_experiment, split_dataset};
use lexprompt::prompt::assemble_prompt;
use lexprompt::retrieval::{
    contrastive_loss, retrieve_top_n, train_joint_space, ArticleIndex, RetrieverConfig,
    SentenceEncoder,
};
use lexprompt::rng::Rng;
use lexprompt::tape::Tape;
use lexprompt::tensor::{dot, Tensor};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "{} criterion {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion}: {detail}");
}

/// Separable corpus: per-charge cues at the front of each case.
fn lead_corpus(charges: usize, cases: usize, seed: u64) -> ToyCorpus {
    generate_toy_corpus(
        &ToyCorpusSpec {
            charges,
            cases_per_charge: cases,
            cue_placement: CuePlacement::Lead,
            ..Default::default()
        },
        seed,
    )
    .expect("toy corpus")
}

fn toy_run_config(seed: u64) -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = seed;
    config.mask_count = 4;
    config.max_len = 40;
    config.max_fact_len = 48;
    config.n_articles = 2;
    config.dims = ModelDims {
        d_h: 32,
        layers: 2,
        heads: 2,
        ff: 64,
        cap: 200,
    };
    config.retriever.epochs = 30;
    config.max_epochs = 30;
    config.patience = 8;
    config.lr = 0.01;
    config.templates.t1 = "charge:".into();
    config.templates.t2 = "keys:".into();
    config
}

#[test]
fn criterion_1_closed_form_contrastive_loss() {
    let start = Instant::now();
    let ln2 = 2.0f64.ln();
    let mut worst = 0.0f64;
    for c in [1usize, 3, 10] {
        for tau in [0.05, 0.1, 1.0] {
            let sims = vec![0.37; c];
            let loss = contrastive_loss(&sims, &sims, tau).expect("valid inputs");
            worst = worst.max((loss - ln2).abs());
        }
    }
    let elapsed = start.elapsed();
    report(
        "1",
        worst < 1e-9 && elapsed < Duration::from_secs(1),
        &format!("all-equal similarities give ln 2 (max |delta| {worst:.2e}, {elapsed:.2?})"),
    );
}

#[test]
fn criterion_2_gradient_suites() {
    let start = Instant::now();
    let reports = gradcheck::run_all(7, 8).expect("gradient families");
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    let families: Vec<&str> = reports.iter().map(|r| r.family.as_str()).collect();
    let pass = reports.len() == 5
        && reports.iter().all(|r| r.passed() && r.checked > 0)
        && elapsed < Duration::from_secs(60);
    report(
        "2",
        pass,
        &format!(
            "families {families:?} pass central differences (max rel err {worst:.2e}, {elapsed:.2?})"
        ),
    );
}

#[test]
fn criterion_3_retrieval_quality() {
    let start = Instant::now();
    // longer filler keeps the character-overlap leak of the untrained space
    // below the bar while staying trivially separable once trained
    let corpus = generate_toy_corpus(
        &ToyCorpusSpec {
            charges: 3,
            cases_per_charge: 30,
            sentences_per_case: 4,
            sentence_len: 16,
            ..Default::default()
        },
        123,
    )
    .expect("retrieval corpus");
    let dataset = corpus.dataset;
    let vocab = build_vocab(&dataset, 1, TokenMode::Char);

    let accuracy = |encoder: &SentenceEncoder| {
        let index = ArticleIndex::build(encoder, &vocab, &dataset.articles);
        let hits = dataset
            .cases
            .iter()
            .filter(|case| {
                retrieve_top_n(encoder, &vocab, &case.text, &index, 1)
                    .first()
                    .map(|(id, _)| *id)
                    == Some(case.articles[0])
            })
            .count();
        hits as f64 / dataset.cases.len() as f64
    };

    let untrained = SentenceEncoder::init(vocab.len(), 32, 123);
    let untrained_acc = accuracy(&untrained);

    let mut trained = untrained.clone();
    let split = split_dataset(&dataset, 123, 0.1);
    let keep: std::collections::HashSet<usize> =
        split.train.iter().chain(&split.val).copied().collect();
    let mut pairs = lexprompt::retrieval::build_pairs(&dataset, 123);
    pairs.pairs.retain(|p| keep.contains(&p.case_idx));
    train_joint_space(
        &mut trained,
        &dataset,
        &vocab,
        &pairs,
        &RetrieverConfig {
            dim: 32,
            epochs: 100,
            seed: 123,
            ..Default::default()
        },
    )
    .expect("contrastive training");
    let trained_acc = accuracy(&trained);

    let elapsed = start.elapsed();
    report(
        "3",
        trained_acc >= 0.95 && untrained_acc <= 0.6 && elapsed < Duration::from_secs(120),
        &format!(
            "top-1 statute accuracy {trained_acc:.3} trained vs {untrained_acc:.3} untrained ({elapsed:.2?})"
        ),
    );
}

#[test]
fn criterion_4_end_to_end_toy_task() {
    let start = Instant::now();
    let corpus = lead_corpus(5, 40, 2024);
    let lexicon = Lexicon::from_terms(corpus.lexicon.clone());
    let client = MockExtractorClient::new(lexicon.clone());
    let config = toy_run_config(2024);

    let experiment =
        run_experiment(&corpus.dataset, &lexicon, &config, &client).expect("toy experiment");
    let elapsed = start.elapsed();
    report(
        "4",
        experiment.report.macro_f1 >= 0.90 && elapsed < Duration::from_secs(600),
        &format!(
            "held-out macro F1 {:.4} over {} epochs ({elapsed:.2?})",
            experiment.report.macro_f1,
            experiment.history.train_loss.len()
        ),
    );
}

fn adversarial_config(seed: u64, max_fact_len: usize) -> RunConfig {
    let mut config = toy_run_config(seed);
    config.max_len = 12; // tail cues fall outside the kept prefix
    config.max_fact_len = max_fact_len;
    config.dims.cap = 280;
    config.max_epochs = 80;
    config.patience = 30;
    config
}

#[test]
fn criterion_5a_snippet_ablation_direction() {
    let start = Instant::now();
    // cue keywords only in the truncated-away tail: the keyword segment is
    // the one clean path to the label
    let corpus = generate_toy_corpus(
        &ToyCorpusSpec {
            charges: 4,
            cases_per_charge: 24,
            cue_placement: CuePlacement::Tail,
            sentences_per_case: 6,
            sentence_len: 16,
            ..Default::default()
        },
        777,
    )
    .expect("tail-cue corpus");
    let lexicon = Lexicon::from_terms(corpus.lexicon.clone());
    let client = MockExtractorClient::new(lexicon.clone());
    let config = adversarial_config(777, 8);

    let full = run_experiment(&corpus.dataset, &lexicon, &config, &client).expect("full");
    let mut ablated_config = config.clone();
    ablated_config.no_snippets = true;
    let ablated =
        run_experiment(&corpus.dataset, &lexicon, &ablated_config, &client).expect("ablated");

    let gap = full.report.macro_f1 - ablated.report.macro_f1;
    let elapsed = start.elapsed();
    report(
        "5a",
        gap >= 0.05,
        &format!(
            "full {:.4} vs no_snippets {:.4}, gap {gap:.4} >= 0.05 ({elapsed:.2?})",
            full.report.macro_f1, ablated.report.macro_f1
        ),
    );
}

#[test]
fn criterion_5b_fact_ablation_direction() {
    let start = Instant::now();
    // shared cue keywords neutralize the lexicon; per-charge evidence words
    // reach the model only through the consultation + BiGRU path
    let corpus = generate_toy_corpus(
        &ToyCorpusSpec {
            charges: 4,
            cases_per_charge: 24,
            cue_placement: CuePlacement::Tail,
            shared_cues: true,
            hidden_evidence: true,
            sentences_per_case: 6,
            sentence_len: 16,
            ..Default::default()
        },
        888,
    )
    .expect("hidden-evidence corpus");
    let lexicon = Lexicon::from_terms(corpus.lexicon.clone());
    let client = MockExtractorClient::new(lexicon.clone());
    let config = adversarial_config(888, 200);

    let full = run_experiment(&corpus.dataset, &lexicon, &config, &client).expect("full");
    let mut ablated_config = config.clone();
    ablated_config.no_facts = true;
    let ablated =
        run_experiment(&corpus.dataset, &lexicon, &ablated_config, &client).expect("ablated");

    let gap = full.report.macro_f1 - ablated.report.macro_f1;
    let elapsed = start.elapsed();
    report(
        "5b",
        gap >= 0.02,
        &format!(
            "full {:.4} vs no_facts {:.4}, gap {gap:.4} >= 0.02 ({elapsed:.2?})",
            full.report.macro_f1, ablated.report.macro_f1
        ),
    );
}

#[test]
fn criterion_6_oracle_equivalences() {
    let start = Instant::now();
    let mut rng = Rng::new(4096);

    // knowledge matcher vs naive scan on 1,000 random instances
    let alphabet: Vec<char> = "abcd甲乙".chars().collect();
    let mut matcher_mismatches = 0usize;
    for _ in 0..1000 {
        let terms: Vec<String> = (0..1 + rng.below(6))
            .map(|_| {
                (0..1 + rng.below(3))
                    .map(|_| alphabet[rng.below(alphabet.len())])
                    .collect()
            })
            .collect();
        let text: String = (0..rng.below(40))
            .map(|_| alphabet[rng.below(alphabet.len())])
            .collect();
        let lexicon = Lexicon::from_terms(terms);
        let fast = match_snippets(&lexicon, &text);
        let slow = naive_scan(lexicon.terms(), &text);
        if fast != slow {
            matcher_mismatches += 1;
        }
    }

    // label mapper vs exhaustive scan on 1,000 random predictions
    let corpus = lead_corpus(5, 2, 11);
    let vocab = build_vocab(&corpus.dataset, 1, TokenMode::Char);
    let verbalizer = &corpus.dataset.verbalizer;
    let mut mapper_mismatches = 0usize;
    for _ in 0..1000 {
        let ids: Vec<usize> = (0..rng.below(8)).map(|_| rng.below(vocab.len())).collect();
        let prediction = PredictionTokens::from_ids(&ids, &vocab);
        let mapped = map_to_label(&prediction, verbalizer).expect("mapping");
        let scores = label_scores(&prediction, verbalizer);
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best_label = scores.iter().position(|s| *s == best).expect("argmax");
        if mapped.label != best_label || mapped.score != best {
            mapper_mismatches += 1;
        }
    }

    // retrieval vs brute-force inner-product sort on 200 random queries
    let encoder = SentenceEncoder::init(vocab.len(), 16, 5);
    let index = ArticleIndex::build(&encoder, &vocab, &corpus.dataset.articles);
    let mut retrieval_mismatches = 0usize;
    for _ in 0..200 {
        let text: String = (0..1 + rng.below(30))
            .map(|_| alphabet[rng.below(alphabet.len())])
            .collect();
        let n = rng.below(7);
        let got = retrieve_top_n(&encoder, &vocab, &text, &index, n);
        let query = encoder.encode_text(&vocab, &text);
        let mut all: Vec<(u32, f64)> = corpus
            .dataset
            .articles
            .iter()
            .map(|a| (a.id, dot(&query, &encoder.encode_text(&vocab, &a.text))))
            .collect();
        all.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        all.truncate(n.min(all.len()));
        if got != all {
            retrieval_mismatches += 1;
        }
    }

    let elapsed = start.elapsed();
    report(
        "6",
        matcher_mismatches == 0 && mapper_mismatches == 0 && retrieval_mismatches == 0,
        &format!(
            "matcher {matcher_mismatches}/1000, mapper {mapper_mismatches}/1000, retrieval {retrieval_mismatches}/200 mismatches ({elapsed:.2?})"
        ),
    );
}

fn naive_scan(terms: &[String], text: &str) -> Vec<SnippetMatch> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    for term in terms {
        let tchars: Vec<char> = term.chars().collect();
        if tchars.is_empty() || tchars.len() > chars.len() {
            continue;
        }
        for begin in 0..=(chars.len() - tchars.len()) {
            if chars[begin..begin + tchars.len()] == tchars[..] {
                out.push(SnippetMatch {
                    term: term.clone(),
                    first_offset: begin,
                });
                break;
            }
        }
    }
    out.sort_by(|a, b| {
        a.first_offset
            .cmp(&b.first_offset)
            .then_with(|| b.term.chars().count().cmp(&a.term.chars().count()))
            .then_with(|| a.term.cmp(&b.term))
    });
    out
}

#[test]
fn criterion_7_structural_identities() {
    let start = Instant::now();
    let mut rng = Rng::new(7777);

    // layout length identity on 1,000 randomized instances
    let mut layout_failures = 0usize;
    for _ in 0..1000 {
        let t1 = vec![3usize; rng.below(12)];
        let t2 = vec![4usize; rng.below(12)];
        let case = vec![5usize; rng.below(80)];
        let k = vec![6usize; rng.below(20)];
        let mask_count = 1 + rng.below(8);
        let cap = 256;
        let layout = assemble_prompt(&case, &k, &t1, &t2, mask_count, cap).expect("layout");
        let kept = case
            .len()
            .min(cap - (2 + t1.len() + mask_count + t2.len() + k.len()));
        let identity =
            layout.len() == 2 + t1.len() + mask_count + kept + t2.len() + k.len();
        let softs = layout.soft_positions == [0, layout.len() - 1];
        if !identity || !softs {
            layout_failures += 1;
        }
    }

    // inject delta: exactly the two listed rows change, by +u, on 1,000
    // randomized tensors
    let mut inject_failures = 0usize;
    for _ in 0..1000 {
        let n = 3 + rng.below(20);
        let cols = 2 + rng.below(10);
        let e = Tensor::uniform(n, cols, 1.0, &mut rng);
        let u = Tensor::uniform(1, cols, 1.0, &mut rng);
        let mut tape = Tape::new();
        let ev = tape.leaf(e.clone());
        let uv = tape.leaf(u.clone());
        let injected = tape.add_at_rows(ev, uv, &[0, n - 1]);
        let out = tape.value(injected);
        let mut changed = 0usize;
        let mut delta_ok = true;
        for r in 0..n {
            if out.row(r) != e.row(r) {
                changed += 1;
                for c in 0..cols {
                    if (out.get(r, c) - e.get(r, c) - u.get(0, c)).abs() > 1e-15 {
                        delta_ok = false;
                    }
                }
            }
        }
        if changed != 2 || !delta_ok {
            inject_failures += 1;
        }
    }

    // u = 0 gives a bitwise-identical sequence through the real model path
    let corpus = lead_corpus(3, 4, 99);
    let vocab = build_vocab(&corpus.dataset, 1, TokenMode::Char);
    let model = PromptModel::init(
        &vocab,
        ModelDims {
            d_h: 16,
            layers: 1,
            heads: 2,
            ff: 24,
            cap: 128,
        },
        99,
    )
    .expect("model");
    let case_ids = tokenize(&vocab, &corpus.dataset.cases[0].text, 40);
    let t1 = tokenize(&vocab, "charge:", 16);
    let t2 = tokenize(&vocab, "keys:", 16);
    let layout = assemble_prompt(&case_ids, &[], &t1, &t2, 4, 128).expect("layout");
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, &model);
    let fact_ids = tokenize(&vocab, "abc", 8);
    let pass = forward(&mut tape, &leaves, &model.dims, &layout, &fact_ids, false);
    let bitwise = tape.value(pass.embedded) == tape.value(pass.injected);

    let elapsed = start.elapsed();
    report(
        "7",
        layout_failures == 0 && inject_failures == 0 && bitwise,
        &format!(
            "layout identity {layout_failures}/1000 failures, inject delta {inject_failures}/1000 failures, zero-u bitwise {bitwise} ({elapsed:.2?})"
        ),
    );
}

#[test]
fn criterion_8_training_determinism() {
    let start = Instant::now();
    let corpus = lead_corpus(3, 9, 31);
    let lexicon = Lexicon::from_terms(corpus.lexicon.clone());
    let client = MockExtractorClient::new(lexicon.clone());
    let mut config = toy_run_config(31);
    config.max_epochs = 4;
    config.retriever.epochs = 6;

    let a = run_experiment(&corpus.dataset, &lexicon, &config, &client).expect("run a");
    let b = run_experiment(&corpus.dataset, &lexicon, &config, &client).expect("run b");

    let bytes_a = checkpoint_bytes(&model_to_checkpoint(&a.pipeline.model));
    let bytes_b = checkpoint_bytes(&model_to_checkpoint(&b.pipeline.model));
    let identical_ckpt = bytes_a == bytes_b;
    let identical_report = a.report == b.report;
    let identical_history = a.history == b.history;

    let elapsed = start.elapsed();
    report(
        "8",
        identical_ckpt && identical_report && identical_history,
        &format!(
            "bit-identical checkpoints {identical_ckpt}, identical reports {identical_report}, identical histories {identical_history} ({elapsed:.2?})"
        ),
    );
}

#[test]
fn criterion_9_data_fraction_sweep() {
    let start = Instant::now();
    let corpus = lead_corpus(5, 40, 2024);
    let lexicon = Lexicon::from_terms(corpus.lexicon.clone());
    let client = MockExtractorClient::new(lexicon.clone());
    let mut config = toy_run_config(2024);
    config.max_epochs = 20;

    let rows = data_fraction_sweep(
        &corpus.dataset,
        &lexicon,
        &[0.1, 0.25, 0.5, 1.0],
        &config,
        &client,
    )
    .expect("sweep");
    let f1_small = rows[0].macro_f1;
    let f1_full = rows[3].macro_f1;
    let elapsed = start.elapsed();
    report(
        "9",
        rows.len() == 4 && f1_full >= f1_small,
        &format!(
            "fractions {:?} -> F1 {:?}; full {f1_full:.4} >= tenth {f1_small:.4} ({elapsed:.2?})",
            rows.iter().map(|r| r.fraction).collect::<Vec<_>>(),
            rows.iter()
                .map(|r| (r.macro_f1 * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        ),
    );
}
