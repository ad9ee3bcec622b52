//! End-to-end orchestration: per-case preparation, prediction with
//! explanations, evaluation, ablation rows, and sweeps.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{build_vocab, tokenize, Article, Dataset, Vocab};
use crate::error::{Error, Result};
use crate::gru::fact_token_ids;
use crate::labels::{label_scores, map_to_label, PredictionTokens};
use crate::llm::{extract_facts, FactList, LlmClient};
use crate::matcher::{match_snippets, snippets_to_tokens, Lexicon, SnippetMatch};
use crate::metrics::EvalReport;
use crate::model::{
    predict_example, train_model, Optimizer, PromptModel, TrainExample, TrainHistory,
    TrainOptions,
};
use crate::prompt::assemble_prompt;
use crate::retrieval::{
    build_pairs, retrieve_top_n, train_joint_space, ArticleIndex, PairSet, SentenceEncoder,
};
use crate::rng::Rng;

/// Everything a prediction needs, bundled after training.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub retriever: SentenceEncoder,
    pub index: ArticleIndex,
    pub model: PromptModel,
    pub config: RunConfig,
    t1_ids: Vec<usize>,
    t2_ids: Vec<usize>,
}

/// Per-case artifacts produced ahead of the model forward pass.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub example: TrainExample,
    pub retrieved: Vec<(u32, f64)>,
    pub facts: FactList,
    pub snippets: Vec<SnippetMatch>,
}

fn attribute(stage: &str, e: Error) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("{stage}: {msg}")),
        Error::Numeric(msg) => Error::Numeric(format!("{stage}: {msg}")),
        Error::Transport(msg) => Error::Transport(format!("{stage}: {msg}")),
        other => other,
    }
}

impl Pipeline {
    pub fn new(
        mut dataset: Dataset,
        vocab: Vocab,
        lexicon: Lexicon,
        retriever: SentenceEncoder,
        model: PromptModel,
        config: RunConfig,
    ) -> Self {
        // label token sets must agree with the run's tokenization mode
        dataset.verbalizer = dataset.verbalizer.with_mode(config.token_mode);
        let index = ArticleIndex::build(&retriever, &vocab, &dataset.articles);
        let (t1_ids, t2_ids) = config.templates.token_ids(&vocab);
        Pipeline {
            dataset,
            vocab,
            lexicon,
            retriever,
            index,
            model,
            config,
            t1_ids,
            t2_ids,
        }
    }

    fn articles_for(&self, retrieved: &[(u32, f64)]) -> Vec<Article> {
        retrieved
            .iter()
            .filter_map(|(id, _)| self.dataset.article_by_id(*id).cloned())
            .collect()
    }

    /// Retrieval, consultation, keyword matching, and prompt assembly for one
    /// case text. `label` is carried into the example for training/eval.
    pub fn prepare(
        &self,
        client: &dyn LlmClient,
        case_text: &str,
        label: usize,
    ) -> Result<Prepared> {
        let config = &self.config;
        let retrieved = retrieve_top_n(
            &self.retriever,
            &self.vocab,
            case_text,
            &self.index,
            config.n_articles,
        );
        let articles = self.articles_for(&retrieved);

        let facts = if articles.is_empty() {
            FactList::default()
        } else {
            extract_facts(client, case_text, &articles, config.max_prompt_chars)
                .map_err(|e| attribute("fact extraction", e))?
        };
        let fact_ids = fact_token_ids(
            &facts,
            &self.vocab,
            &config.fact_separator,
            config.max_fact_len,
        );

        let snippets = match_snippets(&self.lexicon, case_text);
        let snippet_ids = if config.no_snippets {
            Vec::new()
        } else {
            snippets_to_tokens(&snippets, &self.vocab, &config.snippet_separator)
        };

        let case_ids = tokenize(&self.vocab, case_text, config.max_len);
        let layout = assemble_prompt(
            &case_ids,
            &snippet_ids,
            &self.t1_ids,
            &self.t2_ids,
            config.mask_count,
            config.dims.cap,
        )
        .map_err(|e| attribute("prompt assembly", e))?;

        Ok(Prepared {
            example: TrainExample {
                layout,
                fact_ids,
                label,
            },
            retrieved,
            facts,
            snippets,
        })
    }

    /// Full prediction with the explanation record.
    pub fn predict_case(
        &self,
        client: &dyn LlmClient,
        case_text: &str,
        case_id: Option<&str>,
    ) -> Result<Explanation> {
        let prepared = self.prepare(client, case_text, 0)?;
        let (label, predicted_ids, _logits) = predict_example(
            &self.model,
            &prepared.example,
            &self.dataset.verbalizer,
            &self.vocab,
            self.config.no_facts,
        );
        let tokens = PredictionTokens::from_ids(&predicted_ids, &self.vocab);
        let mapped = map_to_label(&tokens, &self.dataset.verbalizer)
            .map_err(|e| attribute("label mapping", e))?;
        debug_assert_eq!(mapped.label, label);
        let scores = label_scores(&tokens, &self.dataset.verbalizer);
        Ok(Explanation {
            case_id: case_id.map(|s| s.to_string()),
            predicted_label: mapped.label,
            predicted_label_text: self.dataset.verbalizer.text(mapped.label).to_string(),
            jaccard_score: mapped.score,
            zero_confidence: mapped.zero_confidence,
            retrieved_articles: prepared
                .retrieved
                .iter()
                .map(|(id, score)| RetrievedArticle {
                    id: *id,
                    score: *score,
                })
                .collect(),
            facts: prepared.facts.elements.clone(),
            snippets: prepared
                .snippets
                .iter()
                .map(|m| m.term.clone())
                .collect(),
            predicted_tokens: predicted_ids
                .iter()
                .filter_map(|&id| self.vocab.token(id).map(|t| t.to_string()))
                .collect(),
            label_scores: scores
                .iter()
                .enumerate()
                .map(|(label, jaccard)| LabelScore {
                    label,
                    text: self.dataset.verbalizer.text(label).to_string(),
                    jaccard: *jaccard,
                })
                .collect(),
        })
    }

    /// Evaluate prepared examples against their gold labels.
    pub fn evaluate_prepared(&self, prepared: &[Prepared]) -> Result<EvalReport> {
        if prepared.is_empty() {
            return Err(Error::Data("empty test split".into()));
        }
        let gold: Vec<usize> = prepared.iter().map(|p| p.example.label).collect();
        let pred: Vec<usize> = prepared
            .iter()
            .map(|p| {
                predict_example(
                    &self.model,
                    &p.example,
                    &self.dataset.verbalizer,
                    &self.vocab,
                    self.config.no_facts,
                )
                .0
            })
            .collect();
        EvalReport::from_pairs(&gold, &pred, self.dataset.num_labels())
    }

    /// Prepare and evaluate the given case indices.
    pub fn evaluate_indices(&self, client: &dyn LlmClient, indices: &[usize]) -> Result<EvalReport> {
        let prepared = self.prepare_indices(client, indices)?;
        self.evaluate_prepared(&prepared)
    }

    pub fn prepare_indices(
        &self,
        client: &dyn LlmClient,
        indices: &[usize],
    ) -> Result<Vec<Prepared>> {
        indices
            .iter()
            .map(|&i| {
                let case = &self.dataset.cases[i];
                self.prepare(client, &case.text, case.charge)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievedArticle {
    pub id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelScore {
    pub label: usize,
    pub text: String,
    pub jaccard: f64,
}

/// What the pipeline saw and decided for one case; serializes to one JSON
/// line for machine consumption.
#[derive(Debug, Clone, Serialize)]
pub struct Explanation {
    pub case_id: Option<String>,
    pub predicted_label: usize,
    pub predicted_label_text: String,
    pub jaccard_score: f64,
    pub zero_confidence: bool,
    pub retrieved_articles: Vec<RetrievedArticle>,
    pub facts: Vec<String>,
    pub snippets: Vec<String>,
    pub predicted_tokens: Vec<String>,
    pub label_scores: Vec<LabelScore>,
}

impl Explanation {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("explanation serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if let Some(id) = &self.case_id {
            out.push_str(&format!("case        {id}\n"));
        }
        out.push_str(&format!(
            "prediction  {} ({}), jaccard {:.4}{}\n",
            self.predicted_label,
            self.predicted_label_text,
            self.jaccard_score,
            if self.zero_confidence { " [zero confidence]" } else { "" }
        ));
        let arts = self
            .retrieved_articles
            .iter()
            .map(|a| format!("{} ({:.4})", a.id, a.score))
            .collect::<Vec<_>>()
            .join(", ");
        out.push_str(&format!("statutes    {arts}\n"));
        out.push_str(&format!("snippets    {}\n", self.snippets.join(", ")));
        out.push_str("facts\n");
        for fact in &self.facts {
            out.push_str(&format!("  - {fact}\n"));
        }
        out.push_str(&format!(
            "mask tokens {}\n",
            self.predicted_tokens.join(" ")
        ));
        out
    }
}

/// Stratified split: per charge, one third of the cases (rounded down) held
/// out for test, then `val_fraction` of the remaining pool carved out for
/// early stopping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(dataset: &Dataset, seed: u64, val_fraction: f64) -> SplitIndices {
    let mut rng = Rng::new(seed ^ 0x5eed_5eed);
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for charge in 0..dataset.num_labels() {
        let mut indices: Vec<usize> = dataset
            .cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.charge == charge)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut indices);
        let n = indices.len();
        let n_test = n / 3;
        let pool = n - n_test;
        let n_val = ((pool as f64) * val_fraction).floor() as usize;
        split.test.extend(&indices[pool..]);
        split.val.extend(&indices[pool - n_val..pool]);
        split.train.extend(&indices[..pool - n_val]);
    }
    split
}

/// A finished run: the trained pipeline plus its histories and test report.
pub struct Experiment {
    pub pipeline: Pipeline,
    pub report: EvalReport,
    pub history: TrainHistory,
    pub retriever_history: Vec<f64>,
    pub split: SplitIndices,
}

fn filter_pairs(pairs: PairSet, keep: &HashSet<usize>) -> PairSet {
    PairSet {
        pairs: pairs
            .pairs
            .into_iter()
            .filter(|p| keep.contains(&p.case_idx))
            .collect(),
    }
}

/// Train the full pipeline on an explicit split. A pre-trained retriever
/// skips contrastive training; otherwise one is trained here (or left at its
/// random initialization under the no-contrastive ablation).
pub fn run_with_split_and_retriever(
    dataset: &Dataset,
    lexicon: &Lexicon,
    config: &RunConfig,
    client: &dyn LlmClient,
    split: SplitIndices,
    pretrained: Option<SentenceEncoder>,
) -> Result<Experiment> {
    config.validate()?;
    let vocab = build_vocab(dataset, config.min_freq, config.token_mode);

    let (mut retriever, skip_training) = match pretrained {
        Some(encoder) => (encoder, true),
        None => (
            SentenceEncoder::init(vocab.len(), config.retriever.dim, config.seed),
            false,
        ),
    };
    let retriever_history = if config.no_contrastive || skip_training {
        Vec::new()
    } else {
        let keep: HashSet<usize> = split.train.iter().chain(&split.val).copied().collect();
        let pairs = filter_pairs(build_pairs(dataset, config.seed), &keep);
        if pairs.is_empty() {
            Vec::new()
        } else {
            train_joint_space(
                &mut retriever,
                dataset,
                &vocab,
                &pairs,
                &config.retriever_config(),
            )
            .map_err(|e| attribute("joint-space training", e))?
        }
    };

    let model = PromptModel::init(&vocab, config.dims, config.seed)?;
    let mut pipeline = Pipeline::new(
        dataset.clone(),
        vocab,
        lexicon.clone(),
        retriever,
        model,
        config.clone(),
    );

    let train_prepared = pipeline.prepare_indices(client, &split.train)?;
    let val_prepared = pipeline.prepare_indices(client, &split.val)?;
    let test_prepared = pipeline.prepare_indices(client, &split.test)?;

    let train_examples: Vec<TrainExample> =
        train_prepared.iter().map(|p| p.example.clone()).collect();
    let val_examples: Vec<TrainExample> = val_prepared.iter().map(|p| p.example.clone()).collect();

    let opts = TrainOptions {
        lr: config.lr,
        batch: config.batch,
        max_epochs: config.max_epochs,
        patience: config.patience,
        seed: config.seed,
        clip: config.clip,
        optimizer: if config.optimizer == "sgd" {
            Optimizer::Sgd {
                momentum: config.momentum,
            }
        } else {
            Optimizer::default()
        },
        no_facts: config.no_facts,
    };
    let history = train_model(
        &mut pipeline.model,
        &train_examples,
        &val_examples,
        &pipeline.dataset.verbalizer,
        &pipeline.vocab,
        &opts,
    )
    .map_err(|e| attribute("prompt-model training", e))?;

    let report = pipeline.evaluate_prepared(&test_prepared)?;
    Ok(Experiment {
        pipeline,
        report,
        history,
        retriever_history,
        split,
    })
}

/// Train the full pipeline on an explicit split.
pub fn run_with_split(
    dataset: &Dataset,
    lexicon: &Lexicon,
    config: &RunConfig,
    client: &dyn LlmClient,
    split: SplitIndices,
) -> Result<Experiment> {
    run_with_split_and_retriever(dataset, lexicon, config, client, split, None)
}

/// Split, train, evaluate.
pub fn run_experiment(
    dataset: &Dataset,
    lexicon: &Lexicon,
    config: &RunConfig,
    client: &dyn LlmClient,
) -> Result<Experiment> {
    let split = split_dataset(dataset, config.seed, config.val_fraction);
    run_with_split(dataset, lexicon, config, client, split)
}

/// The standard ablation table: full pipeline, keywords removed, fact vector
/// zeroed, both removed, and retrieval left untrained. Every row runs with
/// the same seed and split.
type AblationTweak = Box<dyn Fn(&mut RunConfig)>;

pub fn run_ablation(
    dataset: &Dataset,
    lexicon: &Lexicon,
    base: &RunConfig,
    client: &dyn LlmClient,
) -> Result<Vec<(String, Experiment)>> {
    let rows: Vec<(&str, AblationTweak)> = vec![
        ("full", Box::new(|_: &mut RunConfig| {})),
        ("no_snippets", Box::new(|c: &mut RunConfig| c.no_snippets = true)),
        ("no_facts", Box::new(|c: &mut RunConfig| c.no_facts = true)),
        (
            "no_snippets_no_facts",
            Box::new(|c: &mut RunConfig| {
                c.no_snippets = true;
                c.no_facts = true;
            }),
        ),
        (
            "no_contrastive",
            Box::new(|c: &mut RunConfig| c.no_contrastive = true),
        ),
    ];
    let mut out = Vec::with_capacity(rows.len());
    for (name, tweak) in rows {
        let mut config = base.clone();
        tweak(&mut config);
        let experiment = run_experiment(dataset, lexicon, &config, client)?;
        out.push((name.to_string(), experiment));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionRow {
    pub fraction: f64,
    pub macro_f1: f64,
    pub train_cases: usize,
}

/// Train at shrinking training-set fractions (stratified, seeded); the test
/// split stays fixed. Classes whose subsample becomes empty are dropped from
/// training with a warning.
pub fn data_fraction_sweep(
    dataset: &Dataset,
    lexicon: &Lexicon,
    fractions: &[f64],
    config: &RunConfig,
    client: &dyn LlmClient,
) -> Result<Vec<FractionRow>> {
    for f in fractions {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(Error::Usage(format!("fraction {f} outside (0, 1]")));
        }
    }
    let base_split = split_dataset(dataset, config.seed, config.val_fraction);
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        // group the train indices by charge and keep a prefix of each group
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_labels()];
        for &idx in &base_split.train {
            by_class[dataset.cases[idx].charge].push(idx);
        }
        let mut train = Vec::new();
        for (charge, group) in by_class.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let keep = ((group.len() as f64) * fraction).floor() as usize;
            if keep == 0 {
                eprintln!(
                    "warning: fraction {fraction} empties class {charge}; dropped from training"
                );
                continue;
            }
            train.extend(&group[..keep]);
        }
        let split = SplitIndices {
            train,
            val: base_split.val.clone(),
            test: base_split.test.clone(),
        };
        let train_cases = split.train.len();
        let experiment = run_with_split(dataset, lexicon, config, client, split)?;
        rows.push(FractionRow {
            fraction,
            macro_f1: experiment.report.macro_f1,
            train_cases,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub n_articles: usize,
    pub max_len: usize,
    pub mask_count: usize,
    pub macro_f1: f64,
}

/// Full Cartesian product over retrieved-statute count, truncation length,
/// and mask count.
pub fn hyperparam_sweep(
    dataset: &Dataset,
    lexicon: &Lexicon,
    n_values: &[usize],
    max_len_values: &[usize],
    mask_count_values: &[usize],
    config: &RunConfig,
    client: &dyn LlmClient,
) -> Result<Vec<GridRow>> {
    if n_values.is_empty() || max_len_values.is_empty() || mask_count_values.is_empty() {
        return Err(Error::Usage("hyperparameter grid must be non-empty".into()));
    }
    let mut rows = Vec::new();
    for &n in n_values {
        for &max_len in max_len_values {
            for &mask_count in mask_count_values {
                let mut cell = config.clone();
                cell.n_articles = n;
                cell.max_len = max_len;
                cell.mask_count = mask_count;
                let experiment = run_experiment(dataset, lexicon, &cell, client)?;
                rows.push(GridRow {
                    n_articles: n,
                    max_len,
                    mask_count,
                    macro_f1: experiment.report.macro_f1,
                });
            }
        }
    }
    Ok(rows)
}

/// Comma-separated output with a header row. Values never contain commas.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(f, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_corpus, ToyCorpusSpec};
    use crate::llm::MockExtractorClient;

    fn tiny_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.seed = 5;
        config.mask_count = 4;
        config.max_len = 48;
        config.max_fact_len = 24;
        config.dims.d_h = 16;
        config.dims.layers = 1;
        config.dims.heads = 2;
        config.dims.ff = 24;
        config.dims.cap = 160;
        config.retriever.dim = 12;
        config.retriever.epochs = 8;
        config.max_epochs = 4;
        config.patience = 10;
        config.lr = 0.02;
        config.templates.t1 = "charge:".into();
        config.templates.t2 = "keys:".into();
        config.val_fraction = 0.1;
        config
    }

    fn tiny_world() -> (Dataset, Lexicon, Vec<Vec<String>>) {
        let corpus = generate_toy_corpus(
            &ToyCorpusSpec {
                charges: 3,
                cases_per_charge: 6,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let lexicon = Lexicon::from_terms(corpus.lexicon.clone());
        (corpus.dataset, lexicon, corpus.cue_words)
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let (dataset, _, _) = tiny_world();
        let split = split_dataset(&dataset, 3, 0.1);
        let all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        let unique: HashSet<usize> = all.iter().copied().collect();
        assert_eq!(unique.len(), dataset.cases.len());
        assert_eq!(all.len(), dataset.cases.len());
        // 6 cases per charge -> 2 test each
        for charge in 0..3 {
            let test_count = split
                .test
                .iter()
                .filter(|&&i| dataset.cases[i].charge == charge)
                .count();
            assert_eq!(test_count, 2);
        }
        assert_eq!(split_dataset(&dataset, 3, 0.1), split);
    }

    #[test]
    fn experiment_runs_and_is_deterministic() {
        let (dataset, lexicon, _) = tiny_world();
        let config = tiny_config();
        let client = MockExtractorClient::new(lexicon.clone());
        let a = run_experiment(&dataset, &lexicon, &config, &client).unwrap();
        let b = run_experiment(&dataset, &lexicon, &config, &client).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.report, b.report);
        assert_eq!(a.pipeline.model, b.pipeline.model);
        assert_eq!(a.retriever_history, b.retriever_history);
    }

    #[test]
    fn prepared_artifacts_differ_only_in_designated_stage() {
        let (dataset, lexicon, _) = tiny_world();
        let client = MockExtractorClient::new(lexicon.clone());

        let config_full = tiny_config();
        let vocab = build_vocab(&dataset, 1, config_full.token_mode);
        let retriever = SentenceEncoder::init(vocab.len(), 12, 5);
        let model = PromptModel::init(&vocab, config_full.dims, 5).unwrap();

        let full = Pipeline::new(
            dataset.clone(),
            vocab.clone(),
            lexicon.clone(),
            retriever.clone(),
            model.clone(),
            config_full.clone(),
        );
        let mut config_nos = config_full.clone();
        config_nos.no_snippets = true;
        let nos = Pipeline::new(
            dataset.clone(),
            vocab,
            lexicon.clone(),
            retriever,
            model,
            config_nos,
        );

        let case = &dataset.cases[0];
        let a = full.prepare(&client, &case.text, case.charge).unwrap();
        let b = nos.prepare(&client, &case.text, case.charge).unwrap();
        // same retrieval, same facts, same matched snippets
        assert_eq!(a.retrieved, b.retrieved);
        assert_eq!(a.facts, b.facts);
        assert_eq!(
            a.snippets.iter().map(|s| &s.term).collect::<Vec<_>>(),
            b.snippets.iter().map(|s| &s.term).collect::<Vec<_>>()
        );
        // but the ablated layout drops the keyword segment
        assert_eq!(b.example.layout.snippet_len, 0);
        assert!(a.example.layout.snippet_len > 0);
        assert_eq!(
            a.example.layout.len() - a.example.layout.snippet_len,
            b.example.layout.len()
        );
    }

    #[test]
    fn explanation_lists_cue_snippet_and_facts() {
        let (dataset, lexicon, cue_words) = tiny_world();
        let config = tiny_config();
        let client = MockExtractorClient::new(lexicon.clone());
        let experiment = run_experiment(&dataset, &lexicon, &config, &client).unwrap();
        let case = &dataset.cases[0];
        let explanation = experiment
            .pipeline
            .predict_case(&client, &case.text, Some(&case.id))
            .unwrap();
        // the charge's primary cue is both a snippet and inside some fact
        let cue = &cue_words[case.charge][0];
        assert!(explanation.snippets.iter().any(|s| s == cue));
        assert!(explanation.facts.iter().any(|f| f.contains(cue.as_str())));
        assert!(!explanation.retrieved_articles.is_empty());
        let json = explanation.to_json_line();
        assert!(json.contains("predicted_label"));
        let text = explanation.render_text();
        assert!(text.contains("snippets"));
    }

    #[test]
    fn fraction_sweep_rows_and_reproducibility() {
        let (dataset, lexicon, _) = tiny_world();
        let mut config = tiny_config();
        config.max_epochs = 2;
        let client = MockExtractorClient::new(lexicon.clone());
        let rows =
            data_fraction_sweep(&dataset, &lexicon, &[0.5, 1.0], &config, &client).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].train_cases < rows[1].train_cases);
        let again =
            data_fraction_sweep(&dataset, &lexicon, &[0.5, 1.0], &config, &client).unwrap();
        assert_eq!(rows, again);
        // fraction 1.0 equals the plain run
        let plain = run_experiment(&dataset, &lexicon, &config, &client).unwrap();
        assert_eq!(rows[1].macro_f1, plain.report.macro_f1);
    }

    #[test]
    fn fraction_validation() {
        let (dataset, lexicon, _) = tiny_world();
        let config = tiny_config();
        let client = MockExtractorClient::new(lexicon.clone());
        assert!(data_fraction_sweep(&dataset, &lexicon, &[0.0], &config, &client).is_err());
        assert!(data_fraction_sweep(&dataset, &lexicon, &[1.5], &config, &client).is_err());
    }

    #[test]
    fn grid_sweep_covers_product() {
        let (dataset, lexicon, _) = tiny_world();
        let mut config = tiny_config();
        config.max_epochs = 1;
        let client = MockExtractorClient::new(lexicon.clone());
        let rows = hyperparam_sweep(
            &dataset,
            &lexicon,
            &[1, 2],
            &[32],
            &[2, 4],
            &config,
            &client,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let single = hyperparam_sweep(&dataset, &lexicon, &[2], &[32], &[2], &config, &client)
            .unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn full_grid_cardinality_with_zero_epoch_cells() {
        // 4 x 4 x 4 grid; training is switched off so only the product rule
        // and per-cell evaluation plumbing are exercised
        let (dataset, lexicon, _) = tiny_world();
        let mut config = tiny_config();
        config.max_epochs = 0;
        config.retriever.epochs = 0;
        config.templates.t1 = "x".into();
        config.templates.t2 = "y".into();
        let client = MockExtractorClient::new(lexicon.clone());
        let rows = hyperparam_sweep(
            &dataset,
            &lexicon,
            &[0, 1, 2, 3],
            &[8, 12, 16, 24],
            &[1, 2, 3, 4],
            &config,
            &client,
        )
        .unwrap();
        assert_eq!(rows.len(), 64);
        // every cell carries its own coordinates
        let mut seen = std::collections::HashSet::new();
        for row in &rows {
            assert!(seen.insert((row.n_articles, row.max_len, row.mask_count)));
        }
    }

    #[test]
    fn ablation_artifacts_differ_only_in_designated_stage() {
        let (dataset, lexicon, _) = tiny_world();
        let client = MockExtractorClient::new(lexicon.clone());
        let config_full = tiny_config();
        let vocab = build_vocab(&dataset, 1, config_full.token_mode);
        let retriever = SentenceEncoder::init(vocab.len(), 12, 5);
        let model = PromptModel::init(&vocab, config_full.dims, 5).unwrap();
        let build = |config: RunConfig, retriever: SentenceEncoder| {
            Pipeline::new(
                dataset.clone(),
                vocab.clone(),
                lexicon.clone(),
                retriever,
                model.clone(),
                config,
            )
        };

        let full = build(config_full.clone(), retriever.clone());
        let case = &dataset.cases[0];
        let base = full.prepare(&client, &case.text, case.charge).unwrap();

        // no_facts: preparation identical (u is zeroed at forward time only)
        let mut config_nof = config_full.clone();
        config_nof.no_facts = true;
        let nof = build(config_nof, retriever.clone());
        let p = nof.prepare(&client, &case.text, case.charge).unwrap();
        assert_eq!(p.example.layout, base.example.layout);
        assert_eq!(p.example.fact_ids, base.example.fact_ids);
        assert_eq!(p.facts, base.facts);
        assert_eq!(p.retrieved, base.retrieved);

        // no_contrastive differs only through the retriever: same matcher
        // output, same layout shape apart from retrieval-driven facts
        let other_retriever = SentenceEncoder::init(vocab.len(), 12, 99);
        let noc = build(config_full.clone(), other_retriever);
        let q = noc.prepare(&client, &case.text, case.charge).unwrap();
        assert_eq!(
            q.snippets.iter().map(|m| &m.term).collect::<Vec<_>>(),
            base.snippets.iter().map(|m| &m.term).collect::<Vec<_>>()
        );
        assert_eq!(q.example.layout.snippet_len, base.example.layout.snippet_len);
    }

    #[test]
    fn whitespace_mode_pipeline_end_to_end() {
        let corpus = generate_toy_corpus(
            &ToyCorpusSpec {
                charges: 2,
                cases_per_charge: 6,
                ..Default::default()
            },
            23,
        )
        .unwrap();
        let lexicon = Lexicon::from_terms(corpus.lexicon.clone());
        let client = MockExtractorClient::new(lexicon.clone());
        let mut config = tiny_config();
        config.token_mode = crate::corpus::TokenMode::Whitespace;
        config.snippet_separator = " ".into();
        config.fact_separator = " ".into();
        config.mask_count = 1; // labels are single words here
        config.max_len = 16;
        config.max_epochs = 3;
        let a = run_experiment(&corpus.dataset, &lexicon, &config, &client).unwrap();
        let b = run_experiment(&corpus.dataset, &lexicon, &config, &client).unwrap();
        assert_eq!(a.report, b.report);
        // the pipeline recomputed the verbalizer token sets at word level
        assert_eq!(a.pipeline.dataset.verbalizer.token_set(0).len(), 1);
        assert_eq!(corpus.dataset.verbalizer.token_set(0).len(), 3);
        let case = &corpus.dataset.cases[0];
        let explanation = a
            .pipeline
            .predict_case(&client, &case.text, Some(&case.id))
            .unwrap();
        assert!(!explanation.predicted_tokens.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let rows = vec![
            vec!["0.1".to_string(), "0.5".to_string()],
            vec!["1".to_string(), "0.9375".to_string()],
        ];
        write_csv(&path, &["fraction", "macro_f1"], &rows).unwrap();
        let (header, parsed) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["fraction", "macro_f1"]);
        assert_eq!(parsed, rows);
    }

    #[test]
    fn ablation_rows_present() {
        let (dataset, lexicon, _) = tiny_world();
        let mut config = tiny_config();
        config.max_epochs = 1;
        config.retriever.epochs = 2;
        let client = MockExtractorClient::new(lexicon.clone());
        let table = run_ablation(&dataset, &lexicon, &config, &client).unwrap();
        let names: Vec<&str> = table.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "full",
                "no_snippets",
                "no_facts",
                "no_snippets_no_facts",
                "no_contrastive"
            ]
        );
        // the no-contrastive row skipped retriever training
        let nc = &table[4].1;
        assert!(nc.retriever_history.is_empty());
        let full = &table[0].1;
        assert!(!full.retriever_history.is_empty());
    }
}
