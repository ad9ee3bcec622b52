//! Dataset records, file loading, and the deterministic toy-corpus generator.
//!
//! File formats (all line-delimited):
//!   cases       {"id": "...", "fact": "...", "charge": 0, "articles": [1, 2]}
//!   articles    {"id": 1, "text": "..."}
//!   verbalizer  {"label": 0, "text": "..."}
//!   lexicon     one term per line, optional TAB + frequency column

mod toy;
mod vocab;

pub use toy::{generate_toy_corpus, CuePlacement, ToyCorpus, ToyCorpusSpec};
pub use vocab::{build_vocab, detokenize, tokenize, TokenMode, Vocab, MASK_ID, PAD_ID, UNK_ID};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One case record: description text, gold charge, annotated relevant articles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    #[serde(rename = "fact")]
    pub text: String,
    pub charge: usize,
    pub articles: Vec<u32>,
}

/// One statute from the candidate pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Article {
    pub id: u32,
    pub text: String,
}

/// Label-id to label-text mapping plus the per-label token sets used by the
/// Jaccard mapper.
#[derive(Debug, Clone)]
pub struct Verbalizer {
    texts: Vec<String>,
    token_sets: Vec<BTreeSet<String>>,
    mode: TokenMode,
}

impl Verbalizer {
    /// Entries must carry dense label ids 0..C-1 with distinct texts.
    pub fn new(mut entries: Vec<(usize, String)>, mode: TokenMode) -> Result<Self> {
        entries.sort_by_key(|(id, _)| *id);
        for (want, (id, text)) in entries.iter().enumerate() {
            if *id != want {
                return Err(Error::Data(format!(
                    "verbalizer label ids must be dense 0..C-1; missing or duplicate id {want} (saw {id})"
                )));
            }
            if text.is_empty() {
                return Err(Error::Data(format!("verbalizer label {id} has empty text")));
            }
        }
        let mut seen = HashSet::new();
        for (_, text) in &entries {
            if !seen.insert(text.clone()) {
                return Err(Error::Data(format!("duplicate verbalizer text {text:?}")));
            }
        }
        let texts: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        let token_sets = texts.iter().map(|t| mode.token_set(t)).collect();
        Ok(Verbalizer {
            texts,
            token_sets,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, label: usize) -> &str {
        &self.texts[label]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn token_set(&self, label: usize) -> &BTreeSet<String> {
        &self.token_sets[label]
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    /// Same label texts with the token sets recomputed under another mode.
    pub fn with_mode(&self, mode: TokenMode) -> Verbalizer {
        if mode == self.mode {
            return self.clone();
        }
        let token_sets = self.texts.iter().map(|t| mode.token_set(t)).collect();
        Verbalizer {
            texts: self.texts.clone(),
            token_sets,
            mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<Case>,
    pub articles: Vec<Article>,
    pub verbalizer: Verbalizer,
}

impl Dataset {
    /// Validate referential integrity: unique article ids, non-empty texts,
    /// every case charge in the verbalizer, every referenced article loaded.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for article in &self.articles {
            if article.text.is_empty() {
                return Err(Error::Data(format!("article {} has empty text", article.id)));
            }
            if !ids.insert(article.id) {
                return Err(Error::Data(format!("duplicate article id {}", article.id)));
            }
        }
        for case in &self.cases {
            if case.text.is_empty() {
                return Err(Error::Data(format!("case {} has empty text", case.id)));
            }
            if case.charge >= self.verbalizer.len() {
                return Err(Error::Data(format!(
                    "case {} references unknown label {}",
                    case.id, case.charge
                )));
            }
            for a in &case.articles {
                if !ids.contains(a) {
                    return Err(Error::Data(format!(
                        "case {} references dangling article id {}",
                        case.id, a
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn article_by_id(&self, id: u32) -> Option<&Article> {
        self.articles.iter().find(|a| a.id == id)
    }

    pub fn num_labels(&self) -> usize {
        self.verbalizer.len()
    }
}

#[derive(Deserialize)]
struct VerbalizerLine {
    label: usize,
    text: String,
}

fn read_lines<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>>
where
    F: FnMut(&str) -> std::result::Result<T, String>,
{
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        out.push(parse(trimmed).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        })?);
    }
    Ok(out)
}

/// Load and validate a dataset from its three record files.
pub fn load_dataset(
    cases_path: &Path,
    articles_path: &Path,
    verbalizer_path: &Path,
    mode: TokenMode,
) -> Result<Dataset> {
    let cases: Vec<Case> = read_lines(cases_path, |l| {
        serde_json::from_str(l).map_err(|e| e.to_string())
    })?;
    let articles: Vec<Article> = read_lines(articles_path, |l| {
        serde_json::from_str(l).map_err(|e| e.to_string())
    })?;
    let entries: Vec<VerbalizerLine> = read_lines(verbalizer_path, |l| {
        serde_json::from_str(l).map_err(|e| e.to_string())
    })?;
    let verbalizer = Verbalizer::new(
        entries.into_iter().map(|v| (v.label, v.text)).collect(),
        mode,
    )?;
    let dataset = Dataset {
        cases,
        articles,
        verbalizer,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Write a dataset back out in the loadable record formats.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, lines: Vec<String>| -> Result<()> {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for line in lines {
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    write(
        "cases.jsonl",
        dataset
            .cases
            .iter()
            .map(|c| serde_json::to_string(c).expect("serialize case"))
            .collect(),
    )?;
    write(
        "articles.jsonl",
        dataset
            .articles
            .iter()
            .map(|a| serde_json::to_string(a).expect("serialize article"))
            .collect(),
    )?;
    write(
        "verbalizer.jsonl",
        dataset
            .verbalizer
            .texts()
            .iter()
            .enumerate()
            .map(|(label, text)| {
                serde_json::to_string(&serde_json::json!({"label": label, "text": text}))
                    .expect("serialize verbalizer")
            })
            .collect(),
    )?;
    Ok(())
}

/// Character frequencies over every text field, used by vocab construction.
pub(crate) fn corpus_token_counts(dataset: &Dataset, mode: TokenMode) -> HashMap<String, u64> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut bump = |text: &str| {
        for tok in mode.split(text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    };
    for case in &dataset.cases {
        bump(&case.text);
    }
    for article in &dataset.articles {
        bump(&article.text);
    }
    for text in dataset.verbalizer.texts() {
        bump(text);
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn three_case_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
        let cases = write_file(
            dir,
            "cases.jsonl",
            concat!(
                r#"{"id": "c1", "fact": "stole a phone", "charge": 0, "articles": [10]}"#,
                "\n",
                r#"{"id": "c2", "fact": "hit the victim", "charge": 1, "articles": [11]}"#,
                "\n",
                r#"{"id": "c3", "fact": "stole a bike", "charge": 0, "articles": [10, 11]}"#,
                "\n",
            ),
        );
        let articles = write_file(
            dir,
            "articles.jsonl",
            concat!(
                r#"{"id": 10, "text": "theft of property"}"#,
                "\n",
                r#"{"id": 11, "text": "assault on a person"}"#,
                "\n",
            ),
        );
        let verbalizer = write_file(
            dir,
            "verbalizer.jsonl",
            concat!(
                r#"{"label": 0, "text": "theft"}"#,
                "\n",
                r#"{"label": 1, "text": "assault"}"#,
                "\n",
            ),
        );
        (cases, articles, verbalizer)
    }

    #[test]
    fn loads_three_case_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (c, a, v) = three_case_fixture(dir.path());
        let ds = load_dataset(&c, &a, &v, TokenMode::Whitespace).unwrap();
        assert_eq!(ds.cases.len(), 3);
        assert_eq!(ds.articles.len(), 2);
        assert_eq!(ds.verbalizer.len(), 2);
        assert_eq!(ds.cases[2].articles, vec![10, 11]);
    }

    #[test]
    fn empty_cases_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let (_, a, v) = three_case_fixture(dir.path());
        let c = write_file(dir.path(), "empty.jsonl", "");
        let ds = load_dataset(&c, &a, &v, TokenMode::Char).unwrap();
        assert_eq!(ds.cases.len(), 0);
    }

    #[test]
    fn dangling_article_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (_, a, v) = three_case_fixture(dir.path());
        let c = write_file(
            dir.path(),
            "bad_cases.jsonl",
            r#"{"id": "c1", "fact": "x", "charge": 0, "articles": [999]}"#,
        );
        let err = load_dataset(&c, &a, &v, TokenMode::Char).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err:?}");
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (_, a, v) = three_case_fixture(dir.path());
        let c = write_file(
            dir.path(),
            "malformed.jsonl",
            "{\"id\": \"c1\", \"fact\": \"x\", \"charge\": 0, \"articles\": []}\nnot json\n",
        );
        let err = load_dataset(&c, &a, &v, TokenMode::Char).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (_, a, v) = three_case_fixture(dir.path());
        let c = write_file(
            dir.path(),
            "bad_label.jsonl",
            r#"{"id": "c1", "fact": "x", "charge": 7, "articles": [10]}"#,
        );
        let err = load_dataset(&c, &a, &v, TokenMode::Char).unwrap_err();
        assert!(err.to_string().contains("unknown label"));
    }

    #[test]
    fn verbalizer_requires_dense_ids() {
        let err = Verbalizer::new(
            vec![(0, "a".into()), (2, "b".into())],
            TokenMode::Char,
        )
        .unwrap_err();
        assert!(err.to_string().contains("dense"));
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (c, a, v) = three_case_fixture(dir.path());
        let ds = load_dataset(&c, &a, &v, TokenMode::Whitespace).unwrap();
        let out = dir.path().join("resaved");
        save_dataset(&ds, &out).unwrap();
        let ds2 = load_dataset(
            &out.join("cases.jsonl"),
            &out.join("articles.jsonl"),
            &out.join("verbalizer.jsonl"),
            TokenMode::Whitespace,
        )
        .unwrap();
        assert_eq!(ds2.cases.len(), ds.cases.len());
        assert_eq!(ds2.cases[0].text, ds.cases[0].text);
        assert_eq!(ds2.verbalizer.texts(), ds.verbalizer.texts());
    }
}
