//! Run configuration and the key-value config file.
//!
//! Config files are plain `key = value` lines with `#` comments. CLI flags
//! override file values, which override the built-in defaults. The defaults
//! are sized for desk-scale corpora: the printed training settings
//! (lr 1e-5, batch 8, 50 epochs, 20 masks, 4 retrieved statutes) remain
//! selectable, but the tiny model wants a larger step size out of the box.

use std::path::Path;

use crate::corpus::TokenMode;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::prompt::HardTemplates;
use crate::retrieval::RetrieverConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Statutes retrieved per case (N).
    pub n_articles: usize,
    pub mask_count: usize,
    /// Case-token truncation length for the prompt.
    pub max_len: usize,
    pub max_fact_len: usize,
    pub dims: ModelDims,
    pub retriever: RetrieverConfig,
    pub no_snippets: bool,
    pub no_facts: bool,
    pub no_contrastive: bool,
    pub templates: HardTemplates,
    pub snippet_separator: String,
    pub fact_separator: String,
    pub max_prompt_chars: usize,
    /// Share of the training pool carved out for early stopping.
    pub val_fraction: f64,
    pub min_freq: u64,
    pub token_mode: TokenMode,
    pub clip: f64,
    /// "adam" (default) or "sgd".
    pub optimizer: String,
    /// Momentum for the sgd optimizer choice.
    pub momentum: f64,
    pub llm_endpoint: Option<String>,
    pub llm_timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            lr: 1e-2,
            batch: 8,
            max_epochs: 50,
            patience: 5,
            n_articles: 4,
            mask_count: 20,
            max_len: 256,
            max_fact_len: 64,
            dims: ModelDims::default(),
            retriever: RetrieverConfig::default(),
            no_snippets: false,
            no_facts: false,
            no_contrastive: false,
            templates: HardTemplates::default(),
            snippet_separator: ",".into(),
            fact_separator: ",".into(),
            max_prompt_chars: 100_000,
            val_fraction: 0.10,
            min_freq: 1,
            token_mode: TokenMode::Char,
            clip: 25.0,
            optimizer: "adam".into(),
            momentum: 0.9,
            llm_endpoint: None,
            llm_timeout_secs: 30,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_count == 0 {
            return Err(Error::Usage("mask_count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Usage("val_fraction must be in [0, 1)".into()));
        }
        if self.retriever.tau <= 0.0 {
            return Err(Error::Usage("tau must be positive".into()));
        }
        self.dims.validate()?;
        Ok(())
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Usage(format!("bad value for {what}: {value:?}"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key))?,
            "batch" => self.batch = value.parse().map_err(|_| bad(key))?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad(key))?,
            "patience" => self.patience = value.parse().map_err(|_| bad(key))?,
            "n_articles" => self.n_articles = value.parse().map_err(|_| bad(key))?,
            "mask_count" => self.mask_count = value.parse().map_err(|_| bad(key))?,
            "max_len" => self.max_len = value.parse().map_err(|_| bad(key))?,
            "max_fact_len" => self.max_fact_len = value.parse().map_err(|_| bad(key))?,
            "d_h" => self.dims.d_h = value.parse().map_err(|_| bad(key))?,
            "layers" => self.dims.layers = value.parse().map_err(|_| bad(key))?,
            "heads" => self.dims.heads = value.parse().map_err(|_| bad(key))?,
            "ff" => self.dims.ff = value.parse().map_err(|_| bad(key))?,
            "cap" => self.dims.cap = value.parse().map_err(|_| bad(key))?,
            "retriever_dim" => self.retriever.dim = value.parse().map_err(|_| bad(key))?,
            "tau" => self.retriever.tau = value.parse().map_err(|_| bad(key))?,
            "retriever_lr" => self.retriever.lr = value.parse().map_err(|_| bad(key))?,
            "retriever_epochs" => self.retriever.epochs = value.parse().map_err(|_| bad(key))?,
            "retriever_batch" => self.retriever.batch = value.parse().map_err(|_| bad(key))?,
            "no_snippets" => self.no_snippets = parse_bool(value).ok_or_else(|| bad(key))?,
            "no_facts" => self.no_facts = parse_bool(value).ok_or_else(|| bad(key))?,
            "no_contrastive" => self.no_contrastive = parse_bool(value).ok_or_else(|| bad(key))?,
            "t1" => self.templates.t1 = value.to_string(),
            "t2" => self.templates.t2 = value.to_string(),
            "snippet_separator" => self.snippet_separator = value.to_string(),
            "fact_separator" => self.fact_separator = value.to_string(),
            "max_prompt_chars" => self.max_prompt_chars = value.parse().map_err(|_| bad(key))?,
            "val_fraction" => self.val_fraction = value.parse().map_err(|_| bad(key))?,
            "min_freq" => self.min_freq = value.parse().map_err(|_| bad(key))?,
            "token_mode" => {
                self.token_mode = TokenMode::parse(value).ok_or_else(|| bad(key))?
            }
            "clip" => self.clip = value.parse().map_err(|_| bad(key))?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad(key))?,
            "optimizer" => match value {
                "adam" | "sgd" => self.optimizer = value.to_string(),
                _ => return Err(bad(key)),
            },
            "llm_endpoint" => self.llm_endpoint = Some(value.to_string()),
            "llm_timeout_secs" => self.llm_timeout_secs = value.parse().map_err(|_| bad(key))?,
            other => return Err(Error::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Merge assignments from a config file.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected key = value".into(),
            })?;
            // double quotes protect significant whitespace, e.g. a space
            // separator for whitespace-mode corpora
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// The retriever config with the run seed threaded through.
    pub fn retriever_config(&self) -> RetrieverConfig {
        RetrieverConfig {
            seed: self.seed,
            ..self.retriever.clone()
        }
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_overrides_then_flag_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# toy settings").unwrap();
        writeln!(f, "seed = 42").unwrap();
        writeln!(f, "mask_count=5").unwrap();
        writeln!(f, "no_snippets = true").unwrap();
        writeln!(f, "t1 = charge:").unwrap();
        drop(f);

        let mut config = RunConfig::default();
        config.load_file(&path).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.mask_count, 5);
        assert!(config.no_snippets);
        assert_eq!(config.templates.t1, "charge:");

        config.set("seed", "7").unwrap();
        assert_eq!(config.seed, 7);
    }

    #[test]
    fn quoted_values_keep_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.conf");
        std::fs::write(&path, "snippet_separator = \" \"\ntoken_mode = whitespace\n").unwrap();
        let mut config = RunConfig::default();
        config.load_file(&path).unwrap();
        assert_eq!(config.snippet_separator, " ");
        assert_eq!(config.token_mode, TokenMode::Whitespace);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let mut config = RunConfig::default();
        let err = config.set("turbo", "on").unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "seed = 1\nnot a line\n").unwrap();
        let err = RunConfig::default().load_file(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let mut config = RunConfig::default();
        assert!(config.set("mask_count", "many").is_err());
        config.set("mask_count", "0").unwrap();
        assert!(config.validate().is_err());
    }
}
