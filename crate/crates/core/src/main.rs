//! Command-line interface.
//!
//! Subcommands: gen-data, train-retriever, train, predict, eval, ablate,
//! sweep-data, sweep-hparams, gradcheck. Exit codes: 0 success, 1 usage
//! error, 2 data error, 3 numeric failure.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use lexprompt::checkpoint::{
    load_checkpoint, model_from_checkpoint, model_to_checkpoint, retriever_from_checkpoint,
    retriever_to_checkpoint, save_checkpoint,
};
use lexprompt::config::RunConfig;
use lexprompt::corpus::{
    build_vocab, generate_toy_corpus, load_dataset, save_dataset, CuePlacement, Dataset,
    ToyCorpusSpec,
};
use lexprompt::error::{Error, Result};
use lexprompt::llm::{LlmClient, MockExtractorClient, RemoteHttpClient};
use lexprompt::matcher::{load_lexicon, Lexicon};
use lexprompt::pipeline::{
    data_fraction_sweep, hyperparam_sweep, read_csv, run_ablation,
    run_with_split_and_retriever, split_dataset, write_csv, Pipeline,
};
use lexprompt::retrieval::{build_pairs, train_joint_space, SentenceEncoder};

const USAGE: &str = "\
lexprompt — charge classification with knowledge-injected prompts

USAGE:
  lexprompt <command> [flags]

COMMANDS:
  gen-data        write a synthetic corpus (cases, statutes, verbalizer, lexicon)
  train-retriever contrastively train the statute retriever
  train           train the full pipeline and write checkpoints
  predict         predict one case and print the explanation
  eval            evaluate a trained pipeline on the held-out test split
  ablate          run the ablation table (full / -snippets / -facts / both / -contrastive)
  sweep-data      retrain at shrinking training fractions, write CSV
  sweep-hparams   grid over n-articles, max-len, mask-count, write CSV
  gradcheck       finite-difference checks for every parameter family

GLOBAL FLAGS:
  --config <path>      key = value settings file
  --seed <n>  --n-articles <n>  --mask-count <n>  --max-len <n>
  --no-snippets  --no-facts  --no-contrastive
  --llm-endpoint <url>   (or env LLM_ENDPOINT; default: deterministic mock)
  --out <dir>            output directory (default: out)

COMMAND FLAGS:
  gen-data:   --data <dir> (alias of --out), --preset basic|tail-cue|hidden-evidence,
              --charges <n>, --cases-per-charge <n>, --noise-rate <x>
  train:      --data <dir>, --retriever <ckpt, optional>
  predict:    --data <dir>, --model <ckpt>, --retriever <ckpt>,
              --case-id <id> | --text <case text>, --json
  eval:       predict flags, --explanations <file> (JSONL, one test case per line)
  eval/ablate/sweep-*: --data <dir>, model flags as for predict where needed
  sweep-data: --fractions 0.1,0.25,0.5,1.0
  sweep-hparams: --grid-n 2,4,6,8 --grid-max-len 64,128 --grid-mask-count 5,10,15,20
  gradcheck:  --samples <per-tensor coordinate count>
";

struct Args {
    command: String,
    values: HashMap<String, String>,
    switches: Vec<String>,
}

const SWITCHES: &[&str] = &["no-snippets", "no-facts", "no-contrastive", "json", "help"];

fn parse_args(argv: &[String]) -> Result<Args> {
    let mut command = None;
    let mut values = HashMap::new();
    let mut switches = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        if let Some(name) = arg.strip_prefix("--") {
            if SWITCHES.contains(&name) {
                switches.push(name.to_string());
            } else {
                let value = argv
                    .get(i + 1)
                    .ok_or_else(|| Error::Usage(format!("flag --{name} needs a value")))?;
                values.insert(name.to_string(), value.clone());
                i += 1;
            }
        } else if command.is_none() {
            command = Some(arg.clone());
        } else {
            return Err(Error::Usage(format!("unexpected argument {arg:?}")));
        }
        i += 1;
    }
    Ok(Args {
        command: command.unwrap_or_default(),
        values,
        switches,
    })
}

impl Args {
    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Usage(format!("missing required flag --{name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("out"))
    }
}

fn build_config(args: &Args) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = args.get("config") {
        config.load_file(Path::new(path))?;
    }
    for (flag, key) in [
        ("seed", "seed"),
        ("n-articles", "n_articles"),
        ("mask-count", "mask_count"),
        ("max-len", "max_len"),
        ("lr", "lr"),
        ("batch", "batch"),
        ("max-epochs", "max_epochs"),
        ("patience", "patience"),
        ("llm-endpoint", "llm_endpoint"),
    ] {
        if let Some(value) = args.get(flag) {
            config.set(key, value)?;
        }
    }
    if args.has("no-snippets") {
        config.no_snippets = true;
    }
    if args.has("no-facts") {
        config.no_facts = true;
    }
    if args.has("no-contrastive") {
        config.no_contrastive = true;
    }
    if config.llm_endpoint.is_none() {
        if let Ok(endpoint) = std::env::var("LLM_ENDPOINT") {
            if !endpoint.is_empty() {
                config.llm_endpoint = Some(endpoint);
            }
        }
    }
    config.validate()?;
    Ok(config)
}

fn data_dir(args: &Args) -> Result<PathBuf> {
    Ok(PathBuf::from(args.require("data")?))
}

fn load_data(dir: &Path, config: &RunConfig) -> Result<(Dataset, Lexicon)> {
    let dataset = load_dataset(
        &dir.join("cases.jsonl"),
        &dir.join("articles.jsonl"),
        &dir.join("verbalizer.jsonl"),
        config.token_mode,
    )?;
    let lexicon = load_lexicon(&dir.join("lexicon.txt"))?;
    Ok((dataset, lexicon))
}

fn make_client(config: &RunConfig, lexicon: &Lexicon) -> Box<dyn LlmClient> {
    match &config.llm_endpoint {
        Some(endpoint) => Box::new(RemoteHttpClient::new(
            endpoint.clone(),
            Duration::from_secs(config.llm_timeout_secs),
        )),
        None => Box::new(MockExtractorClient::new(lexicon.clone())),
    }
}

fn cmd_gen_data(args: &Args) -> Result<()> {
    let out = args
        .get("data")
        .map(PathBuf::from)
        .unwrap_or_else(|| args.out_dir());
    let seed: u64 = args.get("seed").unwrap_or("1").parse().map_err(|_| {
        Error::Usage("bad --seed".into())
    })?;

    let mut spec = match args.get("preset").unwrap_or("basic") {
        "basic" => ToyCorpusSpec::default(),
        "tail-cue" => ToyCorpusSpec {
            cue_placement: CuePlacement::Tail,
            sentences_per_case: 6,
            sentence_len: 16,
            ..Default::default()
        },
        "hidden-evidence" => ToyCorpusSpec {
            cue_placement: CuePlacement::Tail,
            shared_cues: true,
            hidden_evidence: true,
            sentences_per_case: 6,
            sentence_len: 16,
            ..Default::default()
        },
        other => return Err(Error::Usage(format!("unknown preset {other:?}"))),
    };
    let parse_usize = |name: &str, default: usize| -> Result<usize> {
        match args.get(name) {
            Some(v) => v.parse().map_err(|_| Error::Usage(format!("bad --{name}"))),
            None => Ok(default),
        }
    };
    spec.charges = parse_usize("charges", spec.charges)?;
    spec.cases_per_charge = parse_usize("cases-per-charge", spec.cases_per_charge)?;
    spec.cues_per_charge = parse_usize("cues-per-charge", spec.cues_per_charge)?;
    spec.cue_len = parse_usize("cue-len", spec.cue_len)?;
    spec.sentences_per_case = parse_usize("sentences", spec.sentences_per_case)?;
    spec.sentence_len = parse_usize("sentence-len", spec.sentence_len)?;
    if let Some(rate) = args.get("noise-rate") {
        spec.noise_rate = rate
            .parse()
            .map_err(|_| Error::Usage("bad --noise-rate".into()))?;
    }
    if let Some(alphabet) = args.get("filler") {
        spec.filler_alphabet = alphabet.to_string();
    }

    let corpus = generate_toy_corpus(&spec, seed)?;
    save_dataset(&corpus.dataset, &out)?;
    let lexicon_path = out.join("lexicon.txt");
    std::fs::write(&lexicon_path, corpus.lexicon.join("\n") + "\n")
        .map_err(|e| Error::io(&lexicon_path, e))?;
    println!(
        "wrote {} cases, {} statutes, {} labels, {} lexicon terms to {}",
        corpus.dataset.cases.len(),
        corpus.dataset.articles.len(),
        corpus.dataset.verbalizer.len(),
        corpus.lexicon.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_retriever(args: &Args) -> Result<()> {
    let config = build_config(args)?;
    let dir = data_dir(args)?;
    let (dataset, _) = load_data(&dir, &config)?;
    let vocab = build_vocab(&dataset, config.min_freq, config.token_mode);

    let split = split_dataset(&dataset, config.seed, config.val_fraction);
    let keep: std::collections::HashSet<usize> =
        split.train.iter().chain(&split.val).copied().collect();
    let mut pairs = build_pairs(&dataset, config.seed);
    pairs.pairs.retain(|p| keep.contains(&p.case_idx));

    let mut encoder = SentenceEncoder::init(vocab.len(), config.retriever.dim, config.seed);
    let history = train_joint_space(
        &mut encoder,
        &dataset,
        &vocab,
        &pairs,
        &config.retriever_config(),
    )?;

    let out = args.out_dir();
    let ckpt_path = out.join("retriever.ckpt");
    save_checkpoint(&retriever_to_checkpoint(&encoder, vocab.hash()), &ckpt_path)?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .enumerate()
        .map(|(epoch, loss)| vec![epoch.to_string(), format!("{loss:.6}")])
        .collect();
    write_csv(&out.join("retriever_history.csv"), &["epoch", "loss"], &rows)?;
    println!(
        "trained retriever on {} pairs for {} epochs; final loss {:.6}; wrote {}",
        pairs.len(),
        history.len(),
        history.last().copied().unwrap_or(0.0),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<()> {
    let config = build_config(args)?;
    let dir = data_dir(args)?;
    let (dataset, lexicon) = load_data(&dir, &config)?;
    let client = make_client(&config, &lexicon);

    let pretrained = match args.get("retriever") {
        Some(path) => {
            let vocab = build_vocab(&dataset, config.min_freq, config.token_mode);
            let ckpt = load_checkpoint(Path::new(path), Some(vocab.hash()))?;
            Some(retriever_from_checkpoint(ckpt)?)
        }
        None => None,
    };

    let split = split_dataset(&dataset, config.seed, config.val_fraction);
    let experiment =
        run_with_split_and_retriever(&dataset, &lexicon, &config, client.as_ref(), split, pretrained)?;

    let out = args.out_dir();
    save_checkpoint(
        &model_to_checkpoint(&experiment.pipeline.model),
        &out.join("model.ckpt"),
    )?;
    save_checkpoint(
        &retriever_to_checkpoint(
            &experiment.pipeline.retriever,
            experiment.pipeline.vocab.hash(),
        ),
        &out.join("retriever.ckpt"),
    )?;
    let rows: Vec<Vec<String>> = experiment
        .history
        .train_loss
        .iter()
        .zip(&experiment.history.val_f1)
        .enumerate()
        .map(|(epoch, (loss, f1))| {
            vec![epoch.to_string(), format!("{loss:.6}"), format!("{f1:.6}")]
        })
        .collect();
    write_csv(
        &out.join("history.csv"),
        &["epoch", "train_loss", "val_macro_f1"],
        &rows,
    )?;
    std::fs::write(
        out.join("eval.txt"),
        experiment.report.render_text(),
    )
    .map_err(|e| Error::io(&out.join("eval.txt"), e))?;
    println!(
        "trained {} epochs (best {}); test macro F1 {:.4}; artifacts in {}",
        experiment.history.train_loss.len(),
        experiment.history.best_epoch,
        experiment.report.macro_f1,
        out.display()
    );
    Ok(())
}

fn load_pipeline(args: &Args, config: &RunConfig) -> Result<(Pipeline, Box<dyn LlmClient>)> {
    let dir = data_dir(args)?;
    let (dataset, lexicon) = load_data(&dir, config)?;
    let vocab = build_vocab(&dataset, config.min_freq, config.token_mode);
    let client = make_client(config, &lexicon);

    let retriever = retriever_from_checkpoint(load_checkpoint(
        Path::new(args.require("retriever")?),
        Some(vocab.hash()),
    )?)?;
    let model = model_from_checkpoint(load_checkpoint(
        Path::new(args.require("model")?),
        Some(vocab.hash()),
    )?)?;
    Ok((
        Pipeline::new(dataset, vocab, lexicon, retriever, model, config.clone()),
        client,
    ))
}

fn cmd_predict(args: &Args) -> Result<()> {
    let config = build_config(args)?;
    let (pipeline, client) = load_pipeline(args, &config)?;

    let (text, id) = if let Some(case_id) = args.get("case-id") {
        let case = pipeline
            .dataset
            .cases
            .iter()
            .find(|c| c.id == case_id)
            .ok_or_else(|| Error::Data(format!("no case with id {case_id:?}")))?;
        (case.text.clone(), Some(case.id.clone()))
    } else if let Some(text) = args.get("text") {
        (text.to_string(), None)
    } else {
        return Err(Error::Usage("predict needs --case-id or --text".into()));
    };

    let explanation = pipeline.predict_case(client.as_ref(), &text, id.as_deref())?;
    if args.has("json") {
        println!("{}", explanation.to_json_line());
    } else {
        print!("{}", explanation.render_text());
    }
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<()> {
    let config = build_config(args)?;
    let (pipeline, client) = load_pipeline(args, &config)?;
    let split = split_dataset(&pipeline.dataset, config.seed, config.val_fraction);
    let report = pipeline.evaluate_indices(client.as_ref(), &split.test)?;
    print!("{}", report.render_text());
    if let Some(path) = args.get("explanations") {
        use std::io::Write;
        let path = Path::new(path);
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for &idx in &split.test {
            let case = &pipeline.dataset.cases[idx];
            let explanation =
                pipeline.predict_case(client.as_ref(), &case.text, Some(&case.id))?;
            writeln!(file, "{}", explanation.to_json_line()).map_err(|e| Error::io(path, e))?;
        }
        println!("wrote {} explanation records to {}", split.test.len(), path.display());
    }
    let out = args.out_dir();
    if args.get("out").is_some() {
        let path = out.join("report.json");
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Data(format!("serialize report: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(args: &Args) -> Result<()> {
    let config = build_config(args)?;
    let dir = data_dir(args)?;
    let (dataset, lexicon) = load_data(&dir, &config)?;
    let client = make_client(&config, &lexicon);

    let table = run_ablation(&dataset, &lexicon, &config, client.as_ref())?;
    println!("{:<22} {:>9} {:>9} {:>9}", "row", "P", "R", "F1");
    let mut rows = Vec::new();
    for (name, experiment) in &table {
        let r = &experiment.report;
        println!(
            "{:<22} {:>9.4} {:>9.4} {:>9.4}",
            name, r.macro_precision, r.macro_recall, r.macro_f1
        );
        rows.push(vec![
            name.clone(),
            format!("{:.6}", r.macro_precision),
            format!("{:.6}", r.macro_recall),
            format!("{:.6}", r.macro_f1),
        ]);
    }
    write_csv(
        &args.out_dir().join("ablation.csv"),
        &["row", "macro_p", "macro_r", "macro_f1"],
        &rows,
    )?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|piece| {
            piece
                .trim()
                .parse::<T>()
                .map_err(|_| Error::Usage(format!("bad {what} entry {piece:?}")))
        })
        .collect()
}

fn cmd_sweep_data(args: &Args) -> Result<()> {
    let config = build_config(args)?;
    let dir = data_dir(args)?;
    let (dataset, lexicon) = load_data(&dir, &config)?;
    let client = make_client(&config, &lexicon);
    let fractions: Vec<f64> =
        parse_list(args.get("fractions").unwrap_or("0.1,0.25,0.5,1.0"), "fraction")?;

    let rows = data_fraction_sweep(&dataset, &lexicon, &fractions, &config, client.as_ref())?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.fraction),
                r.train_cases.to_string(),
                format!("{:.6}", r.macro_f1),
            ]
        })
        .collect();
    let path = args.out_dir().join("data_fraction.csv");
    write_csv(&path, &["fraction", "train_cases", "macro_f1"], &csv_rows)?;
    for r in &rows {
        println!(
            "fraction {:<5} train {:<4} macro F1 {:.4}",
            r.fraction, r.train_cases, r.macro_f1
        );
    }
    println!("wrote {}", path.display());
    // parse-back check keeps the file honest
    let _ = read_csv(&path)?;
    Ok(())
}

fn cmd_sweep_hparams(args: &Args) -> Result<()> {
    let config = build_config(args)?;
    let dir = data_dir(args)?;
    let (dataset, lexicon) = load_data(&dir, &config)?;
    let client = make_client(&config, &lexicon);

    let ns: Vec<usize> = parse_list(args.get("grid-n").unwrap_or("2,4,6,8"), "grid-n")?;
    let max_lens: Vec<usize> =
        parse_list(args.get("grid-max-len").unwrap_or("64,128"), "grid-max-len")?;
    let mask_counts: Vec<usize> = parse_list(
        args.get("grid-mask-count").unwrap_or("5,10,15,20"),
        "grid-mask-count",
    )?;

    let rows = hyperparam_sweep(
        &dataset,
        &lexicon,
        &ns,
        &max_lens,
        &mask_counts,
        &config,
        client.as_ref(),
    )?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_articles.to_string(),
                r.max_len.to_string(),
                r.mask_count.to_string(),
                format!("{:.6}", r.macro_f1),
            ]
        })
        .collect();
    let path = args.out_dir().join("hparam_grid.csv");
    write_csv(
        &path,
        &["n_articles", "max_len", "mask_count", "macro_f1"],
        &csv_rows,
    )?;
    for r in &rows {
        println!(
            "n {:<3} max_len {:<5} masks {:<3} macro F1 {:.4}",
            r.n_articles, r.max_len, r.mask_count, r.macro_f1
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<()> {
    let seed: u64 = args
        .get("seed")
        .unwrap_or("7")
        .parse()
        .map_err(|_| Error::Usage("bad --seed".into()))?;
    let samples: usize = args
        .get("samples")
        .unwrap_or("8")
        .parse()
        .map_err(|_| Error::Usage("bad --samples".into()))?;
    let reports = lexprompt::gradcheck::run_all(seed, samples)?;
    for report in &reports {
        println!(
            "{:<20} {:>5} coordinates  max rel err {:.3e}  {}",
            report.family,
            report.checked,
            report.max_rel_err,
            if report.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}

fn run() -> Result<()> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = parse_args(&argv)?;
    if args.has("help") || args.command == "help" {
        print!("{USAGE}");
        return Ok(());
    }
    match args.command.as_str() {
        "gen-data" => cmd_gen_data(&args),
        "train-retriever" => cmd_train_retriever(&args),
        "train" => cmd_train(&args),
        "predict" => cmd_predict(&args),
        "eval" => cmd_eval(&args),
        "ablate" => cmd_ablate(&args),
        "sweep-data" => cmd_sweep_data(&args),
        "sweep-hparams" => cmd_sweep_hparams(&args),
        "gradcheck" => cmd_gradcheck(&args),
        "" => {
            eprint!("{USAGE}");
            Err(Error::Usage("no command given".into()))
        }
        other => Err(Error::Usage(format!("unknown command {other:?}"))),
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
