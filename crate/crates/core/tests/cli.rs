//! End-to-end checks of the command-line surface: the documented workflow,
//! file outputs, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lexprompt"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "seed = 5\nmask_count = 3\nmax_len = 24\nmax_fact_len = 16\n\
d_h = 16\nlayers = 1\nheads = 2\nff = 24\ncap = 120\n\
retriever_dim = 12\nretriever_epochs = 6\nmax_epochs = 3\npatience = 10\nlr = 0.01\n\
t1 = charge:\nt2 = keys:\n",
    )
    .unwrap();
    path
}

#[test]
fn documented_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root);

    // gen-data
    let out = run_ok(
        &[
            "gen-data",
            "--out",
            "data",
            "--seed",
            "5",
            "--charges",
            "3",
            "--cases-per-charge",
            "6",
        ],
        root,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("18 cases"));
    for file in [
        "cases.jsonl",
        "articles.jsonl",
        "verbalizer.jsonl",
        "lexicon.txt",
    ] {
        assert!(root.join("data").join(file).exists(), "missing {file}");
    }

    // train-retriever
    run_ok(
        &[
            "train-retriever",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--out",
            "artifacts",
        ],
        root,
    );
    assert!(root.join("artifacts/retriever.ckpt").exists());
    assert!(root.join("artifacts/retriever_history.csv").exists());

    // train, reusing the retriever checkpoint
    let out = run_ok(
        &[
            "train",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--retriever",
            "artifacts/retriever.ckpt",
            "--out",
            "artifacts",
        ],
        root,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("test macro F1"));
    assert!(root.join("artifacts/model.ckpt").exists());
    assert!(root.join("artifacts/history.csv").exists());
    assert!(root.join("artifacts/eval.txt").exists());

    // eval recomputes the same split from the seed
    let out = run_ok(
        &[
            "eval",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--model",
            "artifacts/model.ckpt",
            "--retriever",
            "artifacts/retriever.ckpt",
            "--explanations",
            "explanations.jsonl",
        ],
        root,
    );
    let eval_text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(eval_text.contains("macro"));
    // 3 charges x 6 cases, a third of each charge held out -> 6 records
    let jsonl = std::fs::read_to_string(root.join("explanations.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 6);
    for line in jsonl.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(record["case_id"].is_string());
        assert!(record["snippets"].is_array());
    }

    // predict one known case by id, text form then json form
    let out = run_ok(
        &[
            "predict",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--model",
            "artifacts/model.ckpt",
            "--retriever",
            "artifacts/retriever.ckpt",
            "--case-id",
            "case-0-0",
        ],
        root,
    );
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("prediction"));
    assert!(text.contains("snippets"));

    let out = run_ok(
        &[
            "predict",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--model",
            "artifacts/model.ckpt",
            "--retriever",
            "artifacts/retriever.ckpt",
            "--case-id",
            "case-0-0",
            "--json",
        ],
        root,
    );
    let line = String::from_utf8_lossy(&out.stdout).to_string();
    let parsed: serde_json::Value = serde_json::from_str(line.trim()).expect("json line");
    assert!(parsed["predicted_label"].is_number());
    assert!(parsed["retrieved_articles"].is_array());

    // ad-hoc text prediction
    let out = run_ok(
        &[
            "predict",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--model",
            "artifacts/model.ckpt",
            "--retriever",
            "artifacts/retriever.ckpt",
            "--text",
            "some fresh case description.",
        ],
        root,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("prediction"));
}

#[test]
fn sweeps_and_gradcheck_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root);
    run_ok(
        &[
            "gen-data",
            "--out",
            "data",
            "--seed",
            "5",
            "--charges",
            "3",
            "--cases-per-charge",
            "6",
        ],
        root,
    );

    let out = run_ok(
        &[
            "sweep-data",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--fractions",
            "0.5,1.0",
            "--out",
            "sweeps",
        ],
        root,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("fraction"));
    let csv = std::fs::read_to_string(root.join("sweeps/data_fraction.csv")).unwrap();
    assert!(csv.starts_with("fraction,train_cases,macro_f1"));
    assert_eq!(csv.lines().count(), 3);

    let out = run_ok(
        &[
            "sweep-hparams",
            "--config",
            "run.conf",
            "--data",
            "data",
            "--grid-n",
            "1,2",
            "--grid-max-len",
            "24",
            "--grid-mask-count",
            "3",
            "--out",
            "sweeps",
        ],
        root,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("macro F1"));
    let csv = std::fs::read_to_string(root.join("sweeps/hparam_grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3); // header + 2 cells

    let out = run_ok(&["gradcheck", "--samples", "3"], root);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("retriever encoder"));
    assert!(text.contains("ok"));
}

#[test]
fn ablate_prints_all_rows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root);
    run_ok(
        &[
            "gen-data",
            "--out",
            "data",
            "--seed",
            "5",
            "--charges",
            "3",
            "--cases-per-charge",
            "6",
        ],
        root,
    );
    let out = run_ok(
        &["ablate", "--config", "run.conf", "--data", "data", "--out", "ablation"],
        root,
    );
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for row in [
        "full",
        "no_snippets",
        "no_facts",
        "no_snippets_no_facts",
        "no_contrastive",
    ] {
        assert!(text.contains(row), "missing ablation row {row}");
    }
    let csv = std::fs::read_to_string(root.join("ablation/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // usage errors: unknown command, missing flag value, unknown flag key
    let out = bin().arg("frobnicate").current_dir(root).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin()
        .args(["predict", "--data"])
        .current_dir(root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin()
        .args(["train", "--config", "missing.conf", "--data", "x"])
        .current_dir(root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "missing config file is a data error");

    // data error: train pointed at a directory with no corpus
    write_config(root);
    let out = bin()
        .args(["train", "--config", "run.conf", "--data", "nowhere"])
        .current_dir(root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // gen-data rejects a bad preset as usage
    let out = bin()
        .args(["gen-data", "--preset", "bogus", "--out", "d"])
        .current_dir(root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // help goes to stdout and succeeds
    let out = bin().arg("--help").current_dir(root).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("USAGE"));

    // no command: usage text and exit 1
    let out = bin().current_dir(root).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn remote_endpoint_flag_routes_the_consultation() {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root);
    run_ok(
        &[
            "gen-data", "--out", "data", "--seed", "5", "--charges", "3",
            "--cases-per-charge", "6",
        ],
        root,
    );
    run_ok(
        &[
            "train-retriever", "--config", "run.conf", "--data", "data", "--out", "artifacts",
        ],
        root,
    );
    run_ok(
        &[
            "train", "--config", "run.conf", "--data", "data", "--retriever",
            "artifacts/retriever.ckpt", "--out", "artifacts",
        ],
        root,
    );

    // one-shot server standing in for a conversational model
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end().to_string();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap();
            }
            if line.is_empty() {
                break;
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body).unwrap();
        let request: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(request["messages"].as_array().unwrap().len(), 3);
        let reply =
            serde_json::json!({"content": "[remote fact alpha\nremote fact beta]"}).to_string();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            reply.len(),
            reply
        )
        .unwrap();
    });

    let out = run_ok(
        &[
            "predict", "--config", "run.conf", "--data", "data", "--model",
            "artifacts/model.ckpt", "--retriever", "artifacts/retriever.ckpt",
            "--case-id", "case-0-0", "--json",
            "--llm-endpoint", &format!("http://{addr}/extract"),
        ],
        root,
    );
    handle.join().unwrap();
    let record: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    let facts: Vec<&str> = record["facts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_str().unwrap())
        .collect();
    assert_eq!(facts, vec!["remote fact alpha", "remote fact beta"]);
}

#[test]
fn checkpoint_vocab_guard_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root);
    run_ok(
        &[
            "gen-data", "--out", "data", "--seed", "5", "--charges", "3",
            "--cases-per-charge", "6",
        ],
        root,
    );
    run_ok(
        &[
            "train-retriever", "--config", "run.conf", "--data", "data", "--out", "artifacts",
        ],
        root,
    );
    // different corpus -> different vocabulary -> checkpoint refused
    run_ok(
        &[
            "gen-data", "--out", "data2", "--seed", "9", "--charges", "4",
            "--cases-per-charge", "6",
        ],
        root,
    );
    let out = bin()
        .args([
            "train", "--config", "run.conf", "--data", "data2", "--retriever",
            "artifacts/retriever.ckpt", "--out", "artifacts2",
        ])
        .current_dir(root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab hash mismatch"));
}
