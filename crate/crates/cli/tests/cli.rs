//! End-to-end runs of the `edlab` binary on a miniature corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn edlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edlab"))
        .args(args)
        .current_dir(dir)
        .env("EDLAB_LOG", "warn")
        .output()
        .expect("spawn edlab")
}

fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = edlab(dir, args);
    assert!(
        out.status.success(),
        "edlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(dir: &Path, args: &[&str]) -> String {
    let out = edlab(dir, args);
    assert!(!out.status.success(), "edlab {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small corpus and model so every pipeline stage finishes in seconds.
const TINY: &str = r#"
seed = 3

[corpus]
languages = 2
relations = 2
subjects = 12
objects_per_relation = 3

[model]
hidden_size = 8
num_layers = 2
num_heads = 2
num_editable_layers = 1
ff_size = 16

[pretrain]
steps = 150
batch_size = 16
lr = 3e-3
log_interval = 100

[editor]
variant = "hypernet"
max_steps = 20
eval_interval = 10
patience = 100
num_updates = 2
num_retains = 2

[eval]
samples_per_edit = 4
dev_edits_per_language = 4
split = "dev"
"#;

struct Lab {
    _tmp: TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Lab {
    fn new(config_text: &str) -> Lab {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.toml");
        std::fs::write(&config, config_text).unwrap();
        Lab { _tmp: tmp, root, config }
    }

    fn args<'a>(&'a self, rest: &[&'a str]) -> Vec<String> {
        let mut v = vec!["--config".to_string(), self.config.display().to_string()];
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    }

    fn run(&self, subcommand: &str, rest: &[&str]) -> Output {
        let mut args = vec![subcommand.to_string()];
        args.extend(self.args(rest));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_ok(&self.root, &refs)
    }

    fn run_expect_err(&self, subcommand: &str, rest: &[&str]) -> String {
        let mut args = vec![subcommand.to_string()];
        args.extend(self.args(rest));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_err(&self.root, &refs)
    }

    fn gen_and_pretrain(&self) {
        self.run("gen-data", &["--out", "data"]);
        self.run("pretrain", &["--data", "data", "--out", "pre"]);
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(path)).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_guards_overwrites() {
    let lab = Lab::new(TINY);
    lab.run("gen-data", &["--out", "data"]);
    let first = (
        read(&lab.root.join("data/corpus.jsonl")),
        read(&lab.root.join("data/corpus.meta.json")),
    );

    let stderr = lab.run_expect_err("gen-data", &["--out", "data"]);
    assert!(stderr.contains("refusing to overwrite"), "{stderr}");
    assert!(stderr.contains("--force"), "{stderr}");

    lab.run("gen-data", &["--out", "data", "--force"]);
    let second = (
        read(&lab.root.join("data/corpus.jsonl")),
        read(&lab.root.join("data/corpus.meta.json")),
    );
    assert_eq!(first, second, "same seed must produce byte-identical files");

    // A different seed produces a different corpus.
    lab.run("gen-data", &["--out", "data2", "--seed", "4"]);
    assert_ne!(first.0, read(&lab.root.join("data2/corpus.jsonl")));
}

#[test]
fn config_typos_are_named_errors() {
    let lab = Lab::new(TINY);
    std::fs::write(lab.root.join("bad.toml"), "[corpus]\nsubects = 12\n").unwrap();
    let stderr = run_err(
        &lab.root,
        &["gen-data", "--config", "bad.toml", "--out", "data"],
    );
    assert!(stderr.contains("subects"), "{stderr}");
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let lab = Lab::new(TINY);
    std::fs::write(
        lab.root.join("bad.toml"),
        "[editor]\nvariant = \"mindreader\"\n",
    )
    .unwrap();
    lab.run("gen-data", &["--out", "data"]);
    let stderr = run_err(
        &lab.root,
        &[
            "train-editor", "--config", "bad.toml", "--data", "data", "--raw", "x.ckpt",
            "--out", "ed",
        ],
    );
    assert!(stderr.contains("mindreader"), "{stderr}");
    assert!(stderr.contains("hypernet-masked"), "{stderr}");
}

#[test]
fn pipeline_trains_evaluates_and_round_trips() {
    let lab = Lab::new(TINY);
    lab.gen_and_pretrain();

    let report = read_json(&lab.root.join("pre/pretrain_report.json"));
    assert_eq!(report["seed"], 3);
    assert!(report["run_config"]["corpus"]["subjects"].is_number());

    lab.run(
        "train-editor",
        &["--data", "data", "--raw", "pre/model.ckpt", "--out", "ed"],
    );
    let history = read_json(&lab.root.join("ed/history.json"));
    assert_eq!(history["history"].as_array().unwrap().len(), 20);
    assert_eq!(history["run_config"]["editor"]["variant"], "hypernet");

    lab.run(
        "evaluate",
        &[
            "--data", "data", "--raw", "pre/model.ckpt", "--editor", "ed/editor.ckpt",
            "--out", "report.json",
        ],
    );
    let doc = read_json(&lab.root.join("report.json"));
    assert_eq!(doc["variant"], "hypernet");
    assert_eq!(doc["seed"], 3);
    assert_eq!(doc["split"], "dev");
    assert!(doc["overall"]["succ"].is_f64());
    assert!(doc["mask_similarity"].is_null());
    assert_eq!(doc["run_config"]["model"]["hidden_size"], 8);

    // Same checkpoint, fresh process → byte-identical report.
    lab.run(
        "evaluate",
        &[
            "--data", "data", "--raw", "pre/model.ckpt", "--editor", "ed/editor.ckpt",
            "--out", "report2.json", "--workers", "2",
        ],
    );
    assert_eq!(
        read(&lab.root.join("report.json")),
        read(&lab.root.join("report2.json"))
    );

    // Retraining with the same seed reproduces the checkpoint bit for bit.
    lab.run(
        "train-editor",
        &["--data", "data", "--raw", "pre/model.ckpt", "--out", "ed2"],
    );
    assert_eq!(
        read(&lab.root.join("ed/editor.ckpt")),
        read(&lab.root.join("ed2/editor.ckpt"))
    );
}

#[test]
fn interrupted_training_resumes_bit_identically() {
    let lab = Lab::new(TINY);
    lab.gen_and_pretrain();

    // Straight run to 20 steps.
    lab.run(
        "train-editor",
        &["--data", "data", "--raw", "pre/model.ckpt", "--out", "full"],
    );

    // Interrupted run: stop at 10, then resume to 20 with the same config.
    let short = TINY.replace("max_steps = 20", "max_steps = 10");
    std::fs::write(lab.root.join("short.toml"), &short).unwrap();
    run_ok(
        &lab.root,
        &[
            "train-editor", "--config", "short.toml", "--data", "data", "--raw",
            "pre/model.ckpt", "--out", "part",
        ],
    );
    run_ok(
        &lab.root,
        &[
            "train-editor", "--config", "run.toml", "--data", "data", "--raw",
            "pre/model.ckpt", "--out", "part", "--resume",
        ],
    );
    assert_eq!(
        read(&lab.root.join("full/editor.ckpt")),
        read(&lab.root.join("part/editor.ckpt"))
    );

    // Resuming under different hyperparameters must be refused.
    let hot = TINY.replace("[eval]", "lr_editor = 0.5\n\n[eval]");
    std::fs::write(lab.root.join("hot.toml"), &hot).unwrap();
    let stderr = run_err(
        &lab.root,
        &[
            "train-editor", "--config", "hot.toml", "--data", "data", "--raw",
            "pre/model.ckpt", "--out", "part", "--resume",
        ],
    );
    assert!(stderr.contains("resume training config mismatch"), "{stderr}");
    assert!(stderr.contains("lr_editor"), "{stderr}");
}

#[test]
fn untrained_editor_keeps_every_retained_prediction() {
    let lab = Lab::new(TINY);
    lab.gen_and_pretrain();
    lab.run(
        "train-editor",
        &[
            "--data", "data", "--raw", "pre/model.ckpt", "--out", "init", "--init-only",
        ],
    );
    lab.run(
        "evaluate",
        &[
            "--data", "data", "--raw", "pre/model.ckpt", "--editor", "init/editor.ckpt",
            "--out", "init_report.json",
        ],
    );
    let doc = read_json(&lab.root.join("init_report.json"));
    assert_eq!(doc["overall"]["con"], 1.0);
}

#[test]
fn mismatched_checkpoints_are_diagnosed() {
    let lab = Lab::new(TINY);
    lab.gen_and_pretrain();
    let wide = TINY.replace("hidden_size = 8", "hidden_size = 16");
    std::fs::write(lab.root.join("wide.toml"), &wide).unwrap();
    let stderr = run_err(
        &lab.root,
        &[
            "train-editor", "--config", "wide.toml", "--data", "data", "--raw",
            "pre/model.ckpt", "--out", "ed",
        ],
    );
    assert!(stderr.contains("mismatch"), "{stderr}");
    assert!(stderr.contains("hidden_size"), "{stderr}");
    assert!(stderr.contains("16") && stderr.contains("8"), "{stderr}");

    // Dataset generated under a different corpus section is also refused.
    let more = TINY.replace("subjects = 12", "subjects = 14");
    std::fs::write(lab.root.join("more.toml"), &more).unwrap();
    let stderr = run_err(
        &lab.root,
        &[
            "pretrain", "--config", "more.toml", "--data", "data", "--out", "pre2",
        ],
    );
    assert!(stderr.contains("num_subjects"), "{stderr}");
}

#[test]
fn analyze_masks_requires_a_masked_editor() {
    let lab = Lab::new(TINY);
    lab.gen_and_pretrain();
    lab.run(
        "train-editor",
        &[
            "--data", "data", "--raw", "pre/model.ckpt", "--out", "plain", "--init-only",
        ],
    );
    let stderr = run_err(
        &lab.root,
        &["analyze-masks", "--editor", "plain/editor.ckpt", "--out", "sim.json"],
    );
    assert!(stderr.contains("no language masks"), "{stderr}");
}

#[test]
fn analyze_masks_emits_a_full_matrix_with_unit_diagonal() {
    // Four languages to get a 4×4 matrix.
    let four = TINY
        .replace("languages = 2", "languages = 4")
        .replace("variant = \"hypernet\"", "variant = \"hypernet-masked\"");
    let lab = Lab::new(&four);
    lab.gen_and_pretrain();
    lab.run(
        "train-editor",
        &["--data", "data", "--raw", "pre/model.ckpt", "--out", "ed"],
    );
    run_ok(
        &lab.root,
        &["analyze-masks", "--editor", "ed/editor.ckpt", "--out", "sim.json"],
    );
    let doc = read_json(&lab.root.join("sim.json"));
    assert_eq!(doc["num_languages"], 4);
    assert_eq!(doc["variant"], "hypernet-masked");
    let matrix = doc["matrix"].as_array().unwrap();
    assert_eq!(matrix.len(), 4);
    for (l, row) in matrix.iter().enumerate() {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), 4);
        let diag = row[l].as_f64().unwrap();
        assert!((diag - 1.0).abs() < 1e-9, "diagonal {l} = {diag}");
    }

    // The masked evaluate report carries the same matrix shape inline.
    lab.run(
        "evaluate",
        &[
            "--data", "data", "--raw", "pre/model.ckpt", "--editor", "ed/editor.ckpt",
            "--out", "report.json",
        ],
    );
    let doc = read_json(&lab.root.join("report.json"));
    assert_eq!(doc["mask_similarity"].as_array().unwrap().len(), 4);
    assert_eq!(doc["per_language"].as_array().unwrap().len(), 4);
}
