//! `edlab`: drives the editing laboratory end to end.
//!
//! Pipeline: `gen-data` → `pretrain` → `train-editor` → `evaluate` /
//! `analyze-masks`. Every artifact embeds the seed and config that produced
//! it, so any file on disk can be regenerated from its own metadata.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use edlab_core::checkpoint;
use edlab_core::corpus::{generate_corpus, split, CorpusConfig, EditPool, SplitCorpus};
use edlab_core::editors::{EditStrategy, Editor, EditorVariant, FinetuneEditor};
use edlab_core::evaluation::{macro_average_eval, mask_similarity_matrix, metrics_report};
use edlab_core::model::{ModelConfig, ParameterSet};
use edlab_core::corpus::LanguageMode;
use edlab_core::training::{
    load_train_state, pretrain_raw_model, save_train_state, train_editor, TrainingError,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "edlab", version, about = "Cross-lingual model-editing laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parallel corpus and its split assignment.
    GenData(GenDataArgs),
    /// Train the raw multilingual classifier on the generated corpus.
    Pretrain(PretrainArgs),
    /// Meta-train an editor against a pretrained raw model.
    TrainEditor(TrainEditorArgs),
    /// Score an editor (or the finetune baseline) with the macro protocol.
    Evaluate(EvaluateArgs),
    /// Emit the per-language gate similarity matrix of a masked editor.
    AnalyzeMasks(AnalyzeMasksArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory for corpus.jsonl / corpus.meta.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and pretrain_report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEditorArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    /// Raw-model checkpoint from pretrain.
    #[arg(long)]
    raw: PathBuf,
    /// Output directory for editor.ckpt, history.json, train_state.ckpt.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this run's train_state.ckpt.
    #[arg(long, conflicts_with = "init_only")]
    resume: bool,
    /// Write the freshly initialized editor without training (control runs).
    #[arg(long)]
    init_only: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    raw: PathBuf,
    /// Editor checkpoint; omit for the finetune baseline.
    #[arg(long)]
    editor: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for evaluation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct AnalyzeMasksArgs {
    /// Editor checkpoint of a masked variant.
    #[arg(long)]
    editor: PathBuf,
    /// Similarity file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Overrides the fraction recorded in the checkpoint's config.
    #[arg(long)]
    top_fraction: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDLAB_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::TrainEditor(a) => cmd_train_editor(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::AnalyzeMasks(a) => cmd_analyze_masks(a),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    for file in ["corpus.jsonl", "corpus.meta.json"] {
        ensure_writable(&args.out.join(file), args.common.force)?;
    }
    let corpus = generate_corpus(seed, &cfg.corpus_config())?;
    let sp = split(corpus, seed)?;
    std::fs::create_dir_all(&args.out)?;
    sp.save(&args.out)?;
    for s in [
        edlab_core::corpus::Split::Train,
        edlab_core::corpus::Split::Dev,
        edlab_core::corpus::Split::Test,
    ] {
        log::info!("{s:?}: {} examples", sp.examples_in(s).len());
    }
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let sp = load_dataset(&args.data, &cfg)?;
    let mcfg = cfg.model_config();
    let ckpt_path = args.out.join("model.ckpt");
    let report_path = args.out.join("pretrain_report.json");
    ensure_writable(&ckpt_path, args.common.force)?;
    ensure_writable(&report_path, args.common.force)?;

    let (params, report) = pretrain_raw_model(&mcfg, &sp, &cfg.pretrain_config(seed))?;
    log::info!(
        "pretrained: train acc {:.4}, dev acc {:.4}",
        report.train_accuracy,
        report.dev_accuracy
    );

    std::fs::create_dir_all(&args.out)?;
    let meta = serde_json::json!({
        "kind": "raw-model",
        "seed": seed,
        "model_config": mcfg,
        "corpus_config": cfg.corpus_config(),
        "run_config": cfg,
        "report": report,
    });
    checkpoint::save(&ckpt_path, &meta, params.tensors())?;
    write_json(
        &report_path,
        &serde_json::json!({ "seed": seed, "run_config": cfg, "report": report }),
    )
}

fn cmd_train_editor(args: TrainEditorArgs) -> Result<()> {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let variant = cfg.variant()?;
    if variant == EditorVariant::Finetune {
        bail!("the finetune baseline has no training stage; run evaluate with editor.variant = \"finetune\"");
    }
    let sp = load_dataset(&args.data, &cfg)?;
    let ccfg = sp.corpus.config;
    let (raw, mcfg) = load_raw_model(&args.raw, &cfg)?;

    let editor_path = args.out.join("editor.ckpt");
    let history_path = args.out.join("history.json");
    let state_path = args.out.join("train_state.ckpt");
    std::fs::create_dir_all(&args.out)?;

    let editor_meta = |best_step: usize, best_dev_succ: f64, trained_steps: usize| {
        serde_json::json!({
            "kind": "editor",
            "seed": seed,
            "variant": variant,
            "model_config": mcfg,
            "corpus_config": ccfg,
            "run_config": cfg,
            "best_step": best_step,
            "best_dev_succ": best_dev_succ,
            "trained_steps": trained_steps,
        })
    };

    if args.init_only {
        ensure_writable(&editor_path, args.common.force)?;
        let editor = Editor::new(variant, &mcfg, seed)?;
        checkpoint::save(&editor_path, &editor_meta(0, f64::NAN, 0), editor.params())?;
        log::info!("wrote untrained {variant} editor to {}", editor_path.display());
        return Ok(());
    }

    let tcfg = cfg.editor_train_config(seed)?;
    let resume_state = if args.resume {
        let (ck_mcfg, ck_variant, mut ck_tcfg, state) = load_train_state(&state_path)
            .with_context(|| format!("loading {}", state_path.display()))?;
        ensure_match(&mcfg, &ck_mcfg, "resume model config")?;
        ensure_match(&variant, &ck_variant, "resume editor variant")?;
        // Raising max_steps is how an interrupted run is completed; all other
        // knobs shape the step-by-step trajectory and must match exactly.
        ck_tcfg.max_steps = tcfg.max_steps;
        ensure_match(&tcfg, &ck_tcfg, "resume training config")?;
        log::info!("resuming from step {}", state.step);
        Some(state)
    } else {
        for p in [&editor_path, &history_path, &state_path] {
            ensure_writable(p, args.common.force)?;
        }
        None
    };

    let train_refs = sp.examples_in(edlab_core::corpus::Split::Train);
    let pool = EditPool::new(&ccfg, &train_refs)?;
    let mut dev_refs = sp.examples_in(edlab_core::corpus::Split::Dev);
    // A monolingual run never sees the other languages, so model selection
    // can't peek at them either.
    if let LanguageMode::Monolingual(l) = tcfg.language_mode {
        dev_refs.retain(|e| e.language == l);
    }
    let dev_opts = cfg.dev_eval_options(seed);
    let mut eval_fn = |editor: &Editor| {
        macro_average_eval(&ccfg, &mcfg, &raw, editor, &dev_refs, &dev_opts)
            .map(|r| r.succ)
            .map_err(|e| TrainingError::Config(format!("dev evaluation failed: {e}")))
    };
    let mut on_ckpt =
        |state: &edlab_core::training::TrainState| save_train_state(&state_path, &mcfg, variant, &tcfg, state);

    let outcome = train_editor(
        &mcfg,
        &raw,
        variant,
        &pool,
        &tcfg,
        resume_state.as_ref(),
        &mut eval_fn,
        Some(&mut on_ckpt),
    )?;
    save_train_state(&state_path, &mcfg, variant, &tcfg, &outcome.state)?;
    checkpoint::save(
        &editor_path,
        &editor_meta(outcome.best_step, outcome.best_dev_succ, outcome.state.step),
        outcome.best_editor.params(),
    )?;
    write_json(
        &history_path,
        &serde_json::json!({
            "seed": seed,
            "run_config": cfg,
            "variant": variant,
            "best_step": outcome.best_step,
            "best_dev_succ": outcome.best_dev_succ,
            "steps_run": outcome.steps_run,
            "history": outcome.history,
        }),
    )?;
    log::info!(
        "best dev succ {:.4} at step {}; artifacts in {}",
        outcome.best_dev_succ,
        outcome.best_step,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.seed);
    let sp = load_dataset(&args.data, &cfg)?;
    let ccfg = sp.corpus.config;
    let (raw, mcfg) = load_raw_model(&args.raw, &cfg)?;
    ensure_writable(&args.out, args.common.force)?;

    let config_variant = cfg.variant()?;
    let (strategy, variant, mask_sim): (Box<dyn EditStrategy + Sync>, _, _) = match &args.editor {
        Some(path) => {
            let (editor, ck_variant) = load_editor(path, &mcfg)?;
            if ck_variant != config_variant {
                bail!(
                    "config names editor.variant = \"{config_variant}\" but {} holds a {ck_variant} editor",
                    path.display()
                );
            }
            let sim = if ck_variant.is_masked() {
                Some(mask_similarity_matrix(&editor, cfg.eval.top_fraction)?)
            } else {
                None
            };
            (Box::new(editor), ck_variant, sim)
        }
        None => {
            if config_variant != EditorVariant::Finetune {
                bail!("--editor is required for variant {config_variant}; only the finetune baseline runs without a checkpoint");
            }
            let ft = FinetuneEditor {
                max_steps: cfg.editor.finetune_steps,
                lr: cfg.editor.finetune_lr,
            };
            (Box::new(ft), EditorVariant::Finetune, None)
        }
    };

    let examples = sp.examples_in(cfg.eval_split()?);
    let opts = cfg.eval_options(seed, args.workers);
    let record = macro_average_eval(&ccfg, &mcfg, &raw, &*strategy, &examples, &opts)?;
    println!(
        "{variant} on {}: acc {:.4} con {:.4} succ {:.4}",
        cfg.eval.split, record.acc, record.con, record.succ
    );

    let mut doc = metrics_report(
        &variant.to_string(),
        &cfg.language_mode()?,
        seed,
        &record,
        mask_sim.as_deref(),
    );
    doc["split"] = serde_json::json!(cfg.eval.split);
    doc["run_config"] = serde_json::to_value(&cfg)?;
    write_json(&args.out, &doc)
}

fn cmd_analyze_masks(args: AnalyzeMasksArgs) -> Result<()> {
    let (meta, tensors) = checkpoint::load(&args.editor)
        .with_context(|| format!("loading {}", args.editor.display()))?;
    expect_kind(&meta, "editor", &args.editor)?;
    let variant: EditorVariant = serde_json::from_value(meta["variant"].clone())
        .context("editor checkpoint has an invalid variant")?;
    if !variant.is_masked() {
        bail!("editor variant {variant} has no language masks to analyze");
    }
    let mcfg: ModelConfig = serde_json::from_value(meta["model_config"].clone())
        .context("editor checkpoint has an invalid model_config")?;
    let editor = Editor::from_tensors(variant, &mcfg, tensors)?;

    let recorded = meta["run_config"]["eval"]["top_fraction"].as_f64();
    let top_fraction = args.top_fraction.or(recorded).unwrap_or(0.01);
    let matrix = mask_similarity_matrix(&editor, top_fraction)?;
    for (l, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map_or("   -  ".into(), |x| format!("{x:+.3}")))
            .collect();
        log::info!("lang {l}: [{}]", cells.join(", "));
    }

    ensure_writable(&args.out, args.force)?;
    write_json(
        &args.out,
        &serde_json::json!({
            "kind": "mask-similarity",
            "seed": meta["seed"],
            "variant": variant,
            "top_fraction": top_fraction,
            "num_languages": matrix.len(),
            "matrix": matrix,
            "run_config": meta["run_config"],
        }),
    )
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("refusing to overwrite {}; pass --force", path.display());
    }
    Ok(())
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, format!("{}\n", serde_json::to_string_pretty(doc)?))
        .with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<SplitCorpus> {
    let sp = SplitCorpus::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    ensure_match(&cfg.corpus_config(), &sp.corpus.config, "[corpus] section vs dataset")?;
    Ok(sp)
}

fn load_raw_model(path: &Path, cfg: &RunConfig) -> Result<(ParameterSet, ModelConfig)> {
    let (meta, tensors) =
        checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    expect_kind(&meta, "raw-model", path)?;
    let mcfg: ModelConfig = serde_json::from_value(meta["model_config"].clone())
        .context("raw checkpoint has an invalid model_config")?;
    ensure_match(&cfg.model_config(), &mcfg, "[model] section vs raw checkpoint")?;
    let ck_ccfg: CorpusConfig = serde_json::from_value(meta["corpus_config"].clone())
        .context("raw checkpoint has an invalid corpus_config")?;
    ensure_match(&cfg.corpus_config(), &ck_ccfg, "[corpus] section vs raw checkpoint")?;
    let params = ParameterSet::from_tensors(&mcfg, tensors)?;
    Ok((params, mcfg))
}

fn load_editor(path: &Path, mcfg: &ModelConfig) -> Result<(Editor, EditorVariant)> {
    let (meta, tensors) =
        checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    expect_kind(&meta, "editor", path)?;
    let variant: EditorVariant = serde_json::from_value(meta["variant"].clone())
        .context("editor checkpoint has an invalid variant")?;
    let ck_mcfg: ModelConfig = serde_json::from_value(meta["model_config"].clone())
        .context("editor checkpoint has an invalid model_config")?;
    ensure_match(mcfg, &ck_mcfg, "raw checkpoint vs editor checkpoint")?;
    let editor = Editor::from_tensors(variant, mcfg, tensors)?;
    Ok((editor, variant))
}

fn expect_kind(meta: &serde_json::Value, kind: &str, path: &Path) -> Result<()> {
    let found = meta.get("kind").and_then(|v| v.as_str()).unwrap_or("?");
    if found != kind {
        bail!(
            "{} is a {found:?} checkpoint, expected {kind:?}",
            path.display()
        );
    }
    Ok(())
}

/// Field-by-field mismatch diagnostic for configs echoed into checkpoints.
fn ensure_match<T: Serialize + PartialEq>(expected: &T, found: &T, what: &str) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    let a = serde_json::to_value(expected)?;
    let b = serde_json::to_value(found)?;
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            let vb = b.get(k).cloned().unwrap_or(serde_json::Value::Null);
            if *va != vb {
                diffs.push(format!("{k}: {va} vs {vb}"));
            }
        }
    }
    if diffs.is_empty() {
        diffs.push(format!("{a} vs {b}"));
    }
    bail!("{what} mismatch: {}", diffs.join(", "));
}
