use anyhow::Result;
use edlab_core::checkpoint;
use edlab_core::corpus::{CorpusConfig, EditPool, LanguageMode, Split, SplitCorpus};
use edlab_core::editors::EditorVariant;
use edlab_core::evaluation::{
    editing_accuracy, editing_consistency, macro_average_eval, success_rate, EvalOptions,
};
use edlab_core::model::{ModelConfig, ParameterSet};
use edlab_core::training::{train_editor, EditorTrainConfig, LossWeights};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let data_dir = &args[1];
    let ckpt = &args[2];
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);

    let sp = SplitCorpus::load(std::path::Path::new(data_dir))?;
    let (meta, tensors) = checkpoint::load(std::path::Path::new(ckpt))?;
    let mcfg: ModelConfig = serde_json::from_value(meta["model_config"].clone())?;
    let ccfg: CorpusConfig = serde_json::from_value(meta["corpus_config"].clone())?;
    let raw = ParameterSet::from_tensors(&mcfg, tensors)?;

    let train: Vec<_> = sp.examples_in(Split::Train).into_iter().collect();
    let dev: Vec<_> = sp.examples_in(Split::Dev).into_iter().collect();
    let pool = EditPool::new(&ccfg, &train)?;

    let dev_opts = EvalOptions {
        samples_per_edit: 8,
        seed,
        max_edits_per_language: Some(8),
        workers: 1,
    };
    let full_opts = EvalOptions {
        samples_per_edit: 8,
        seed,
        max_edits_per_language: None,
        workers: 1,
    };

    let mk_cfg = |mode: LanguageMode| EditorTrainConfig {
        language_mode: mode,
        max_steps: 12000,
        eval_interval: 500,
        patience: 4000,
        num_updates: 8,
        num_retains: 8,
        lr_editor: 3e-3,
        lr_masks: 1e-2,
        grad_clip: 1.0,
        loss_weights: LossWeights {
            rel: 1.0,
            loc: 1.0,
            mask: 1.0,
        },
        seed,
    };

    // Cross arm: selected on the full cross-lingual dev protocol.
    let mut cross_eval = |e: &edlab_core::editors::Editor| {
        macro_average_eval(&ccfg, &mcfg, &raw, e, &dev, &dev_opts)
            .map(|r| r.succ)
            .map_err(|e| edlab_core::training::TrainingError::Config(e.to_string()))
    };
    let cross = train_editor(
        &mcfg,
        &raw,
        EditorVariant::HyperNet,
        &pool,
        &mk_cfg(LanguageMode::CrossLingual),
        None,
        &mut cross_eval,
        None,
    )?;

    // Mono arm: trained and selected on language 0 only.
    let dev0: Vec<_> = dev.iter().copied().filter(|e| e.language == 0).collect();
    let mut mono_eval = |e: &edlab_core::editors::Editor| {
        let go = || -> std::result::Result<f64, edlab_core::evaluation::EvalError> {
            let acc = editing_accuracy(&ccfg, &mcfg, &raw, e, &dev0, &dev0, &dev_opts)?;
            let con = editing_consistency(&ccfg, &mcfg, &raw, e, &dev0, &dev0, &dev_opts)?;
            Ok(success_rate(acc.value, con.value))
        };
        go().map_err(|e| edlab_core::training::TrainingError::Config(e.to_string()))
    };
    let mono = train_editor(
        &mcfg,
        &raw,
        EditorVariant::HyperNet,
        &pool,
        &mk_cfg(LanguageMode::Monolingual(0)),
        None,
        &mut mono_eval,
        None,
    )?;

    for (name, outcome) in [("cross", &cross), ("mono", &mono)] {
        let rec = macro_average_eval(&ccfg, &mcfg, &raw, &outcome.best_editor, &train, &full_opts)?;
        let r0 = &rec.per_language[0];
        println!(
            "{name}: best step {} dev {:.4} | train lang0 row acc {:.4} con {:.4} succ {:.4} | overall succ {:.4}",
            outcome.best_step, outcome.best_dev_succ, r0.acc, r0.con, r0.succ, rec.succ
        );
    }
    Ok(())
}
