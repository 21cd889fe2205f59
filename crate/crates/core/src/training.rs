//! Optimization: pretraining the raw model and meta-training editors.
//!
//! The editor objective is two-stage. Stage one performs an edit with sampled
//! gates, producing θ_u on the tape with gradients flowing only into editor
//! state. Stage two scores θ_u: cross-entropy toward the edited label on the
//! update examples, KL against the raw model's (constant) distribution on the
//! retain examples, and the expected-L0 surrogate on mask parameters. The raw
//! model itself is never touched by any optimizer here except in
//! `pretrain_raw_model`.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{CorpusError, EditBatch, EditPool, Example, LanguageMode, Split, SplitCorpus};
use crate::editors::{hypernet_edit, Editor, EditorError, EditorVariant, EditRequest, GatePlan};
use crate::model::{forward_batch, ModelConfig, ModelError, ParameterSet};
use crate::numerics::{NumericsError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("non-finite loss at step {step}; aborting. {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamSlot {
    shape: [usize; 2],
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Plain Adam with per-parameter moments. Deliberately hand-rolled so the
/// full optimizer state can round-trip through checkpoints bit-exactly.
pub struct Adam {
    pub lr: f64,
    slots: IndexMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(params: Vec<(String, [usize; 2])>, lr: f64) -> Adam {
        let slots = params
            .into_iter()
            .map(|(name, shape)| {
                let n = shape[0] * shape[1];
                (
                    name,
                    AdamSlot {
                        shape,
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    },
                )
            })
            .collect();
        Adam { lr, slots }
    }

    /// One update for one parameter. Panics on an unknown name or shape
    /// mismatch: both indicate a wiring bug, not a runtime condition.
    pub fn step(&mut self, name: &str, value: &Tensor, grad: &Tensor) -> Tensor {
        let slot = self
            .slots
            .get_mut(name)
            .unwrap_or_else(|| panic!("optimizer has no slot for {name:?}"));
        assert_eq!(slot.shape, value.shape(), "shape mismatch for {name:?}");
        assert_eq!(slot.shape, grad.shape(), "gradient shape mismatch for {name:?}");
        slot.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
        let mut out = Vec::with_capacity(value.numel());
        for ((w, g), (m, v)) in value
            .data()
            .iter()
            .zip(grad.data())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            out.push(w - self.lr * mhat / (vhat.sqrt() + ADAM_EPS));
        }
        Tensor::from_vec(value.rows(), value.cols(), out)
    }

    /// Serializes moments and step counts as tensors under `prefix`.
    pub fn state_tensors(&self, prefix: &str, out: &mut IndexMap<String, Tensor>) {
        for (name, slot) in &self.slots {
            let [r, c] = slot.shape;
            out.insert(format!("{prefix}{name}.m"), Tensor::from_vec(r, c, slot.m.clone()));
            out.insert(format!("{prefix}{name}.v"), Tensor::from_vec(r, c, slot.v.clone()));
            out.insert(format!("{prefix}{name}.t"), Tensor::scalar(slot.t as f64));
        }
    }

    /// Restores state written by `state_tensors` with the same inventory.
    pub fn load_state(&mut self, prefix: &str, tensors: &IndexMap<String, Tensor>) -> Result<()> {
        let mut consumed = 0usize;
        for (name, slot) in self.slots.iter_mut() {
            for (suffix, dest) in [("m", &mut slot.m), ("v", &mut slot.v)] {
                let key = format!("{prefix}{name}.{suffix}");
                let t = tensors.get(&key).ok_or_else(|| {
                    TrainingError::Config(format!("optimizer state is missing {key:?}"))
                })?;
                if t.shape() != slot.shape {
                    return Err(TrainingError::Config(format!(
                        "optimizer state {key:?} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape
                    )));
                }
                *dest = t.data().to_vec();
                consumed += 1;
            }
            let key = format!("{prefix}{name}.t");
            let t = tensors.get(&key).ok_or_else(|| {
                TrainingError::Config(format!("optimizer state is missing {key:?}"))
            })?;
            slot.t = t.item() as u64;
            consumed += 1;
        }
        let present = tensors.keys().filter(|k| k.starts_with(prefix)).count();
        if present != consumed {
            return Err(TrainingError::Config(format!(
                "optimizer state under {prefix:?} has {present} tensors, expected {consumed}"
            )));
        }
        Ok(())
    }
}

/// Two Adam groups: mask parameters get their own learning rate.
pub struct EditorOptimizer {
    main: Adam,
    mask: Adam,
}

impl EditorOptimizer {
    pub fn new(editor: &Editor, lr_main: f64, lr_mask: f64) -> EditorOptimizer {
        let (mut main, mut mask) = (Vec::new(), Vec::new());
        for (name, t) in editor.params() {
            let entry = (name.clone(), t.shape());
            if name.starts_with("mask.") {
                mask.push(entry);
            } else {
                main.push(entry);
            }
        }
        EditorOptimizer {
            main: Adam::new(main, lr_main),
            mask: Adam::new(mask, lr_mask),
        }
    }

    fn step(&mut self, name: &str, value: &Tensor, grad: &Tensor) -> Tensor {
        if name.starts_with("mask.") {
            self.mask.step(name, value, grad)
        } else {
            self.main.step(name, value, grad)
        }
    }

    pub fn state_tensors(&self) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        self.main.state_tensors("opt.main.", &mut out);
        self.mask.state_tensors("opt.mask.", &mut out);
        out
    }

    pub fn load_state(&mut self, tensors: &IndexMap<String, Tensor>) -> Result<()> {
        self.main.load_state("opt.main.", tensors)?;
        self.mask.load_state("opt.mask.", tensors)?;
        Ok(())
    }
}

/// Loss weights (λ_rel, λ_loc, λ_mask).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rel: f64,
    pub loc: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rel: 0.1,
            loc: 1.0,
            mask: 1.0,
        }
    }
}

/// Weighted loss components for one step; `total` is exactly their sum.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub rel: f64,
    pub loc: f64,
    pub mask: f64,
}

/// Builds the full two-stage editor loss on `tape`. The editor should be a
/// tracked view (`Editor::attach`) when gradients are wanted.
pub fn editor_loss(
    cfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &Editor,
    batch: &EditBatch,
    weights: LossWeights,
    gates: GatePlan,
    tape: &mut Tape,
) -> Result<(Tensor, StepLosses)> {
    let request = EditRequest {
        tokens: batch.edit.tokens.clone(),
        target: batch.target,
        language: batch.edit.language,
    };
    let edited = hypernet_edit(cfg, raw, editor, &request, gates, tape)?;

    let upd_tokens: Vec<&[usize]> = batch.updates.iter().map(|e| e.tokens.as_slice()).collect();
    let upd_targets = vec![batch.target; batch.updates.len()];
    let upd_logits = forward_batch(cfg, &edited, tape, &upd_tokens)?;
    let rel_raw = tape.softmax_cross_entropy(&upd_logits, &upd_targets)?;
    let rel = tape.scale(&rel_raw, weights.rel)?;

    let ret_tokens: Vec<&[usize]> = batch.retains.iter().map(|e| e.tokens.as_slice()).collect();
    let edited_logits = forward_batch(cfg, &edited, tape, &ret_tokens)?;
    // The raw model is untracked, so its logits enter as constants;
    // kl_divergence softmaxes both sides itself.
    let raw_logits = forward_batch(cfg, raw, tape, &ret_tokens)?;
    let loc_raw = tape.kl_divergence(&edited_logits, &raw_logits)?;
    let loc = tape.scale(&loc_raw, weights.loc)?;

    let mut total = tape.add(&rel, &loc)?;
    let mut mask_item = 0.0;
    if let Some(l0) = editor.mask_expected_l0(tape)? {
        let mask = tape.scale(&l0, weights.mask)?;
        mask_item = mask.item();
        total = tape.add(&total, &mask)?;
    }
    let losses = StepLosses {
        total: total.item(),
        rel: rel.item(),
        loc: loc.item(),
        mask: mask_item,
    };
    Ok((total, losses))
}

/// One meta-training step: sample a batch, edit with sampled gates, descend
/// the weighted loss. Only editor state moves; `raw` is read-only.
pub fn editor_train_step(
    cfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &mut Editor,
    opt: &mut EditorOptimizer,
    pool: &EditPool,
    mode: LanguageMode,
    weights: LossWeights,
    num_updates: usize,
    num_retains: usize,
    grad_clip: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let batch = pool.sample_edit_batch(mode, num_updates, num_retains, rng)?;
    let mut tape = Tape::new();
    let tracked = editor.attach(&mut tape);
    let (total, losses) = editor_loss(
        cfg,
        raw,
        &tracked,
        &batch,
        weights,
        GatePlan::Sampled(rng),
        &mut tape,
    )?;
    if !losses.total.is_finite() {
        return Err(TrainingError::NonFinite {
            step,
            dump: format!("components {losses:?}; batch {batch:?}"),
        });
    }
    tape.backward(&total)?;
    let names: Vec<String> = editor.params().keys().cloned().collect();
    let mut grads = Vec::with_capacity(names.len());
    let mut sq_norm = 0.0;
    for name in names {
        if let Some(g) = tape.grad(&tracked.params()[&name]) {
            sq_norm += g.data().iter().map(|v| v * v).sum::<f64>();
            grads.push((name, g));
        }
    }
    // The rare hard batch produces a meta-gradient orders of magnitude above
    // typical; clipping the global norm keeps one spike from undoing
    // thousands of good steps.
    let norm = sq_norm.sqrt();
    if grad_clip > 0.0 && norm > grad_clip {
        let scale = grad_clip / norm;
        for (_, g) in grads.iter_mut() {
            *g = Tensor::from_vec(
                g.rows(),
                g.cols(),
                g.data().iter().map(|v| v * scale).collect(),
            );
        }
    }
    for (name, g) in grads {
        let updated = opt.step(&name, &editor.params()[&name], &g);
        editor.set_param(&name, updated)?;
    }
    Ok(losses)
}

/// Meta-training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorTrainConfig {
    pub language_mode: LanguageMode,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Stop once this many steps pass without a dev improvement.
    pub patience: usize,
    pub num_updates: usize,
    pub num_retains: usize,
    /// Learning rates are scaled up from the large-model regime to suit this
    /// desk-size model; see README.
    pub lr_editor: f64,
    pub lr_masks: f64,
    /// Global L2-norm ceiling on the meta-gradient; ≤ 0 disables clipping.
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for EditorTrainConfig {
    fn default() -> Self {
        EditorTrainConfig {
            language_mode: LanguageMode::CrossLingual,
            max_steps: 5000,
            eval_interval: 500,
            patience: 2000,
            num_updates: 4,
            num_retains: 4,
            lr_editor: 1e-2,
            lr_masks: 1e-2,
            grad_clip: 1.0,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl EditorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.eval_interval == 0 {
            return Err(TrainingError::Config(
                "max_steps and eval_interval must be positive".into(),
            ));
        }
        if self.num_updates == 0 || self.num_retains == 0 {
            return Err(TrainingError::Config(
                "num_updates and num_retains must be positive".into(),
            ));
        }
        if !(self.lr_editor > 0.0) || !(self.lr_masks > 0.0) {
            return Err(TrainingError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-exactly.
pub struct TrainState {
    pub step: usize,
    pub best_step: usize,
    pub best_dev_succ: f64,
    pub rng_word_pos: u128,
    pub editor: IndexMap<String, Tensor>,
    pub best: IndexMap<String, Tensor>,
    pub optimizer: IndexMap<String, Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub losses: StepLosses,
    pub dev_succ: Option<f64>,
}

pub struct TrainOutcome {
    /// Best-on-dev snapshot (falls back to the initial editor if no eval ran).
    pub best_editor: Editor,
    pub final_editor: Editor,
    pub best_step: usize,
    pub best_dev_succ: f64,
    pub steps_run: usize,
    pub history: Vec<TrainRecord>,
    pub state: TrainState,
}

/// Runs (or resumes) meta-training. `eval_fn` scores an editor on dev —
/// higher is better — and must be deterministic and independent of the
/// training RNG, or resumed runs will diverge.
pub fn train_editor(
    cfg: &ModelConfig,
    raw: &ParameterSet,
    variant: EditorVariant,
    pool: &EditPool,
    tcfg: &EditorTrainConfig,
    resume: Option<&TrainState>,
    eval_fn: &mut dyn FnMut(&Editor) -> Result<f64>,
    mut on_checkpoint: Option<&mut dyn FnMut(&TrainState) -> Result<()>>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let (mut editor, mut best_editor, mut opt, mut best_succ, mut best_step, start_step) =
        match resume {
            None => {
                let editor = Editor::new(variant, cfg, tcfg.seed)?;
                let opt = EditorOptimizer::new(&editor, tcfg.lr_editor, tcfg.lr_masks);
                (editor.clone(), editor, opt, f64::NEG_INFINITY, 0, 0)
            }
            Some(state) => {
                let editor = Editor::from_tensors(variant, cfg, state.editor.clone())?;
                let best = Editor::from_tensors(variant, cfg, state.best.clone())?;
                let mut opt = EditorOptimizer::new(&editor, tcfg.lr_editor, tcfg.lr_masks);
                opt.load_state(&state.optimizer)?;
                rng.set_word_pos(state.rng_word_pos);
                (editor, best, opt, state.best_dev_succ, state.best_step, state.step)
            }
        };

    let mut history = Vec::new();
    let mut step = start_step;
    while step < tcfg.max_steps {
        let losses = editor_train_step(
            cfg,
            raw,
            &mut editor,
            &mut opt,
            pool,
            tcfg.language_mode,
            tcfg.loss_weights,
            tcfg.num_updates,
            tcfg.num_retains,
            tcfg.grad_clip,
            step,
            &mut rng,
        )?;
        step += 1;

        let mut dev_succ = None;
        if step % tcfg.eval_interval == 0 || step == tcfg.max_steps {
            let succ = eval_fn(&editor)?;
            dev_succ = Some(succ);
            if succ > best_succ {
                best_succ = succ;
                best_step = step;
                best_editor = editor.clone();
            }
            log::info!(
                "step {step}: total {:.5} rel {:.5} loc {:.5} mask {:.5} dev {succ:.4} (best {best_succ:.4} @ {best_step})",
                losses.total,
                losses.rel,
                losses.loc,
                losses.mask
            );
            if let Some(hook) = on_checkpoint.as_deref_mut() {
                hook(&capture_state(
                    step, best_step, best_succ, &rng, &editor, &best_editor, &opt,
                ))?;
            }
        }
        history.push(TrainRecord {
            step,
            losses,
            dev_succ,
        });
        if step.saturating_sub(best_step) >= tcfg.patience && best_step > 0 {
            log::info!("stopping at step {step}: no dev improvement since {best_step}");
            break;
        }
    }

    let state = capture_state(step, best_step, best_succ, &rng, &editor, &best_editor, &opt);
    Ok(TrainOutcome {
        best_editor,
        final_editor: editor,
        best_step,
        best_dev_succ: best_succ,
        steps_run: step - start_step,
        history,
        state,
    })
}

fn capture_state(
    step: usize,
    best_step: usize,
    best_dev_succ: f64,
    rng: &ChaCha8Rng,
    editor: &Editor,
    best_editor: &Editor,
    opt: &EditorOptimizer,
) -> TrainState {
    TrainState {
        step,
        best_step,
        best_dev_succ,
        rng_word_pos: rng.get_word_pos(),
        editor: editor.params().clone(),
        best: best_editor.params().clone(),
        optimizer: opt.state_tensors(),
    }
}

/// Writes a resumable training state (configs echoed into the metadata so a
/// mismatched resume fails loudly).
pub fn save_train_state(
    path: &std::path::Path,
    cfg: &ModelConfig,
    variant: EditorVariant,
    tcfg: &EditorTrainConfig,
    state: &TrainState,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "train-state",
        "variant": variant,
        "model_config": cfg,
        "train_config": tcfg,
        "step": state.step,
        "best_step": state.best_step,
        "best_dev_succ": state.best_dev_succ,
        "rng_word_pos": state.rng_word_pos.to_string(),
    });
    let mut tensors = IndexMap::new();
    for (name, t) in &state.editor {
        tensors.insert(format!("editor.{name}"), t.clone());
    }
    for (name, t) in &state.best {
        tensors.insert(format!("best.{name}"), t.clone());
    }
    for (name, t) in &state.optimizer {
        tensors.insert(name.clone(), t.clone());
    }
    checkpoint::save(path, &meta, &tensors)?;
    Ok(())
}

pub fn load_train_state(
    path: &std::path::Path,
) -> Result<(ModelConfig, EditorVariant, EditorTrainConfig, TrainState)> {
    let (meta, tensors) = checkpoint::load(path)?;
    if meta.get("kind").and_then(|v| v.as_str()) != Some("train-state") {
        return Err(TrainingError::Config(format!(
            "{} is not a training state checkpoint",
            path.display()
        )));
    }
    let bad = |what: &str| TrainingError::Config(format!("training state has invalid {what}"));
    let cfg: ModelConfig =
        serde_json::from_value(meta["model_config"].clone()).map_err(|_| bad("model_config"))?;
    let variant: EditorVariant =
        serde_json::from_value(meta["variant"].clone()).map_err(|_| bad("variant"))?;
    let tcfg: EditorTrainConfig =
        serde_json::from_value(meta["train_config"].clone()).map_err(|_| bad("train_config"))?;
    let rng_word_pos: u128 = meta["rng_word_pos"]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("rng_word_pos"))?;
    let mut state = TrainState {
        step: meta["step"].as_u64().ok_or_else(|| bad("step"))? as usize,
        best_step: meta["best_step"].as_u64().ok_or_else(|| bad("best_step"))? as usize,
        best_dev_succ: meta["best_dev_succ"].as_f64().ok_or_else(|| bad("best_dev_succ"))?,
        rng_word_pos,
        editor: IndexMap::new(),
        best: IndexMap::new(),
        optimizer: IndexMap::new(),
    };
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("editor.") {
            state.editor.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("best.") {
            state.best.insert(rest.to_string(), t);
        } else if name.starts_with("opt.") {
            state.optimizer.insert(name, t);
        } else {
            return Err(TrainingError::Config(format!(
                "training state has unexpected tensor {name:?}"
            )));
        }
    }
    Ok((cfg, variant, tcfg, state))
}

/// Pretraining schedule for the raw model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            log_interval: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub per_language_train_accuracy: Vec<(usize, f64)>,
    pub per_language_dev_accuracy: Vec<(usize, f64)>,
}

/// Argmax accuracy over a set of examples, evaluated in chunks.
pub fn dataset_accuracy(
    cfg: &ModelConfig,
    params: &ParameterSet,
    examples: &[&Example],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(TrainingError::Config("accuracy over an empty set".into()));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(64) {
        let tokens: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let logits = forward_batch(cfg, params, &mut tape, &tokens)?;
        for (pred, ex) in logits.argmax_rows().into_iter().zip(chunk) {
            correct += (pred == ex.label) as usize;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Accuracy per language, in ascending language order.
pub fn per_language_accuracy(
    cfg: &ModelConfig,
    params: &ParameterSet,
    examples: &[&Example],
) -> Result<Vec<(usize, f64)>> {
    let mut by_lang: IndexMap<usize, Vec<&Example>> = IndexMap::new();
    for &e in examples {
        by_lang.entry(e.language).or_default().push(e);
    }
    by_lang.sort_keys();
    let mut out = Vec::with_capacity(by_lang.len());
    for (lang, subset) in by_lang {
        out.push((lang, dataset_accuracy(cfg, params, &subset)?));
    }
    Ok(out)
}

/// Supervised pretraining of the raw model on the train split.
pub fn pretrain_raw_model(
    cfg: &ModelConfig,
    split: &SplitCorpus,
    pcfg: &PretrainConfig,
) -> Result<(ParameterSet, PretrainReport)> {
    if pcfg.steps == 0 || pcfg.batch_size == 0 {
        return Err(TrainingError::Config(
            "pretraining needs positive steps and batch size".into(),
        ));
    }
    let train = split.examples_in(Split::Train);
    let dev = split.examples_in(Split::Dev);
    if train.is_empty() || dev.is_empty() {
        return Err(TrainingError::Config("empty train or dev split".into()));
    }
    let mut params = ParameterSet::init(cfg, pcfg.seed)?;
    let shapes: Vec<(String, [usize; 2])> = cfg.param_shapes().into_iter().collect();
    let names: Vec<String> = shapes.iter().map(|(n, _)| n.clone()).collect();
    let mut opt = Adam::new(shapes, pcfg.lr);
    // Stream 1 keeps batch sampling independent of the init stream.
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    rng.set_stream(1);

    let mut final_loss = f64::NAN;
    for step in 0..pcfg.steps {
        let batch: Vec<&Example> =
            (0..pcfg.batch_size).map(|_| train[rng.gen_range(0..train.len())]).collect();
        let tokens: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();

        let mut tape = Tape::new();
        let mut tracked = params.clone();
        for name in &names {
            let leaf = tape.leaf(params.tensor(name)?);
            tracked.set(name, leaf)?;
        }
        let logits = forward_batch(cfg, &tracked, &mut tape, &tokens)?;
        let loss = tape.softmax_cross_entropy(&logits, &targets)?;
        final_loss = loss.item();
        if !final_loss.is_finite() {
            return Err(TrainingError::NonFinite {
                step,
                dump: format!("pretraining batch targets {targets:?}"),
            });
        }
        tape.backward(&loss)?;
        for name in &names {
            if let Some(g) = tape.grad(tracked.tensor(name)?) {
                let updated = opt.step(name, params.tensor(name)?, &g);
                params.set(name, updated)?;
            }
        }
        if (step + 1) % pcfg.log_interval == 0 {
            log::info!("pretrain step {}: loss {final_loss:.5}", step + 1);
        }
    }

    let report = PretrainReport {
        final_loss,
        train_accuracy: dataset_accuracy(cfg, &params, &train)?,
        dev_accuracy: dataset_accuracy(cfg, &params, &dev)?,
        per_language_train_accuracy: per_language_accuracy(cfg, &params, &train)?,
        per_language_dev_accuracy: per_language_accuracy(cfg, &params, &dev)?,
    };
    Ok((params, report))
}
