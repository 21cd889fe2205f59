//! The editors: finetune baseline, hypernetwork gradient-transform editor,
//! and the language-anisotropic masked variant.
//!
//! All hypernetwork-style editors share one pipeline per editable weight
//! W[n×m]: take the tap pair (x, δ) from the raw model as constants,
//! optionally gate them with the editing language's masks, transform them with
//! g into (x̃, δ̃), reconstruct the pseudo-gradient x̃ᵀδ̃, and apply
//! θ_u = θ − α_W·x̃ᵀδ̃. Everything from the masks onward is differentiable
//! w.r.t. editor and mask parameters, so the meta-training loop can descend
//! losses computed on the edited model.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LanguageId;
use crate::model::{
    apply_delta, forward_with_taps, ModelConfig, ModelError, ParameterSet,
};
use crate::numerics::{sigmoid, softplus, NumericsError, Tape, Tensor};

/// Hard-concrete gate constants (stretch interval and temperature).
pub const GATE_GAMMA: f64 = -0.1;
pub const GATE_ZETA: f64 = 1.1;
pub const GATE_BETA: f64 = 2.0 / 3.0;

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EditorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditorVariant {
    /// Per-edit Adam finetuning of the editable weights; no trained state.
    #[serde(rename = "finetune")]
    Finetune,
    /// Learnable g and step sizes.
    #[serde(rename = "hypernet")]
    HyperNet,
    /// Learnable g, step sizes, and per-language masks.
    #[serde(rename = "hypernet-masked")]
    HyperNetMasked,
    /// g frozen to the identity; only step sizes learn.
    #[serde(rename = "identity-g")]
    IdentityG,
    /// g frozen to the identity; step sizes and masks learn.
    #[serde(rename = "identity-g-masked")]
    IdentityGMasked,
}

impl EditorVariant {
    pub fn is_masked(self) -> bool {
        matches!(self, EditorVariant::HyperNetMasked | EditorVariant::IdentityGMasked)
    }

    pub fn has_hypernet(self) -> bool {
        matches!(self, EditorVariant::HyperNet | EditorVariant::HyperNetMasked)
    }
}

impl std::fmt::Display for EditorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EditorVariant::Finetune => "finetune",
            EditorVariant::HyperNet => "hypernet",
            EditorVariant::HyperNetMasked => "hypernet-masked",
            EditorVariant::IdentityG => "identity-g",
            EditorVariant::IdentityGMasked => "identity-g-masked",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EditorVariant {
    type Err = EditorError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(EditorVariant::Finetune),
            "hypernet" => Ok(EditorVariant::HyperNet),
            "hypernet-masked" => Ok(EditorVariant::HyperNetMasked),
            "identity-g" => Ok(EditorVariant::IdentityG),
            "identity-g-masked" => Ok(EditorVariant::IdentityGMasked),
            other => Err(EditorError::Config(format!("unknown editor variant {other:?}"))),
        }
    }
}

/// How gates are realized during an edit.
pub enum GatePlan<'a> {
    /// Closed-form gates; used for evaluation and analysis.
    Deterministic,
    /// Hard-concrete sampling; used during training.
    Sampled(&'a mut ChaCha8Rng),
}

/// How a single gate call gets its randomness.
pub enum GateMode<'a> {
    Deterministic,
    /// u ~ Uniform(0,1) per coordinate, same shape as logα.
    Sampled(&'a Tensor),
}

/// Hard-concrete gate z ∈ [0,1] from the log-location parameters.
pub fn gate(tape: &mut Tape, logalpha: &Tensor, mode: GateMode) -> Result<Tensor> {
    let stretched = |tape: &mut Tape, s: &Tensor| -> Result<Tensor> {
        let scaled = tape.scale(s, GATE_ZETA - GATE_GAMMA)?;
        let shifted = tape.add_scalar(&scaled, GATE_GAMMA)?;
        Ok(tape.clamp(&shifted, 0.0, 1.0)?)
    };
    match mode {
        GateMode::Deterministic => {
            let s = tape.sigmoid(logalpha)?;
            stretched(tape, &s)
        }
        GateMode::Sampled(u) => {
            if u.shape() != logalpha.shape() {
                return Err(EditorError::Contract(format!(
                    "noise shape {:?} does not match logα shape {:?}",
                    u.shape(),
                    logalpha.shape()
                )));
            }
            if u.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(EditorError::Contract(
                    "gate noise must lie strictly inside (0,1)".into(),
                ));
            }
            // ln u − ln(1−u) is a constant w.r.t. logα.
            let noise = Tensor::from_vec(
                u.rows(),
                u.cols(),
                u.data().iter().map(|&v| v.ln() - (1.0 - v).ln()).collect(),
            );
            let shifted = tape.add(logalpha, &noise)?;
            let tempered = tape.scale(&shifted, 1.0 / GATE_BETA)?;
            let s = tape.sigmoid(&tempered)?;
            stretched(tape, &s)
        }
    }
}

/// Differentiable surrogate for Σ ‖z‖₀: Σ_i sigmoid(logα_i − β·ln(−γ/ζ)).
/// This equals the closed-form P(z_i > 0) summed over coordinates.
pub fn expected_l0(tape: &mut Tape, logalpha: &Tensor) -> Result<Tensor> {
    let shift = -GATE_BETA * (-GATE_GAMMA / GATE_ZETA).ln();
    let shifted = tape.add_scalar(logalpha, shift)?;
    let s = tape.sigmoid(&shifted)?;
    Ok(tape.sum(&s)?)
}

/// The logα at which P(z>0) = 1/2.
pub fn gate_half_point() -> f64 {
    GATE_BETA * (-GATE_GAMMA / GATE_ZETA).ln()
}

/// Mask op v + z⊙v, scaling each coordinate by 1+z ∈ [1,2].
pub fn mask_vector(tape: &mut Tape, v: &Tensor, z: &Tensor) -> Result<Tensor> {
    if v.shape() != z.shape() {
        return Err(EditorError::Numerics(NumericsError::DimensionMismatch {
            op: "mask_vector",
            lhs: v.shape(),
            rhs: z.shape(),
        }));
    }
    let zv = tape.mul(z, v)?;
    Ok(tape.add(v, &zv)?)
}

/// Uniform(0,1) noise tensor with every value strictly inside the open
/// interval.
pub fn sample_gate_noise(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.gen();
            if v > 0.0 {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

const ALPHA_INIT: f64 = 1e-4;
const MASK_LOGALPHA_INIT: f64 = 0.0;
const G_INIT_STD: f64 = 0.02;

/// A trained editor: variant, per-weight step sizes, the gradient transformer
/// g (one per weight shape class), and optional per-language masks. All state
/// lives in one name-keyed tensor map so optimizers and checkpoints can treat
/// it uniformly.
#[derive(Clone)]
pub struct Editor {
    pub variant: EditorVariant,
    num_languages: usize,
    editable: Vec<(String, [usize; 2])>,
    params: IndexMap<String, Tensor>,
}

fn g_param_names(shape: [usize; 2]) -> [String; 4] {
    let key = format!("g.{}x{}", shape[0], shape[1]);
    [
        format!("{key}.win"),
        format!("{key}.bin"),
        format!("{key}.wout"),
        format!("{key}.bout"),
    ]
}

fn mask_param_name(lang: LanguageId, weight: &str, side: &str) -> String {
    format!("mask.{lang}.{weight}.{side}")
}

fn alpha_param_name(weight: &str) -> String {
    format!("alpha.{weight}.rho")
}

/// softplus⁻¹, so that softplus(rho_for_alpha(a)) = a. a = 0 maps to −∞,
/// which softplus sends back to exactly 0.
fn rho_for_alpha(alpha: f64) -> f64 {
    alpha.exp_m1().ln()
}

impl Editor {
    /// Expected parameter inventory for a variant under a model config.
    fn layout(variant: EditorVariant, cfg: &ModelConfig) -> Result<(Vec<(String, [usize; 2])>, IndexMap<String, [usize; 2]>)> {
        if variant == EditorVariant::Finetune {
            return Err(EditorError::Config(
                "the finetune baseline has no trainable editor state".into(),
            ));
        }
        cfg.validate()?;
        let editable: Vec<(String, [usize; 2])> = {
            let shapes = cfg.param_shapes();
            cfg.editable_weight_names()
                .into_iter()
                .map(|n| {
                    let s = shapes[&n];
                    (n, s)
                })
                .collect()
        };
        let mut shape_classes: Vec<[usize; 2]> = Vec::new();
        for (_, s) in &editable {
            if !shape_classes.contains(s) {
                shape_classes.push(*s);
            }
        }
        let mut expected = IndexMap::new();
        for (name, _) in &editable {
            expected.insert(alpha_param_name(name), [1, 1]);
        }
        if variant.has_hypernet() {
            for &shape in &shape_classes {
                let width = shape[0] + shape[1];
                let [win, bin, wout, bout] = g_param_names(shape);
                expected.insert(win, [width, width]);
                expected.insert(bin, [1, width]);
                expected.insert(wout, [width, width]);
                expected.insert(bout, [1, width]);
            }
        }
        if variant.is_masked() {
            for lang in 0..cfg.num_languages {
                for (name, shape) in &editable {
                    expected.insert(mask_param_name(lang, name, "x"), [1, shape[0]]);
                    expected.insert(mask_param_name(lang, name, "delta"), [1, shape[1]]);
                }
            }
        }
        Ok((editable, expected))
    }

    /// Fresh editor. g starts as the identity (zero output layer), step sizes
    /// at softplus⁻¹(1e-4), and mask log-locations at zero.
    pub fn new(variant: EditorVariant, cfg: &ModelConfig, seed: u64) -> Result<Editor> {
        let (editable, expected) = Editor::layout(variant, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape) in expected {
            let n = shape[0] * shape[1];
            let data = if name.starts_with("alpha.") {
                vec![rho_for_alpha(ALPHA_INIT); n]
            } else if name.starts_with("mask.") {
                vec![MASK_LOGALPHA_INIT; n]
            } else if name.ends_with(".win") {
                (0..n).map(|_| G_INIT_STD * normal(&mut rng)).collect()
            } else {
                // bin, wout, bout: zero, making g an exact identity at init.
                vec![0.0; n]
            };
            params.insert(name, Tensor::from_vec(shape[0], shape[1], data));
        }
        Ok(Editor {
            variant,
            num_languages: cfg.num_languages,
            editable,
            params,
        })
    }

    /// Rebuilds an editor from checkpointed tensors, validating the inventory.
    pub fn from_tensors(
        variant: EditorVariant,
        cfg: &ModelConfig,
        tensors: IndexMap<String, Tensor>,
    ) -> Result<Editor> {
        let (editable, expected) = Editor::layout(variant, cfg)?;
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => {
                    return Err(EditorError::Config(format!(
                        "editor checkpoint is missing {name:?}"
                    )))
                }
                Some(t) if t.shape() != *shape => {
                    return Err(EditorError::Config(format!(
                        "editor tensor {name:?} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        for name in tensors.keys() {
            if !expected.contains_key(name) {
                return Err(EditorError::Config(format!(
                    "editor checkpoint has unexpected tensor {name:?}"
                )));
            }
        }
        let mut params = IndexMap::new();
        for name in expected.keys() {
            params.insert(name.clone(), tensors[name].clone());
        }
        Ok(Editor {
            variant,
            num_languages: cfg.num_languages,
            editable,
            params,
        })
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn num_languages(&self) -> usize {
        self.num_languages
    }

    pub fn editable_weights(&self) -> &[(String, [usize; 2])] {
        &self.editable
    }

    /// Replaces a parameter tensor (same shape).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| EditorError::Config(format!("no editor parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(EditorError::Config(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Pins one weight's step size to an exact α ≥ 0.
    pub fn set_alpha(&mut self, weight: &str, alpha: f64) -> Result<()> {
        self.set_param(&alpha_param_name(weight), Tensor::scalar(rho_for_alpha(alpha)))
    }

    /// Current learned step size for one editable weight.
    pub fn alpha(&self, weight: &str) -> Result<f64> {
        let rho = self
            .params
            .get(&alpha_param_name(weight))
            .ok_or_else(|| EditorError::Config(format!("no step size for weight {weight:?}")))?;
        Ok(softplus(rho.item()))
    }

    /// Tracked clone: every parameter becomes a leaf on `tape`, so a backward
    /// pass deposits gradients readable via `tape.grad`.
    pub fn attach(&self, tape: &mut Tape) -> Editor {
        let mut clone = self.clone();
        for (_, t) in clone.params.iter_mut() {
            *t = tape.leaf(t);
        }
        clone
    }

    /// Mask parameter names (trained with their own learning rate).
    pub fn mask_param_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| n.starts_with("mask."))
            .cloned()
            .collect()
    }

    /// L_mask surrogate: Σ over languages and weights of expected_l0, or None
    /// for unmasked variants.
    pub fn mask_expected_l0(&self, tape: &mut Tape) -> Result<Option<Tensor>> {
        if !self.variant.is_masked() {
            return Ok(None);
        }
        let mut total: Option<Tensor> = None;
        for (name, t) in &self.params {
            if !name.starts_with("mask.") {
                continue;
            }
            let e = expected_l0(tape, t)?;
            total = Some(match total {
                None => e,
                Some(acc) => tape.add(&acc, &e)?,
            });
        }
        Ok(total)
    }

    /// Mean expected gate activity per coordinate (closed form, no tape), or
    /// None for unmasked variants.
    pub fn mean_gate_activity(&self) -> Option<f64> {
        if !self.variant.is_masked() {
            return None;
        }
        let shift = -GATE_BETA * (-GATE_GAMMA / GATE_ZETA).ln();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (name, t) in &self.params {
            if name.starts_with("mask.") {
                sum += t.data().iter().map(|&v| sigmoid(v + shift)).sum::<f64>();
                count += t.numel();
            }
        }
        Some(sum / count as f64)
    }

    /// One language's deterministic gate values concatenated in canonical
    /// weight order (x gates then δ gates per weight). Used by the mask
    /// similarity analysis.
    pub fn language_gate_vector(&self, lang: LanguageId) -> Result<Vec<f64>> {
        if !self.variant.is_masked() {
            return Err(EditorError::Config(
                "editor has no language masks to analyze".into(),
            ));
        }
        if lang >= self.num_languages {
            return Err(EditorError::Config(format!(
                "language {lang} outside the editor's {} languages",
                self.num_languages
            )));
        }
        let mut out = Vec::new();
        for (weight, _) in &self.editable {
            for side in ["x", "delta"] {
                let logalpha = &self.params[&mask_param_name(lang, weight, side)];
                out.extend(logalpha.data().iter().map(|&v| {
                    (sigmoid(v) * (GATE_ZETA - GATE_GAMMA) + GATE_GAMMA).clamp(0.0, 1.0)
                }));
            }
        }
        Ok(out)
    }

    fn g_forward(
        &self,
        tape: &mut Tape,
        shape: [usize; 2],
        x: &Tensor,
        delta: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        if !self.variant.has_hypernet() {
            return Ok((x.clone(), delta.clone()));
        }
        let (n, m) = (shape[0], shape[1]);
        let ones = |k: usize| Tensor::filled(1, k, 1.0);
        let zeros = |k: usize| Tensor::zeros(1, k);
        let xn = tape.layer_norm(x, &ones(n), &zeros(n), 1e-5)?;
        let dn = tape.layer_norm(delta, &ones(m), &zeros(m), 1e-5)?;
        let inp = tape.concat_cols(&[&xn, &dn])?;
        let [win, bin, wout, bout] = g_param_names(shape);
        let hidden = tape.matmul(&inp, &self.params[&win])?;
        let hidden = tape.add_row(&hidden, &self.params[&bin])?;
        let hidden = tape.relu(&hidden)?;
        let out = tape.matmul(&hidden, &self.params[&wout])?;
        let out = tape.add_row(&out, &self.params[&bout])?;
        let out_x = tape.slice_cols(&out, 0, n)?;
        let out_d = tape.slice_cols(&out, n, n + m)?;
        Ok((tape.add(x, &out_x)?, tape.add(delta, &out_d)?))
    }

    fn masked_rows(
        &self,
        tape: &mut Tape,
        rows: &Tensor,
        z: &Tensor,
    ) -> Result<Tensor> {
        if rows.rows() == 1 {
            return mask_vector(tape, rows, z);
        }
        let mut masked = Vec::with_capacity(rows.rows());
        for b in 0..rows.rows() {
            let row = tape.slice_rows(rows, b, b + 1)?;
            masked.push(mask_vector(tape, &row, z)?);
        }
        let refs: Vec<&Tensor> = masked.iter().collect();
        Ok(tape.concat_rows(&refs)?)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One edit request: flip the prediction on `tokens` (language `language`) to
/// `target`.
#[derive(Clone, Debug)]
pub struct EditRequest {
    pub tokens: Vec<usize>,
    pub target: usize,
    pub language: LanguageId,
}

/// Applies one hypernetwork edit, producing θ_u on `tape`.
///
/// The tap pair (x, δ) enters as constants; gates (editing language only) and
/// g keep the rest differentiable w.r.t. the editor's tracked parameters.
pub fn hypernet_edit(
    cfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &Editor,
    request: &EditRequest,
    gates: GatePlan,
    tape: &mut Tape,
) -> Result<ParameterSet> {
    if editor.variant.is_masked() && request.language >= editor.num_languages {
        return Err(EditorError::Config(format!(
            "editing language {} has no mask (editor covers {} languages)",
            request.language, editor.num_languages
        )));
    }
    let tf = forward_with_taps(cfg, raw, &[request.tokens.as_slice()], &[request.target])?;
    let mut rng = match gates {
        GatePlan::Deterministic => None,
        GatePlan::Sampled(r) => Some(r),
    };

    let mut deltas = IndexMap::new();
    for tap in &tf.taps {
        let shape = [tap.x.cols(), tap.delta.cols()];
        let (mut x, mut delta) = (tap.x.clone(), tap.delta.clone());
        if editor.variant.is_masked() {
            for (side, value) in [("x", &mut x), ("delta", &mut delta)] {
                let logalpha = &editor.params[&mask_param_name(request.language, &tap.name, side)];
                let z = match rng.as_deref_mut() {
                    None => gate(tape, logalpha, GateMode::Deterministic)?,
                    Some(r) => {
                        let u = sample_gate_noise(logalpha.rows(), logalpha.cols(), r);
                        gate(tape, logalpha, GateMode::Sampled(&u))?
                    }
                };
                *value = editor.masked_rows(tape, value, &z)?;
            }
        }
        let (xt, dt) = editor.g_forward(tape, shape, &x, &delta)?;
        let xt_t = tape.transpose(&xt)?;
        let recon = tape.matmul(&xt_t, &dt)?;
        let rho = &editor.params[&alpha_param_name(&tap.name)];
        let alpha = tape.softplus(rho)?;
        let step = tape.mul_scalar(&recon, &alpha)?;
        deltas.insert(tap.name.clone(), tape.scale(&step, -1.0)?);
    }
    Ok(apply_delta(raw, &deltas, tape)?)
}

/// Per-edit finetuning baseline: Adam on the editable weights minimizing
/// L_task on the edit example, stopping as soon as the prediction flips.
/// Returns θ_u and the number of optimizer steps taken.
pub fn finetune_edit(
    cfg: &ModelConfig,
    raw: &ParameterSet,
    request: &EditRequest,
    max_steps: usize,
    lr: f64,
) -> Result<(ParameterSet, usize)> {
    let editable = cfg.editable_weight_names();
    let mut current = raw.clone();
    let mut opt = crate::training::Adam::new(
        editable
            .iter()
            .map(|n| (n.clone(), raw.tensor(n).map(|t| t.shape()).unwrap()))
            .collect(),
        lr,
    );
    for step in 0..max_steps {
        let tf = forward_with_taps(cfg, &current, &[request.tokens.as_slice()], &[request.target])?;
        if tf.logits.argmax_rows()[0] == request.target {
            return Ok((current, step));
        }
        for name in &editable {
            let updated = opt.step(name, current.tensor(name)?, &tf.weight_grads[name]);
            current.set(name, updated)?;
        }
    }
    Ok((current, max_steps))
}

/// Anything that can turn an edit request into θ_u. Implementations must not
/// mutate shared state: every edit starts from the same raw θ.
pub trait EditStrategy {
    fn edit(&self, cfg: &ModelConfig, raw: &ParameterSet, request: &EditRequest) -> Result<ParameterSet>;
}

impl EditStrategy for Editor {
    /// Evaluation-time edit: deterministic gates, detached output.
    fn edit(&self, cfg: &ModelConfig, raw: &ParameterSet, request: &EditRequest) -> Result<ParameterSet> {
        let mut tape = Tape::new();
        let edited = hypernet_edit(cfg, raw, self, request, GatePlan::Deterministic, &mut tape)?;
        let mut detached = IndexMap::new();
        for (name, t) in edited.tensors() {
            detached.insert(name.clone(), t.detach());
        }
        Ok(ParameterSet::from_tensors(cfg, detached)?)
    }
}

/// The finetune baseline as a strategy.
pub struct FinetuneEditor {
    pub max_steps: usize,
    pub lr: f64,
}

impl Default for FinetuneEditor {
    fn default() -> Self {
        FinetuneEditor {
            max_steps: 100,
            lr: 5e-3,
        }
    }
}

impl EditStrategy for FinetuneEditor {
    fn edit(&self, cfg: &ModelConfig, raw: &ParameterSet, request: &EditRequest) -> Result<ParameterSet> {
        Ok(finetune_edit(cfg, raw, request, self.max_steps, self.lr)?.0)
    }
}

/// Test/control editor: returns θ unchanged.
pub struct NoopEditor;

impl EditStrategy for NoopEditor {
    fn edit(&self, cfg: &ModelConfig, raw: &ParameterSet, _request: &EditRequest) -> Result<ParameterSet> {
        let _ = cfg;
        Ok(raw.clone())
    }
}

/// Test/control editor: rewrites the head so the requested label always wins.
pub struct OracleEditor;

impl EditStrategy for OracleEditor {
    fn edit(&self, cfg: &ModelConfig, raw: &ParameterSet, request: &EditRequest) -> Result<ParameterSet> {
        let mut edited = raw.clone();
        edited.set("head.w", Tensor::zeros(cfg.hidden_size, cfg.num_labels))?;
        let mut b = vec![0.0; cfg.num_labels];
        if request.target >= cfg.num_labels {
            return Err(EditorError::Contract(format!(
                "target {} outside label space {}",
                request.target, cfg.num_labels
            )));
        }
        b[request.target] = 50.0;
        edited.set("head.b", Tensor::row(b))?;
        Ok(edited)
    }
}

/// Test/control editor: zeroes every editable weight (a catastrophic edit).
pub struct ZeroingEditor;

impl EditStrategy for ZeroingEditor {
    fn edit(&self, cfg: &ModelConfig, raw: &ParameterSet, _request: &EditRequest) -> Result<ParameterSet> {
        let mut edited = raw.clone();
        for name in cfg.editable_weight_names() {
            let shape = raw.tensor(&name)?.shape();
            edited.set(&name, Tensor::zeros(shape[0], shape[1]))?;
        }
        Ok(edited)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_batch;
    use crate::numerics::finite_difference_gradient;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            num_languages: 3,
            hidden_size: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 4,
            num_editable_layers: 1,
            num_labels: 6,
            ff_size: 10,
        }
    }

    fn request() -> EditRequest {
        EditRequest {
            tokens: vec![1, 5, 9, 13],
            target: 3,
            language: 1,
        }
    }

    #[test]
    fn step_sizes_round_trip_through_the_softplus_parameterization() {
        let cfg = tiny_cfg();
        let mut editor = Editor::new(EditorVariant::IdentityG, &cfg, 0).unwrap();
        let weight = editor.editable_weights()[0].0.clone();
        assert!((editor.alpha(&weight).unwrap() - 1e-4).abs() < 1e-16);
        editor.set_alpha(&weight, 0.37).unwrap();
        assert!((editor.alpha(&weight).unwrap() - 0.37).abs() < 1e-12);
        editor.set_alpha(&weight, 0.0).unwrap();
        assert_eq!(editor.alpha(&weight).unwrap(), 0.0);
        assert!(editor.alpha("nonsense").is_err());
    }

    #[test]
    fn deterministic_gate_saturates() {
        let mut tape = Tape::new();
        let hi = gate(&mut tape, &Tensor::row(vec![50.0, 50.0]), GateMode::Deterministic).unwrap();
        assert_eq!(hi.data(), &[1.0, 1.0]);
        let lo = gate(&mut tape, &Tensor::row(vec![-50.0, -50.0]), GateMode::Deterministic).unwrap();
        assert_eq!(lo.data(), &[0.0, 0.0]);
    }

    #[test]
    fn sampled_gate_rejects_bad_noise() {
        let mut tape = Tape::new();
        let la = Tensor::row(vec![0.0, 0.0]);
        let bad = Tensor::row(vec![0.5, 1.0]);
        assert!(matches!(
            gate(&mut tape, &la, GateMode::Sampled(&bad)),
            Err(EditorError::Contract(_))
        ));
        let mismatched = Tensor::row(vec![0.5]);
        assert!(matches!(
            gate(&mut tape, &la, GateMode::Sampled(&mismatched)),
            Err(EditorError::Contract(_))
        ));
    }

    #[test]
    fn half_open_point_is_half_by_monte_carlo() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logalpha = Tensor::filled(1, n, gate_half_point());
        let u = sample_gate_noise(1, n, &mut rng);
        let mut tape = Tape::new();
        let z = gate(&mut tape, &logalpha, GateMode::Sampled(&u)).unwrap();
        let frac = z.data().iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "P(z>0) = {frac}");
    }

    #[test]
    fn expected_l0_matches_hand_values() {
        let mut tape = Tape::new();
        let low = expected_l0(&mut tape, &Tensor::filled(1, 7, -50.0)).unwrap();
        assert!(low.item() < 1e-10);
        let half = expected_l0(&mut tape, &Tensor::filled(1, 10, gate_half_point())).unwrap();
        assert!((half.item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn expected_l0_matches_monte_carlo_nonzero_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = 100_000;
        for _ in 0..20 {
            let la: f64 = rng.gen_range(-4.0..4.0);
            let logalpha = Tensor::filled(1, samples, la);
            let u = sample_gate_noise(1, samples, &mut rng);
            let mut tape = Tape::new();
            let z = gate(&mut tape, &logalpha, GateMode::Sampled(&u)).unwrap();
            let frac = z.data().iter().filter(|&&v| v > 0.0).count() as f64 / samples as f64;
            let expected = expected_l0(&mut tape, &Tensor::scalar(la)).unwrap().item();
            assert!(
                (frac - expected).abs() < 0.01,
                "logα={la}: MC {frac} vs closed form {expected}"
            );
        }
    }

    #[test]
    fn mask_vector_hand_cases() {
        let mut tape = Tape::new();
        let v = Tensor::row(vec![1.0, -2.0, 3.0]);
        let id = mask_vector(&mut tape, &v, &Tensor::row(vec![0.0, 0.0, 0.0])).unwrap();
        assert_eq!(id.data(), v.data());
        let double = mask_vector(&mut tape, &v, &Tensor::row(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(double.data(), &[2.0, -4.0, 6.0]);
        let mixed = mask_vector(&mut tape, &v, &Tensor::row(vec![0.0, 0.5, 1.0])).unwrap();
        assert_eq!(mixed.data(), &[1.0, -3.0, 6.0]);
        assert!(mask_vector(&mut tape, &v, &Tensor::row(vec![0.0])).is_err());
    }

    #[test]
    fn identity_editor_performs_a_plain_sgd_step() {
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 2).unwrap();
        let mut editor = Editor::new(EditorVariant::IdentityG, &cfg, 0).unwrap();
        let alpha = 0.05;
        for (name, _) in editor.editable_weights().to_vec() {
            editor.set_alpha(&name, alpha).unwrap();
        }
        let req = request();
        let mut tape = Tape::new();
        let edited = hypernet_edit(&cfg, &raw, &editor, &req, GatePlan::Deterministic, &mut tape).unwrap();

        let tf = forward_with_taps(&cfg, &raw, &[req.tokens.as_slice()], &[req.target]).unwrap();
        for name in cfg.editable_weight_names() {
            let mut t = Tape::new();
            let step = t.scale(&tf.weight_grads[&name], -alpha).unwrap();
            let expect = t.add(raw.tensor(&name).unwrap(), &step).unwrap();
            let diff = edited.tensor(&name).unwrap().max_abs_diff(&expect);
            assert!(diff < 1e-9, "{name}: differs from SGD step by {diff:e}");
        }
        // Non-editable weights are untouched.
        assert!(edited.tensor("head.w").unwrap().bits_eq(raw.tensor("head.w").unwrap()));
    }

    #[test]
    fn zero_gates_bypass_the_masks() {
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 3).unwrap();
        let plain = Editor::new(EditorVariant::IdentityG, &cfg, 0).unwrap();
        let mut masked = Editor::new(EditorVariant::IdentityGMasked, &cfg, 0).unwrap();
        for name in masked.mask_param_names() {
            let shape = masked.params()[&name].shape();
            masked
                .set_param(&name, Tensor::filled(shape[0], shape[1], -50.0))
                .unwrap();
        }
        let req = request();
        let mut t1 = Tape::new();
        let a = hypernet_edit(&cfg, &raw, &plain, &req, GatePlan::Deterministic, &mut t1).unwrap();
        let mut t2 = Tape::new();
        let b = hypernet_edit(&cfg, &raw, &masked, &req, GatePlan::Deterministic, &mut t2).unwrap();
        for (name, t) in a.tensors() {
            assert!(t.bits_eq(b.tensor(name).unwrap()), "{name} differs");
        }
    }

    #[test]
    fn zero_alpha_leaves_the_model_bit_identical() {
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 4).unwrap();
        let mut editor = Editor::new(EditorVariant::HyperNet, &cfg, 0).unwrap();
        for (name, _) in editor.editable_weights().to_vec() {
            editor.set_alpha(&name, 0.0).unwrap();
        }
        let edited = editor.edit(&cfg, &raw, &request()).unwrap();
        let mut tape = Tape::new();
        let tokens: &[usize] = &[1, 2, 3];
        let a = forward_batch(&cfg, &raw, &mut tape, &[tokens]).unwrap();
        let b = forward_batch(&cfg, &edited, &mut tape, &[tokens]).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn fresh_hypernet_equals_identity_editor() {
        // Zero-initialized output layer makes g an exact identity, so a fresh
        // HyperNet editor and an IdentityG editor produce the same edit.
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 5).unwrap();
        let hyper = Editor::new(EditorVariant::HyperNet, &cfg, 9).unwrap();
        let ident = Editor::new(EditorVariant::IdentityG, &cfg, 9).unwrap();
        let req = request();
        let a = hyper.edit(&cfg, &raw, &req).unwrap();
        let b = ident.edit(&cfg, &raw, &req).unwrap();
        for (name, t) in a.tensors() {
            assert!(t.bits_eq(b.tensor(name).unwrap()), "{name} differs");
        }
    }

    #[test]
    fn edits_from_the_same_raw_model_are_order_independent() {
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 6).unwrap();
        let editor = Editor::new(EditorVariant::HyperNetMasked, &cfg, 1).unwrap();
        let req_a = request();
        let req_b = EditRequest {
            tokens: vec![1, 7, 11, 2],
            target: 0,
            language: 2,
        };
        let a_then = editor.edit(&cfg, &raw, &req_a).unwrap();
        let b_then = editor.edit(&cfg, &raw, &req_b).unwrap();
        let b_again = editor.edit(&cfg, &raw, &req_b).unwrap();
        let a_again = editor.edit(&cfg, &raw, &req_a).unwrap();
        for (name, t) in a_then.tensors() {
            assert!(t.bits_eq(a_again.tensor(name).unwrap()));
        }
        for (name, t) in b_then.tensors() {
            assert!(t.bits_eq(b_again.tensor(name).unwrap()));
        }
    }

    #[test]
    fn missing_mask_language_is_a_config_error() {
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 6).unwrap();
        let editor = Editor::new(EditorVariant::HyperNetMasked, &cfg, 1).unwrap();
        let mut req = request();
        req.language = 7;
        let mut tape = Tape::new();
        assert!(matches!(
            hypernet_edit(&cfg, &raw, &editor, &req, GatePlan::Deterministic, &mut tape),
            Err(EditorError::Config(_))
        ));
    }

    #[test]
    fn mask_gradients_match_finite_differences_through_an_edit() {
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 8).unwrap();
        let mut editor = Editor::new(EditorVariant::IdentityGMasked, &cfg, 2).unwrap();
        // A visible step size makes the downstream loss sensitive to the mask.
        for (name, _) in editor.editable_weights().to_vec() {
            editor.set_alpha(&name, 0.1).unwrap();
        }
        let req = request();
        let probe: Vec<usize> = vec![1, 6, 10, 14];
        let name = mask_param_name(req.language, &editor.editable_weights()[0].0, "x");
        // Keep pre-clamp values interior so the gate is differentiable.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let at = Tensor::row((0..cfg.hidden_size).map(|_| rng.gen_range(-1.2..1.2)).collect());

        let run = |logalpha: &Tensor, tape: &mut Tape, editor: &Editor| -> Tensor {
            let mut ed = editor.clone();
            ed.set_param(&name, logalpha.clone()).unwrap();
            let edited = hypernet_edit(&cfg, &raw, &ed, &req, GatePlan::Deterministic, tape).unwrap();
            let logits = forward_batch(&cfg, &edited, tape, &[probe.as_slice()]).unwrap();
            tape.softmax_cross_entropy(&logits, &[2]).unwrap()
        };

        let mut tape = Tape::new();
        let leaf = tape.leaf(&at);
        let loss = run(&leaf, &mut tape, &editor);
        tape.backward(&loss).unwrap();
        let analytic = tape.grad(&leaf).unwrap();
        let fd = finite_difference_gradient(
            &mut |t| {
                let mut tape = Tape::new();
                run(t, &mut tape, &editor).item()
            },
            &at,
            1e-5,
        );
        let denom = fd.data().iter().fold(1e-8f64, |a, &b| a.max(b.abs()));
        let rel = analytic.max_abs_diff(&fd) / denom;
        assert!(rel < 1e-5, "mask gradient relative error {rel:e}");
    }

    #[test]
    fn finetune_edit_stops_immediately_when_already_correct() {
        let cfg = tiny_cfg();
        let raw = ParameterSet::init(&cfg, 10).unwrap();
        let mut tape = Tape::new();
        let tokens = vec![1, 4, 8, 12];
        let logits = forward_batch(&cfg, &raw, &mut tape, &[tokens.as_slice()]).unwrap();
        let current = logits.argmax_rows()[0];
        let req = EditRequest {
            tokens,
            target: current,
            language: 0,
        };
        let (edited, steps) = finetune_edit(&cfg, &raw, &req, 100, 1e-2).unwrap();
        assert_eq!(steps, 0);
        assert_eq!(edited.content_hash(), raw.content_hash());
    }

    #[test]
    fn finetune_edit_flips_the_prediction() {
        let cfg = tiny_cfg();
        let mut raw = ParameterSet::init(&cfg, 11).unwrap();
        // A raw init's head is near-zero, which starves the editable weights
        // of logit influence; give the head a trained-model scale.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        raw.set(
            "head.w",
            Tensor::from_vec(
                cfg.hidden_size,
                cfg.num_labels,
                (0..cfg.hidden_size * cfg.num_labels)
                    .map(|_| 0.4 * normal(&mut rng))
                    .collect(),
            ),
        )
        .unwrap();
        let mut tape = Tape::new();
        let tokens = vec![1, 4, 8, 12];
        let logits = forward_batch(&cfg, &raw, &mut tape, &[tokens.as_slice()]).unwrap();
        let target = (logits.argmax_rows()[0] + 1) % cfg.num_labels;
        let req = EditRequest {
            tokens: tokens.clone(),
            target,
            language: 0,
        };
        let (edited, steps) = finetune_edit(&cfg, &raw, &req, 200, 1e-2).unwrap();
        assert!(steps > 0 && steps < 200, "took {steps} steps");
        let after = forward_batch(&cfg, &edited, &mut tape, &[tokens.as_slice()]).unwrap();
        assert_eq!(after.argmax_rows()[0], target);
        // Only editable weights moved.
        for (name, t) in raw.tensors() {
            let same = t.bits_eq(edited.tensor(name).unwrap());
            let editable = cfg.editable_weight_names().contains(name);
            assert_eq!(same, !editable, "{name} mutated unexpectedly");
        }
    }

    #[test]
    fn editor_checkpoint_inventory_is_validated() {
        let cfg = tiny_cfg();
        let editor = Editor::new(EditorVariant::HyperNetMasked, &cfg, 0).unwrap();
        let rebuilt =
            Editor::from_tensors(EditorVariant::HyperNetMasked, &cfg, editor.params().clone())
                .unwrap();
        assert_eq!(rebuilt.params().len(), editor.params().len());

        let mut missing = editor.params().clone();
        missing.shift_remove(&mask_param_name(0, "block.1.mlp.w1", "x"));
        assert!(Editor::from_tensors(EditorVariant::HyperNetMasked, &cfg, missing).is_err());

        assert!(Editor::from_tensors(EditorVariant::HyperNet, &cfg, editor.params().clone()).is_err());
    }
}
