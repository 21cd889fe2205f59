//! The raw multilingual classifier f(·;θ): a small pre-norm transformer with
//! taps exposing each editable MLP weight's input activation x and
//! output-gradient δ, plus `apply_delta` for building the edited model
//! f(·;θ_u).
//!
//! Layout: token+position embeddings feed `num_layers − N` blocks over the
//! full sequence, the sequence is mean-pooled, and the last N blocks (the ones
//! whose MLP weights are editable) run on the pooled length-1 sequence. Each
//! editable weight therefore receives exactly one (x, δ) pair per example and
//! the rank-1 reconstruction Σ xᵀδ reproduces ∇_W exactly.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input: {0}")]
    Input(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_languages: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    /// N: how many of the last blocks have editable MLP weights.
    pub num_editable_layers: usize,
    /// C: label-space size (entity vocabulary in fact mode, 3 in
    /// classification mode).
    pub num_labels: usize,
    /// MLP inner width.
    pub ff_size: usize,
}

impl ModelConfig {
    pub fn for_corpus(corpus: &crate::corpus::CorpusConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: corpus.vocab_size(),
            num_languages: corpus.num_languages,
            hidden_size: 64,
            num_layers: 4,
            num_heads: 4,
            max_seq_len: corpus.seq_len(),
            num_editable_layers: 2,
            num_labels: corpus.num_labels(),
            ff_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(ModelError::Contract(format!(
                "hidden_size {} must be a positive multiple of num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.num_editable_layers < 1 || self.num_editable_layers > self.num_layers {
            return Err(ModelError::Contract(format!(
                "num_editable_layers {} must lie in [1, {}]",
                self.num_editable_layers, self.num_layers
            )));
        }
        if self.vocab_size < 2 || self.num_labels < 2 || self.max_seq_len == 0 || self.ff_size == 0
        {
            return Err(ModelError::Contract("degenerate model config".into()));
        }
        Ok(())
    }

    /// Index of the first block that runs on the pooled representation (all
    /// blocks from here on are the editable ones).
    pub fn first_editable_block(&self) -> usize {
        self.num_layers - self.num_editable_layers
    }

    /// Canonical name → shape table; iteration order is the canonical order.
    pub fn param_shapes(&self) -> IndexMap<String, [usize; 2]> {
        let h = self.hidden_size;
        let mut shapes = IndexMap::new();
        shapes.insert("embed.token".into(), [self.vocab_size, h]);
        shapes.insert("embed.pos".into(), [self.max_seq_len, h]);
        for i in 0..self.num_layers {
            shapes.insert(format!("block.{i}.ln1.gamma"), [1, h]);
            shapes.insert(format!("block.{i}.ln1.beta"), [1, h]);
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.insert(format!("block.{i}.attn.{w}"), [h, h]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                shapes.insert(format!("block.{i}.attn.{b}"), [1, h]);
            }
            shapes.insert(format!("block.{i}.ln2.gamma"), [1, h]);
            shapes.insert(format!("block.{i}.ln2.beta"), [1, h]);
            shapes.insert(format!("block.{i}.mlp.w1"), [h, self.ff_size]);
            shapes.insert(format!("block.{i}.mlp.b1"), [1, self.ff_size]);
            shapes.insert(format!("block.{i}.mlp.w2"), [self.ff_size, h]);
            shapes.insert(format!("block.{i}.mlp.b2"), [1, h]);
        }
        shapes.insert("ln_f.gamma".into(), [1, h]);
        shapes.insert("ln_f.beta".into(), [1, h]);
        shapes.insert("head.w".into(), [h, self.num_labels]);
        shapes.insert("head.b".into(), [1, self.num_labels]);
        shapes
    }

    /// The editable weights, in canonical order: the MLP matrices of the last
    /// N blocks. Nothing else is ever updated by an editor.
    pub fn editable_weight_names(&self) -> Vec<String> {
        (self.first_editable_block()..self.num_layers)
            .flat_map(|i| [format!("block.{i}.mlp.w1"), format!("block.{i}.mlp.w2")])
            .collect()
    }
}

/// θ (or θ_u): ordered map from canonical parameter name to tensor.
#[derive(Clone)]
pub struct ParameterSet {
    map: IndexMap<String, Tensor>,
}

impl ParameterSet {
    /// Fresh seeded initialization. Weights are N(0, 0.02²); biases and the
    /// output head start at zero, so an untrained model emits uniform logits;
    /// layer-norm gains start at one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = IndexMap::new();
        for (name, shape) in cfg.param_shapes() {
            let n = shape[0] * shape[1];
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".beta")
                || name.contains(".b")
                || name.starts_with("head.")
            {
                vec![0.0; n]
            } else {
                (0..n).map(|_| INIT_STD * normal(&mut rng)).collect()
            };
            map.insert(name, Tensor::from_vec(shape[0], shape[1], data));
        }
        Ok(ParameterSet { map })
    }

    /// Wraps loaded tensors, verifying the name set and shapes against the
    /// config so checkpoint/config mismatches fail loudly.
    pub fn from_tensors(cfg: &ModelConfig, tensors: IndexMap<String, Tensor>) -> Result<ParameterSet> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        for (name, shape) in &shapes {
            match tensors.get(name) {
                None => return Err(ModelError::MissingParam(name.clone())),
                Some(t) if t.shape() != *shape => {
                    return Err(ModelError::Contract(format!(
                        "parameter {name:?} has shape {:?}, config requires {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        for name in tensors.keys() {
            if !shapes.contains_key(name) {
                return Err(ModelError::Contract(format!(
                    "unexpected parameter {name:?} for this config"
                )));
            }
        }
        let mut map = IndexMap::new();
        for name in shapes.keys() {
            map.insert(name.clone(), tensors[name].clone());
        }
        Ok(ParameterSet { map })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Replaces one tensor, keeping the shape fixed.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::Contract(format!(
                "cannot replace {name:?}: shape {:?} != {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.map
    }

    /// Order-independent content hash, for immutability checks.
    pub fn content_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in &self.map {
            name.hash(&mut hasher);
            t.shape().hash(&mut hasher);
            for v in t.data() {
                v.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Tracked handles captured while a block's MLP runs, from which taps and
/// per-weight gradients are read after backward.
struct TapSite {
    block: usize,
    /// Input to w1 (the second layer-norm's output).
    x1: Tensor,
    /// Pre-activation output of w1.
    pre1: Tensor,
    /// Input to w2 (post-relu activation).
    x2: Tensor,
    /// Pre-activation output of w2.
    pre2: Tensor,
}

/// Per-editable-weight tap: stacked per-example input activations (B×n) and
/// backward signals (B×m) for a weight W of shape n×m. Detached — the editor
/// consumes these as constants.
#[derive(Clone, Debug)]
pub struct LayerTap {
    pub name: String,
    pub x: Tensor,
    pub delta: Tensor,
}

/// Result of `forward_with_taps`.
pub struct TapForward {
    pub loss: f64,
    /// B×C, detached.
    pub logits: Tensor,
    /// Canonical editable order (block ascending, w1 before w2).
    pub taps: Vec<LayerTap>,
    /// Autodiff gradient ∇_W L per editable weight.
    pub weight_grads: IndexMap<String, Tensor>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
        return Err(ModelError::Input(format!(
            "sequence length {} outside [1, {}]",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::Input(format!(
            "token id {t} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn block_forward(
    cfg: &ModelConfig,
    params: &ParameterSet,
    tape: &mut Tape,
    x: &Tensor,
    i: usize,
    sites: Option<&mut Vec<TapSite>>,
) -> Result<Tensor> {
    let p = |suffix: &str| format!("block.{i}.{suffix}");
    let a_in = tape.layer_norm(
        x,
        params.tensor(&p("ln1.gamma"))?,
        params.tensor(&p("ln1.beta"))?,
        LN_EPS,
    )?;

    let project = |tape: &mut Tape, w: &str, b: &str| -> Result<Tensor> {
        let prod = tape.matmul(&a_in, params.tensor(&p(w))?)?;
        Ok(tape.add_row(&prod, params.tensor(&p(b))?)?)
    };
    let q = project(tape, "attn.wq", "attn.bq")?;
    let k = project(tape, "attn.wk", "attn.bk")?;
    let v = project(tape, "attn.wv", "attn.bv")?;

    let dh = cfg.hidden_size / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.num_heads);
    for hd in 0..cfg.num_heads {
        let (lo, hi) = (hd * dh, (hd + 1) * dh);
        let qh = tape.slice_cols(&q, lo, hi)?;
        let kh = tape.slice_cols(&k, lo, hi)?;
        let vh = tape.slice_cols(&v, lo, hi)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scores = tape.scale(&scores, scale)?;
        let attn = tape.softmax_rows(&scores)?;
        head_outs.push(tape.matmul(&attn, &vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let merged = tape.concat_cols(&refs)?;
    let proj = tape.matmul(&merged, params.tensor(&p("attn.wo"))?)?;
    let proj = tape.add_row(&proj, params.tensor(&p("attn.bo"))?)?;
    let x = tape.add(x, &proj)?;

    let m_in = tape.layer_norm(
        &x,
        params.tensor(&p("ln2.gamma"))?,
        params.tensor(&p("ln2.beta"))?,
        LN_EPS,
    )?;
    let pre1 = tape.matmul(&m_in, params.tensor(&p("mlp.w1"))?)?;
    let pre1 = tape.add_row(&pre1, params.tensor(&p("mlp.b1"))?)?;
    let act = tape.relu(&pre1)?;
    let pre2 = tape.matmul(&act, params.tensor(&p("mlp.w2"))?)?;
    let pre2 = tape.add_row(&pre2, params.tensor(&p("mlp.b2"))?)?;
    let out = tape.add(&x, &pre2)?;
    if let Some(sites) = sites {
        sites.push(TapSite {
            block: i,
            x1: m_in,
            pre1,
            x2: act,
            pre2,
        });
    }
    Ok(out)
}

fn forward_example(
    cfg: &ModelConfig,
    params: &ParameterSet,
    tape: &mut Tape,
    tokens: &[usize],
    mut sites: Option<&mut Vec<TapSite>>,
) -> Result<Tensor> {
    check_tokens(cfg, tokens)?;
    let tok = tape.embedding(params.tensor("embed.token")?, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.embedding(params.tensor("embed.pos")?, &positions)?;
    let mut x = tape.add(&tok, &pos)?;
    for i in 0..cfg.first_editable_block() {
        x = block_forward(cfg, params, tape, &x, i, None)?;
    }
    let mut pooled = tape.mean_rows(&x)?;
    for i in cfg.first_editable_block()..cfg.num_layers {
        pooled = block_forward(cfg, params, tape, &pooled, i, sites.as_deref_mut())?;
    }
    let out = tape.layer_norm(
        &pooled,
        params.tensor("ln_f.gamma")?,
        params.tensor("ln_f.beta")?,
        LN_EPS,
    )?;
    let logits = tape.matmul(&out, params.tensor("head.w")?)?;
    Ok(tape.add_row(&logits, params.tensor("head.b")?)?)
}

/// Batched forward pass: logits row per input sequence. Gradients are tracked
/// exactly where `params` contains tracked tensors; a fully detached
/// ParameterSet records nothing on the tape.
pub fn forward_batch(
    cfg: &ModelConfig,
    params: &ParameterSet,
    tape: &mut Tape,
    batch: &[&[usize]],
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(ModelError::Input("empty batch".into()));
    }
    let mut rows = Vec::with_capacity(batch.len());
    for tokens in batch {
        rows.push(forward_example(cfg, params, tape, tokens, None)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok(tape.concat_rows(&refs)?)
}

/// Stacks detached 1×n rows into a B×n tensor.
fn stack_rows(rows: &[Tensor]) -> Tensor {
    let cols = rows[0].cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        debug_assert_eq!(r.shape(), [1, cols]);
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(rows.len(), cols, data)
}

/// Computes L_task on the batch and extracts per-editable-weight taps.
///
/// Only the editable weights are tracked, so the backward pass reaches exactly
/// the tensors the taps need. Everything returned is detached: the edit
/// machinery treats (x, δ) as constants.
pub fn forward_with_taps(
    cfg: &ModelConfig,
    params: &ParameterSet,
    batch: &[&[usize]],
    targets: &[usize],
) -> Result<TapForward> {
    if batch.len() != targets.len() {
        return Err(ModelError::Input(format!(
            "{} sequences but {} targets",
            batch.len(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let mut tracked = params.clone();
    let editable = cfg.editable_weight_names();
    for name in &editable {
        let leaf = tape.leaf(params.tensor(name)?);
        tracked.set(name, leaf)?;
    }

    let mut logits_rows = Vec::with_capacity(batch.len());
    let mut per_example_sites: Vec<Vec<TapSite>> = Vec::with_capacity(batch.len());
    for tokens in batch {
        let mut sites = Vec::with_capacity(cfg.num_editable_layers);
        logits_rows.push(forward_example(cfg, &tracked, &mut tape, tokens, Some(&mut sites))?);
        per_example_sites.push(sites);
    }
    let refs: Vec<&Tensor> = logits_rows.iter().collect();
    let logits = tape.concat_rows(&refs)?;
    let loss = tape.softmax_cross_entropy(&logits, targets)?;
    tape.backward(&loss)?;

    let mut taps = Vec::with_capacity(editable.len());
    for (j, block) in (cfg.first_editable_block()..cfg.num_layers).enumerate() {
        for half in 0..2 {
            let name = format!("block.{block}.mlp.w{}", half + 1);
            let mut xs = Vec::with_capacity(batch.len());
            let mut deltas = Vec::with_capacity(batch.len());
            for sites in &per_example_sites {
                let site = &sites[j];
                debug_assert_eq!(site.block, block);
                let (x, pre) = if half == 0 {
                    (&site.x1, &site.pre1)
                } else {
                    (&site.x2, &site.pre2)
                };
                xs.push(x.detach());
                deltas.push(tape.grad(pre).ok_or_else(|| {
                    ModelError::Contract(format!("no backward signal recorded for {name:?}"))
                })?);
            }
            taps.push(LayerTap {
                name,
                x: stack_rows(&xs),
                delta: stack_rows(&deltas),
            });
        }
    }

    let mut weight_grads = IndexMap::new();
    for name in &editable {
        let g = tape
            .grad(tracked.tensor(name)?)
            .expect("editable weights are tracked");
        weight_grads.insert(name.clone(), g);
    }

    Ok(TapForward {
        loss: loss.item(),
        logits: logits.detach(),
        taps,
        weight_grads,
    })
}

/// θ_u = θ + delta per named weight. Untouched tensors are shared, touched
/// ones go through the tape so gradients flow into tracked deltas. The input
/// set is never mutated.
pub fn apply_delta(
    params: &ParameterSet,
    deltas: &IndexMap<String, Tensor>,
    tape: &mut Tape,
) -> Result<ParameterSet> {
    for (name, d) in deltas {
        let w = params.map.get(name).ok_or_else(|| {
            ModelError::Contract(format!("delta for unknown parameter {name:?}"))
        })?;
        if w.shape() != d.shape() {
            return Err(ModelError::Contract(format!(
                "delta for {name:?} has shape {:?}, parameter is {:?}",
                d.shape(),
                w.shape()
            )));
        }
    }
    let mut map = IndexMap::with_capacity(params.map.len());
    for (name, w) in &params.map {
        match deltas.get(name) {
            Some(d) => {
                map.insert(name.clone(), tape.add(w, d)?);
            }
            None => {
                map.insert(name.clone(), w.clone());
            }
        }
    }
    Ok(ParameterSet { map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            num_languages: 2,
            hidden_size: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 4,
            num_editable_layers: 1,
            num_labels: 5,
            ff_size: 12,
        }
    }

    fn batch4() -> Vec<Vec<usize>> {
        vec![
            vec![1, 2, 3, 4],
            vec![1, 5, 6, 7],
            vec![1, 8, 9, 10],
            vec![1, 11, 12, 2],
        ]
    }

    #[test]
    fn fresh_model_emits_uniform_logits() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let logits = forward_batch(&cfg, &params, &mut tape, &[&[1, 2, 3]]).unwrap();
        let first = logits.at(0, 0);
        for c in 0..cfg.num_labels {
            assert_eq!(logits.at(0, c), first);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 1).unwrap();
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = forward_batch(&cfg, &params, &mut t1, &[&[1, 2, 3, 4]]).unwrap();
        let b = forward_batch(&cfg, &params, &mut t2, &[&[1, 2, 3, 4]]).unwrap();
        assert!(a.bits_eq(&b));
        // Detached parameters record nothing.
        assert_eq!(t1.num_records(), 0);
    }

    #[test]
    fn oversize_and_out_of_vocab_inputs_error() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            forward_batch(&cfg, &params, &mut tape, &[&[1, 2, 3, 4, 5]]),
            Err(ModelError::Input(_))
        ));
        assert!(matches!(
            forward_batch(&cfg, &params, &mut tape, &[&[1, 99]]),
            Err(ModelError::Input(_))
        ));
    }

    #[test]
    fn tap_identity_reconstructs_weight_gradients() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 7).unwrap();
        let batch = batch4();
        let refs: Vec<&[usize]> = batch.iter().map(|v| v.as_slice()).collect();
        let tf = forward_with_taps(&cfg, &params, &refs, &[0, 1, 2, 3]).unwrap();
        assert_eq!(tf.taps.len(), 2);
        for tap in &tf.taps {
            let mut tape = Tape::new();
            let xt = tape.transpose(&tap.x).unwrap();
            let recon = tape.matmul(&xt, &tap.delta).unwrap();
            let grad = &tf.weight_grads[&tap.name];
            let diff = recon.max_abs_diff(grad);
            assert!(diff < 1e-9, "{}: Σ xᵀδ differs from ∇_W by {diff:e}", tap.name);
        }
    }

    #[test]
    fn tap_identity_holds_for_a_single_example() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 8).unwrap();
        let tf = forward_with_taps(&cfg, &params, &[&[1, 2, 3]], &[4]).unwrap();
        for tap in &tf.taps {
            let mut tape = Tape::new();
            let xt = tape.transpose(&tap.x).unwrap();
            let recon = tape.matmul(&xt, &tap.delta).unwrap();
            assert!(recon.max_abs_diff(&tf.weight_grads[&tap.name]) < 1e-9);
        }
    }

    #[test]
    fn saturated_target_gives_vanishing_taps() {
        let cfg = tiny_cfg();
        let mut params = ParameterSet::init(&cfg, 3).unwrap();
        // Pin the head so class 2 wins by a huge margin regardless of input.
        let mut b = vec![0.0; cfg.num_labels];
        b[2] = 50.0;
        params.set("head.b", Tensor::row(b)).unwrap();
        let tf = forward_with_taps(&cfg, &params, &[&[1, 2, 3]], &[2]).unwrap();
        assert!(tf.loss < 1e-9);
        for tap in &tf.taps {
            assert!(tap.delta.data().iter().all(|v| v.abs() < 1e-9));
            let mut tape = Tape::new();
            let xt = tape.transpose(&tap.x).unwrap();
            let recon = tape.matmul(&xt, &tap.delta).unwrap();
            assert!(recon.data().iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn apply_delta_empty_is_identity_and_nonmutating() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 5).unwrap();
        let before = params.content_hash();
        let mut tape = Tape::new();
        let edited = apply_delta(&params, &IndexMap::new(), &mut tape).unwrap();
        let mut t1 = Tape::new();
        let a = forward_batch(&cfg, &params, &mut t1, &[&[1, 2]]).unwrap();
        let b = forward_batch(&cfg, &edited, &mut t1, &[&[1, 2]]).unwrap();
        assert!(a.bits_eq(&b));
        assert_eq!(params.content_hash(), before);
    }

    #[test]
    fn apply_delta_can_zero_a_weight() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 5).unwrap();
        let name = "block.1.mlp.w1";
        let w = params.tensor(name).unwrap();
        let neg: Tensor = {
            let mut tape = Tape::new();
            tape.scale(w, -1.0).unwrap()
        };
        let mut deltas = IndexMap::new();
        deltas.insert(name.to_string(), neg);
        let mut tape = Tape::new();
        let edited = apply_delta(&params, &deltas, &mut tape).unwrap();
        assert!(edited.tensor(name).unwrap().data().iter().all(|&v| v == 0.0));
        // Untouched weights share the same buffer rather than copying.
        assert!(edited.tensor("head.w").unwrap().bits_eq(params.tensor("head.w").unwrap()));
    }

    #[test]
    fn apply_delta_rejects_unknown_names_and_bad_shapes() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 5).unwrap();
        let mut tape = Tape::new();
        let mut deltas = IndexMap::new();
        deltas.insert("block.9.mlp.w1".to_string(), Tensor::zeros(8, 12));
        assert!(matches!(
            apply_delta(&params, &deltas, &mut tape),
            Err(ModelError::Contract(_))
        ));
        deltas.clear();
        deltas.insert("block.1.mlp.w1".to_string(), Tensor::zeros(3, 3));
        assert!(matches!(
            apply_delta(&params, &deltas, &mut tape),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn gradient_through_apply_delta_matches_finite_differences() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 9).unwrap();
        let name = "block.1.mlp.w2";
        let at = Tensor::zeros(cfg.ff_size, cfg.hidden_size);
        let run = |tape: &mut Tape, d: &Tensor| {
            let mut deltas = IndexMap::new();
            deltas.insert(name.to_string(), d.clone(), );
            let edited = apply_delta(&params, &deltas, tape).unwrap();
            let logits = forward_batch(&cfg, &edited, tape, &[&[1, 2, 3], &[1, 4, 5]]).unwrap();
            tape.softmax_cross_entropy(&logits, &[0, 3]).unwrap()
        };
        let mut tape = Tape::new();
        let d = tape.leaf(&at);
        let loss = run(&mut tape, &d);
        tape.backward(&loss).unwrap();
        let analytic = tape.grad(&d).unwrap();
        let fd = finite_difference_gradient(
            &mut |t| {
                let mut tape = Tape::new();
                run(&mut tape, t).item()
            },
            &at,
            1e-5,
        );
        let diff = analytic.max_abs_diff(&fd);
        assert!(diff < 1e-6, "delta gradient off by {diff:e}");
    }

    #[test]
    fn parameter_set_round_trips_through_tensor_map() {
        let cfg = tiny_cfg();
        let params = ParameterSet::init(&cfg, 4).unwrap();
        let rebuilt = ParameterSet::from_tensors(&cfg, params.tensors().clone()).unwrap();
        assert_eq!(rebuilt.content_hash(), params.content_hash());

        let mut missing = params.tensors().clone();
        missing.shift_remove("head.w");
        assert!(matches!(
            ParameterSet::from_tensors(&cfg, missing),
            Err(ModelError::MissingParam(_))
        ));

        let mut extra = params.tensors().clone();
        extra.insert("rogue".into(), Tensor::zeros(1, 1));
        assert!(matches!(
            ParameterSet::from_tensors(&cfg, extra),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn editable_set_is_the_last_n_blocks_mlps() {
        let cfg = ModelConfig {
            num_layers: 4,
            num_editable_layers: 2,
            ..tiny_cfg()
        };
        assert_eq!(
            cfg.editable_weight_names(),
            vec![
                "block.2.mlp.w1".to_string(),
                "block.2.mlp.w2".to_string(),
                "block.3.mlp.w1".to_string(),
                "block.3.mlp.w2".to_string(),
            ]
        );
    }
}
