//! Cross-lingual editing metrics and mask analysis.
//!
//! acc: how often an edit performed through x_e carries over to parallel
//! inputs. con: how often predictions on unrelated inputs survive the edit.
//! succ: their harmonic mean. The macro average runs one editing language at
//! a time against a mixed-language update set, then combines the averaged
//! acc/con — not the per-language succ values.
//!
//! Every edit gets its own RNG stream derived from (seed, edit index), so
//! results are independent of evaluation order and worker count.

use indexmap::IndexMap;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusConfig, CorpusError, Example, LanguageId, LanguageMode};
use crate::editors::{EditRequest, EditStrategy, Editor, EditorError};
use crate::model::{forward_batch, ModelConfig, ModelError, ParameterSet};
use crate::numerics::{NumericsError, Tape};

#[derive(Debug, Error)]
pub enum EvalError {
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
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Per edit, up to this many distinct update and retain examples each.
    pub samples_per_edit: usize,
    pub seed: u64,
    /// Dev-time cap on edits per editing language; None enumerates all.
    pub max_edits_per_language: Option<usize>,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            samples_per_edit: 8,
            seed: 0,
            max_edits_per_language: None,
            workers: 1,
        }
    }
}

/// One metric plus its bookkeeping.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScoredMetric {
    pub value: f64,
    /// Edits that contributed.
    pub evaluated: usize,
    /// Edits skipped for lack of candidates.
    pub skipped: usize,
    /// Total model queries behind `value`.
    pub draws: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub language: LanguageId,
    pub acc: f64,
    pub con: f64,
    pub succ: f64,
    pub num_edits: usize,
    pub skipped_edits: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc: f64,
    pub con: f64,
    pub succ: f64,
    pub per_language: Vec<LanguageMetrics>,
    pub num_edits: usize,
    pub skipped_edits: usize,
    pub update_draws: usize,
    pub retain_draws: usize,
}

/// Harmonic mean of acc and con; 0 when both vanish. Scale-invariant, so it
/// accepts fractions or percent alike.
pub fn success_rate(acc: f64, con: f64) -> f64 {
    if acc + con == 0.0 {
        0.0
    } else {
        2.0 * acc * con / (acc + con)
    }
}

/// The deduplicated update set with cached raw-model predictions.
struct UpdatePrep<'a> {
    examples: Vec<&'a Example>,
    by_class: IndexMap<usize, Vec<usize>>,
    raw_preds: Vec<usize>,
}

impl<'a> UpdatePrep<'a> {
    fn build(
        mcfg: &ModelConfig,
        raw: &ParameterSet,
        d_update: &[&'a Example],
    ) -> Result<UpdatePrep<'a>> {
        if d_update.is_empty() {
            return Err(EvalError::Config("empty update set".into()));
        }
        let mut examples: Vec<&Example> = Vec::new();
        let mut by_class: IndexMap<usize, Vec<usize>> = IndexMap::new();
        for &ex in d_update {
            // Sampling is over distinct members; duplicates are ignored.
            if examples.iter().any(|&e| e == ex) {
                continue;
            }
            by_class.entry(ex.class_id).or_default().push(examples.len());
            examples.push(ex);
        }
        let mut raw_preds = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(64) {
            let tokens: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
            let mut tape = Tape::new();
            let logits = forward_batch(mcfg, raw, &mut tape, &tokens)?;
            raw_preds.extend(logits.argmax_rows());
        }
        Ok(UpdatePrep {
            examples,
            by_class,
            raw_preds,
        })
    }
}

#[derive(Clone, Copy, Default)]
struct EditScore {
    acc: Option<f64>,
    con: Option<f64>,
    update_draws: usize,
    retain_draws: usize,
}

#[derive(Clone, Copy)]
enum Want {
    Acc,
    Con,
    Both,
}

/// Scores one edit: performs it through `edit_ex` with a drawn target label,
/// then probes parallel and unrelated members of the update set.
fn evaluate_one_edit(
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &(dyn EditStrategy + Sync),
    edit_ex: &Example,
    prep: &UpdatePrep<'_>,
    want: Want,
    opts: &EvalOptions,
    stream: u64,
) -> Result<EditScore> {
    let update_candidates: &[usize] = prep
        .by_class
        .get(&edit_ex.class_id)
        .map(Vec::as_slice)
        .unwrap_or(&[]);
    let mut score = EditScore::default();
    if update_candidates.is_empty() {
        log::warn!(
            "skipping edit on class {} ({:?}): no parallel members in the update set",
            edit_ex.class_id,
            edit_ex.tokens
        );
        return Ok(score);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    let pool = ccfg.edit_label_pool(edit_ex.class_id);
    let target = pool[rng.gen_range(0..pool.len())];

    let chosen_updates: Vec<usize> = if update_candidates.len() <= opts.samples_per_edit {
        update_candidates.to_vec()
    } else {
        index_sample(&mut rng, update_candidates.len(), opts.samples_per_edit)
            .iter()
            .map(|i| update_candidates[i])
            .collect()
    };

    let retain_candidates: Vec<usize> = (0..prep.examples.len())
        .filter(|&i| prep.examples[i].class_id != edit_ex.class_id)
        .collect();
    let chosen_retains: Vec<usize> = if matches!(want, Want::Acc) {
        Vec::new()
    } else if retain_candidates.len() <= opts.samples_per_edit {
        retain_candidates
    } else {
        index_sample(&mut rng, retain_candidates.len(), opts.samples_per_edit)
            .iter()
            .map(|i| retain_candidates[i])
            .collect()
    };

    let request = EditRequest {
        tokens: edit_ex.tokens.clone(),
        target,
        language: edit_ex.language,
    };
    let edited = editor.edit(mcfg, raw, &request)?;

    if !matches!(want, Want::Con) {
        let tokens: Vec<&[usize]> = chosen_updates
            .iter()
            .map(|&i| prep.examples[i].tokens.as_slice())
            .collect();
        let mut tape = Tape::new();
        let preds = forward_batch(mcfg, &edited, &mut tape, &tokens)?.argmax_rows();
        let hits = preds.iter().filter(|&&p| p == target).count();
        score.acc = Some(hits as f64 / preds.len() as f64);
        score.update_draws = preds.len();
    }
    if !matches!(want, Want::Acc) && !chosen_retains.is_empty() {
        let tokens: Vec<&[usize]> = chosen_retains
            .iter()
            .map(|&i| prep.examples[i].tokens.as_slice())
            .collect();
        let mut tape = Tape::new();
        let preds = forward_batch(mcfg, &edited, &mut tape, &tokens)?.argmax_rows();
        let kept = preds
            .iter()
            .zip(&chosen_retains)
            .filter(|&(&p, &i)| p == prep.raw_preds[i])
            .count();
        score.con = Some(kept as f64 / preds.len() as f64);
        score.retain_draws = preds.len();
    }
    Ok(score)
}

fn evaluate_slice(
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &(dyn EditStrategy + Sync),
    d_edit: &[&Example],
    prep: &UpdatePrep<'_>,
    want: Want,
    opts: &EvalOptions,
) -> Result<Vec<EditScore>> {
    if d_edit.is_empty() {
        return Err(EvalError::Config("empty edit set".into()));
    }
    let limit = opts.max_edits_per_language.unwrap_or(d_edit.len()).min(d_edit.len());
    let eval_one = |i: usize| {
        evaluate_one_edit(
            ccfg,
            mcfg,
            raw,
            editor,
            d_edit[i],
            prep,
            want,
            opts,
            i as u64,
        )
    };
    if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| EvalError::Config(format!("worker pool: {e}")))?;
        pool.install(|| (0..limit).into_par_iter().map(eval_one).collect())
    } else {
        (0..limit).map(eval_one).collect()
    }
}

fn reduce(scores: &[EditScore], pick: impl Fn(&EditScore) -> Option<f64>) -> (f64, usize, usize) {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in scores {
        if let Some(v) = pick(s) {
            sum += v;
            n += 1;
        }
    }
    let value = if n > 0 { sum / n as f64 } else { f64::NAN };
    (value, n, scores.len() - n)
}

/// Fraction of sampled parallel inputs whose post-edit prediction equals the
/// drawn target, averaged over edits.
pub fn editing_accuracy(
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &(dyn EditStrategy + Sync),
    d_edit: &[&Example],
    d_update: &[&Example],
    opts: &EvalOptions,
) -> Result<ScoredMetric> {
    let prep = UpdatePrep::build(mcfg, raw, d_update)?;
    let scores = evaluate_slice(ccfg, mcfg, raw, editor, d_edit, &prep, Want::Acc, opts)?;
    let (value, evaluated, skipped) = reduce(&scores, |s| s.acc);
    if evaluated == 0 {
        return Err(EvalError::Config(
            "every edit was skipped: the update set shares no classes with the edit set".into(),
        ));
    }
    Ok(ScoredMetric {
        value,
        evaluated,
        skipped,
        draws: scores.iter().map(|s| s.update_draws).sum(),
    })
}

/// Fraction of sampled unrelated inputs whose prediction survives the edit,
/// averaged over edits.
pub fn editing_consistency(
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &(dyn EditStrategy + Sync),
    d_edit: &[&Example],
    d_update: &[&Example],
    opts: &EvalOptions,
) -> Result<ScoredMetric> {
    let prep = UpdatePrep::build(mcfg, raw, d_update)?;
    let scores = evaluate_slice(ccfg, mcfg, raw, editor, d_edit, &prep, Want::Con, opts)?;
    let (value, evaluated, skipped) = reduce(&scores, |s| s.con);
    if evaluated == 0 {
        return Err(EvalError::Config(
            "every edit was skipped: no unrelated examples to probe retention on".into(),
        ));
    }
    Ok(ScoredMetric {
        value,
        evaluated,
        skipped,
        draws: scores.iter().map(|s| s.retain_draws).sum(),
    })
}

/// Full protocol: one editing language at a time over a mixed-language
/// update set; succ from the macro-averaged acc and con.
pub fn macro_average_eval(
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    raw: &ParameterSet,
    editor: &(dyn EditStrategy + Sync),
    dataset: &[&Example],
    opts: &EvalOptions,
) -> Result<MetricsRecord> {
    let prep = UpdatePrep::build(mcfg, raw, dataset)?;
    let mut languages: Vec<LanguageId> = Vec::new();
    for ex in &prep.examples {
        if !languages.contains(&ex.language) {
            languages.push(ex.language);
        }
    }
    languages.sort_unstable();

    let mut per_language = Vec::with_capacity(languages.len());
    let (mut update_draws, mut retain_draws) = (0usize, 0usize);
    for &lang in &languages {
        let d_l: Vec<&Example> = prep
            .examples
            .iter()
            .copied()
            .filter(|e| e.language == lang)
            .collect();
        let scores = evaluate_slice(ccfg, mcfg, raw, editor, &d_l, &prep, Want::Both, opts)?;
        let (acc, n_acc, skipped) = reduce(&scores, |s| s.acc);
        let (con, n_con, _) = reduce(&scores, |s| s.con);
        if n_acc == 0 || n_con == 0 {
            return Err(EvalError::Config(format!(
                "language {lang}: no edits could be scored"
            )));
        }
        update_draws += scores.iter().map(|s| s.update_draws).sum::<usize>();
        retain_draws += scores.iter().map(|s| s.retain_draws).sum::<usize>();
        per_language.push(LanguageMetrics {
            language: lang,
            acc,
            con,
            succ: success_rate(acc, con),
            num_edits: n_acc,
            skipped_edits: skipped,
        });
    }

    let k = per_language.len() as f64;
    let acc = per_language.iter().map(|r| r.acc).sum::<f64>() / k;
    let con = per_language.iter().map(|r| r.con).sum::<f64>() / k;
    Ok(MetricsRecord {
        acc,
        con,
        succ: success_rate(acc, con),
        num_edits: per_language.iter().map(|r| r.num_edits).sum(),
        skipped_edits: per_language.iter().map(|r| r.skipped_edits).sum(),
        update_draws,
        retain_draws,
        per_language,
    })
}

/// K×K cosine similarities between per-language gate vectors, each row
/// restricted to that row language's top coordinates. Row-dependent
/// selection makes the matrix asymmetric in general. `None` marks entries
/// where a restricted vector has zero norm.
pub fn mask_similarity_matrix(
    editor: &Editor,
    top_fraction: f64,
) -> Result<Vec<Vec<Option<f64>>>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(EvalError::Config(format!(
            "top_fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    let k = editor.num_languages();
    let vectors: Vec<Vec<f64>> = (0..k)
        .map(|l| editor.language_gate_vector(l))
        .collect::<std::result::Result<_, _>>()?;
    let dim = vectors[0].len();
    let keep = ((top_fraction * dim as f64).ceil() as usize).max(1);

    let mut matrix = vec![vec![None; k]; k];
    for l in 0..k {
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            vectors[l][b]
                .partial_cmp(&vectors[l][a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let selected = &order[..keep];
        for (m, other) in vectors.iter().enumerate() {
            let mut dot = 0.0;
            let mut norm_l = 0.0;
            let mut norm_m = 0.0;
            for &i in selected {
                dot += vectors[l][i] * other[i];
                norm_l += vectors[l][i] * vectors[l][i];
                norm_m += other[i] * other[i];
            }
            matrix[l][m] = if norm_l == 0.0 || norm_m == 0.0 {
                None
            } else {
                Some(dot / (norm_l.sqrt() * norm_m.sqrt()))
            };
        }
    }
    Ok(matrix)
}

/// The structured metrics document emitted by evaluation runs.
pub fn metrics_report(
    variant: &str,
    language_mode: &LanguageMode,
    seed: u64,
    record: &MetricsRecord,
    mask_similarity: Option<&[Vec<Option<f64>>]>,
) -> serde_json::Value {
    serde_json::json!({
        "variant": variant,
        "language_mode": language_mode,
        "seed": seed,
        "overall": { "acc": record.acc, "con": record.con, "succ": record.succ },
        "per_language": record.per_language,
        "counts": {
            "num_edits": record.num_edits,
            "skipped_edits": record.skipped_edits,
            "update_draws": record.update_draws,
            "retain_draws": record.retain_draws,
        },
        "mask_similarity": mask_similarity,
    })
}
