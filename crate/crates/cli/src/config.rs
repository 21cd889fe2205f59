//! One flat TOML document drives every subcommand. Unknown keys are hard
//! errors so a typoed hyperparameter can't silently fall back to a default.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use edlab_core::corpus::{CorpusConfig, CorpusMode, LanguageMode, Split};
use edlab_core::editors::EditorVariant;
use edlab_core::evaluation::EvalOptions;
use edlab_core::model::ModelConfig;
use edlab_core::training::{EditorTrainConfig, LossWeights, PretrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub editor: EditorSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub languages: usize,
    pub relations: usize,
    pub subjects: usize,
    pub objects_per_relation: usize,
    pub mode: CorpusMode,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        CorpusSection {
            languages: c.num_languages,
            relations: c.num_relations,
            subjects: c.num_subjects,
            objects_per_relation: c.objects_per_relation,
            mode: c.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_editable_layers: usize,
    pub ff_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::for_corpus(&CorpusConfig::default());
        ModelSection {
            hidden_size: m.hidden_size,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            num_editable_layers: m.num_editable_layers,
            ff_size: m.ff_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_interval: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            log_interval: p.log_interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditorSection {
    /// finetune | hypernet | hypernet-masked | identity-g | identity-g-masked
    pub variant: String,
    /// "cross-lingual" or "monolingual:<language>"
    pub language_mode: String,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub num_updates: usize,
    pub num_retains: usize,
    pub lr_editor: f64,
    pub lr_masks: f64,
    pub grad_clip: f64,
    pub weight_rel: f64,
    pub weight_loc: f64,
    pub weight_mask: f64,
    /// Budget for the finetune baseline at evaluation time.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for EditorSection {
    fn default() -> Self {
        let t = EditorTrainConfig::default();
        let f = edlab_core::editors::FinetuneEditor::default();
        EditorSection {
            variant: "hypernet".into(),
            language_mode: "cross-lingual".into(),
            max_steps: t.max_steps,
            eval_interval: t.eval_interval,
            patience: t.patience,
            num_updates: t.num_updates,
            num_retains: t.num_retains,
            lr_editor: t.lr_editor,
            lr_masks: t.lr_masks,
            grad_clip: t.grad_clip,
            weight_rel: t.loss_weights.rel,
            weight_loc: t.loss_weights.loc,
            weight_mask: t.loss_weights.mask,
            finetune_steps: f.max_steps,
            finetune_lr: f.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples_per_edit: usize,
    /// Cap on edits per language for the *dev* evaluations during training;
    /// 0 means no cap. Final evaluation always enumerates the whole split.
    pub dev_edits_per_language: usize,
    /// train | dev | test
    pub split: String,
    /// Fraction of gate coordinates kept per row in the mask similarity.
    pub top_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples_per_edit: EvalOptions::default().samples_per_edit,
            dev_edits_per_language: 8,
            split: "test".into(),
            top_fraction: 0.01,
        }
    }
}

impl RunConfig {
    /// Reads the TOML file, or falls back to defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            num_languages: self.corpus.languages,
            num_relations: self.corpus.relations,
            num_subjects: self.corpus.subjects,
            objects_per_relation: self.corpus.objects_per_relation,
            mode: self.corpus.mode,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::for_corpus(&self.corpus_config());
        m.hidden_size = self.model.hidden_size;
        m.num_layers = self.model.num_layers;
        m.num_heads = self.model.num_heads;
        m.num_editable_layers = self.model.num_editable_layers;
        m.ff_size = self.model.ff_size;
        m
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            seed,
            log_interval: self.pretrain.log_interval,
        }
    }

    pub fn variant(&self) -> Result<EditorVariant> {
        self.editor.variant.parse().map_err(|e| {
            anyhow::anyhow!(
                "{e}; expected one of finetune, hypernet, hypernet-masked, identity-g, identity-g-masked"
            )
        })
    }

    pub fn language_mode(&self) -> Result<LanguageMode> {
        parse_language_mode(&self.editor.language_mode)
    }

    pub fn editor_train_config(&self, seed: u64) -> Result<EditorTrainConfig> {
        Ok(EditorTrainConfig {
            language_mode: self.language_mode()?,
            max_steps: self.editor.max_steps,
            eval_interval: self.editor.eval_interval,
            patience: self.editor.patience,
            num_updates: self.editor.num_updates,
            num_retains: self.editor.num_retains,
            lr_editor: self.editor.lr_editor,
            lr_masks: self.editor.lr_masks,
            grad_clip: self.editor.grad_clip,
            loss_weights: LossWeights {
                rel: self.editor.weight_rel,
                loc: self.editor.weight_loc,
                mask: self.editor.weight_mask,
            },
            seed,
        })
    }

    pub fn eval_split(&self) -> Result<Split> {
        match self.eval.split.as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => bail!("unknown eval split {other:?}; expected train, dev, or test"),
        }
    }

    /// Options for the final, full-enumeration evaluation.
    pub fn eval_options(&self, seed: u64, workers: usize) -> EvalOptions {
        EvalOptions {
            samples_per_edit: self.eval.samples_per_edit,
            seed,
            max_edits_per_language: None,
            workers,
        }
    }

    /// Options for the capped dev evaluations inside the training loop.
    pub fn dev_eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            samples_per_edit: self.eval.samples_per_edit,
            seed,
            max_edits_per_language: match self.eval.dev_edits_per_language {
                0 => None,
                n => Some(n),
            },
            workers: 1,
        }
    }
}

pub fn parse_language_mode(s: &str) -> Result<LanguageMode> {
    if s == "cross-lingual" {
        return Ok(LanguageMode::CrossLingual);
    }
    if let Some(rest) = s.strip_prefix("monolingual:") {
        let lang = rest
            .parse::<usize>()
            .with_context(|| format!("bad language index in language_mode {s:?}"))?;
        return Ok(LanguageMode::Monolingual(lang));
    }
    bail!("unknown language_mode {s:?}; expected \"cross-lingual\" or \"monolingual:<language>\"")
}
