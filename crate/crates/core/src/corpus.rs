//! Synthetic parallel multilingual corpus with exact equivalence classes.
//!
//! Languages are token-level bijections plus a per-language permutation of the
//! template slots, so surface forms are genuinely distinct while parallelism
//! is known exactly: every rendering of the same (subject, relation) query
//! shares one class id. Fact mode labels each query with its object entity;
//! classification mode reuses the rendering with a uniform 3-way label.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Index into the language set 𝓛 = {0, …, K−1}.
pub type LanguageId = usize;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
/// Specials (PAD, CLS) shared by all languages.
const NUM_SPECIALS: usize = 2;
/// Template slots per sentence: subject, relation, filler.
const NUM_SLOTS: usize = 3;

const SLOT_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    /// Label = the query's object entity; the head ranges over all entities.
    Fact,
    /// Same rendering, uniform random 3-way label.
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_languages: usize,
    pub num_relations: usize,
    pub num_subjects: usize,
    pub objects_per_relation: usize,
    pub mode: CorpusMode,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_languages: 4,
            num_relations: 8,
            num_subjects: 120,
            objects_per_relation: 12,
            mode: CorpusMode::Fact,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_languages < 2 {
            return Err(CorpusError::Config(
                "num_languages must be at least 2 (cross-lingual setting)".into(),
            ));
        }
        if self.num_relations < 1 {
            return Err(CorpusError::Config("num_relations must be positive".into()));
        }
        if self.num_subjects < 3 {
            return Err(CorpusError::Config(
                "num_subjects must be at least 3 (splits need disjoint subjects)".into(),
            ));
        }
        if self.objects_per_relation < 2 {
            return Err(CorpusError::Config(
                "objects_per_relation must be at least 2 (editing needs an alternative label)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// One class per (subject, relation) query.
    pub fn num_classes(&self) -> usize {
        self.num_subjects * self.num_relations
    }

    /// Size of the label space C: the entity vocabulary in fact mode
    /// (subjects plus every relation's object pool), 3 in classification mode.
    pub fn num_labels(&self) -> usize {
        match self.mode {
            CorpusMode::Fact => self.num_subjects + self.num_relations * self.objects_per_relation,
            CorpusMode::Classification => 3,
        }
    }

    /// Surface tokens per language: subjects, relations, one filler word.
    fn lang_block(&self) -> usize {
        self.num_subjects + self.num_relations + 1
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + self.num_languages * self.lang_block()
    }

    /// Every sentence is CLS plus the three template slots.
    pub fn seq_len(&self) -> usize {
        1 + NUM_SLOTS
    }

    pub fn subject_token(&self, lang: LanguageId, subject: usize) -> usize {
        debug_assert!(lang < self.num_languages && subject < self.num_subjects);
        NUM_SPECIALS + lang * self.lang_block() + subject
    }

    pub fn relation_token(&self, lang: LanguageId, relation: usize) -> usize {
        debug_assert!(lang < self.num_languages && relation < self.num_relations);
        NUM_SPECIALS + lang * self.lang_block() + self.num_subjects + relation
    }

    pub fn filler_token(&self, lang: LanguageId) -> usize {
        debug_assert!(lang < self.num_languages);
        NUM_SPECIALS + lang * self.lang_block() + self.num_subjects + self.num_relations
    }

    /// Entity id of object `j` in relation `r`'s pool (fact-mode label space).
    pub fn object_entity(&self, relation: usize, j: usize) -> usize {
        debug_assert!(relation < self.num_relations && j < self.objects_per_relation);
        self.num_subjects + relation * self.objects_per_relation + j
    }

    /// The label candidates an edit may request for a class: the relation's
    /// object pool in fact mode, all three labels in classification mode.
    pub fn edit_label_pool(&self, class_id: usize) -> Vec<usize> {
        match self.mode {
            CorpusMode::Fact => {
                let relation = class_id % self.num_relations;
                (0..self.objects_per_relation)
                    .map(|j| self.object_entity(relation, j))
                    .collect()
            }
            CorpusMode::Classification => vec![0, 1, 2],
        }
    }

    pub fn class_id(&self, subject: usize, relation: usize) -> usize {
        subject * self.num_relations + relation
    }

    pub fn class_subject(&self, class_id: usize) -> usize {
        class_id / self.num_relations
    }

    pub fn class_relation(&self, class_id: usize) -> usize {
        class_id % self.num_relations
    }

    /// Inverse of the rendering: recovers (language, subject, relation) from a
    /// token sequence, or None if the tokens are not a well-formed sentence in
    /// a single language.
    pub fn decode(&self, tokens: &[usize]) -> Option<(LanguageId, usize, usize)> {
        if tokens.len() != self.seq_len() || tokens[0] != CLS {
            return None;
        }
        let block = self.lang_block();
        let mut lang = None;
        let mut subject = None;
        let mut relation = None;
        let mut filler = false;
        for &t in &tokens[1..] {
            if t < NUM_SPECIALS {
                return None;
            }
            let l = (t - NUM_SPECIALS) / block;
            let off = (t - NUM_SPECIALS) % block;
            if l >= self.num_languages || *lang.get_or_insert(l) != l {
                return None;
            }
            if off < self.num_subjects {
                if subject.replace(off).is_some() {
                    return None;
                }
            } else if off < self.num_subjects + self.num_relations {
                if relation.replace(off - self.num_subjects).is_some() {
                    return None;
                }
            } else {
                filler = true;
            }
        }
        match (lang, subject, relation, filler) {
            (Some(l), Some(s), Some(r), true) => Some((l, s, r)),
            _ => None,
        }
    }
}

/// An abstract fact: this subject stands in this relation to this object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactTriple {
    pub subject: usize,
    pub relation: usize,
    /// Entity id within the global label space.
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Equivalence-class id: members of I(x) share it.
    pub class_id: usize,
    pub language: LanguageId,
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    /// Class-major, language-minor order.
    pub examples: Vec<Example>,
    /// Per-language slot order for (subject, relation, filler).
    slot_perms: Vec<[usize; 3]>,
}

impl Corpus {
    /// The fact behind a class (fact mode reads the label off any member;
    /// classification mode has no object and returns None).
    pub fn fact(&self, class_id: usize) -> Option<FactTriple> {
        if self.config.mode != CorpusMode::Fact {
            return None;
        }
        let ex = &self.examples[class_id * self.config.num_languages];
        debug_assert_eq!(ex.class_id, class_id);
        Some(FactTriple {
            subject: self.config.class_subject(class_id),
            relation: self.config.class_relation(class_id),
            object: ex.label,
        })
    }
}

fn render(cfg: &CorpusConfig, perm: &[usize; 3], lang: LanguageId, s: usize, r: usize) -> Vec<usize> {
    let slots = [
        cfg.subject_token(lang, s),
        cfg.relation_token(lang, r),
        cfg.filler_token(lang),
    ];
    let mut tokens = Vec::with_capacity(cfg.seq_len());
    tokens.push(CLS);
    for &slot in perm {
        tokens.push(slots[slot]);
    }
    tokens
}

/// Deterministically generates the full parallel corpus for `cfg`.
pub fn generate_corpus(seed: u64, cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Assign each language a slot order; the first six are distinct.
    let mut perm_ids: Vec<usize> = (0..SLOT_PERMS.len()).collect();
    perm_ids.shuffle(&mut rng);
    let slot_perms: Vec<[usize; 3]> = (0..cfg.num_languages)
        .map(|l| SLOT_PERMS[perm_ids[l % SLOT_PERMS.len()]])
        .collect();

    let mut examples = Vec::with_capacity(cfg.num_classes() * cfg.num_languages);
    for s in 0..cfg.num_subjects {
        for r in 0..cfg.num_relations {
            let class_id = cfg.class_id(s, r);
            let label = match cfg.mode {
                CorpusMode::Fact => {
                    cfg.object_entity(r, rng.gen_range(0..cfg.objects_per_relation))
                }
                CorpusMode::Classification => rng.gen_range(0..3),
            };
            for lang in 0..cfg.num_languages {
                examples.push(Example {
                    class_id,
                    language: lang,
                    tokens: render(cfg, &slot_perms[lang], lang, s, r),
                    label,
                });
            }
        }
    }
    Ok(Corpus {
        config: *cfg,
        seed,
        examples,
        slot_perms,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCorpus {
    pub corpus: Corpus,
    pub split_seed: u64,
    /// Split per example, parallel to `corpus.examples`.
    assignment: Vec<Split>,
}

impl SplitCorpus {
    pub fn examples_in(&self, split: Split) -> Vec<&Example> {
        self.corpus
            .examples
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &s)| s == split)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.assignment[index]
    }

    pub fn subjects_in(&self, split: Split) -> BTreeSet<usize> {
        self.examples_in(split)
            .iter()
            .map(|e| self.corpus.config.class_subject(e.class_id))
            .collect()
    }

    /// Writes `corpus.jsonl` (one example per line) and `corpus.meta.json`
    /// (config and seeds) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::json!({
            "config": self.corpus.config,
            "seed": self.corpus.seed,
            "split_seed": self.split_seed,
        });
        std::fs::write(
            dir.join("corpus.meta.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        let mut w = BufWriter::new(File::create(dir.join("corpus.jsonl"))?);
        for (ex, split) in self.corpus.examples.iter().zip(&self.assignment) {
            let record = serde_json::json!({
                "class_id": ex.class_id,
                "language": ex.language,
                "tokens": ex.tokens,
                "label": ex.label,
                "split": split,
            });
            writeln!(w, "{record}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SplitCorpus> {
        #[derive(Deserialize)]
        struct Meta {
            config: CorpusConfig,
            seed: u64,
            split_seed: u64,
        }
        #[derive(Deserialize)]
        struct Record {
            class_id: usize,
            language: LanguageId,
            tokens: Vec<usize>,
            label: usize,
            split: Split,
        }
        let meta: Meta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("corpus.meta.json"))?)?;
        // Regenerate to recover the slot permutations, then verify the file
        // matches what the recorded seed produces.
        let regenerated = generate_corpus(meta.seed, &meta.config)?;
        let mut examples = Vec::new();
        let mut assignment = Vec::new();
        for line in BufReader::new(File::open(dir.join("corpus.jsonl"))?).lines() {
            let rec: Record = serde_json::from_str(&line?)?;
            examples.push(Example {
                class_id: rec.class_id,
                language: rec.language,
                tokens: rec.tokens,
                label: rec.label,
            });
            assignment.push(rec.split);
        }
        if examples != regenerated.examples {
            return Err(CorpusError::Contract(
                "corpus.jsonl does not match its recorded generation seed".into(),
            ));
        }
        Ok(SplitCorpus {
            corpus: regenerated,
            split_seed: meta.split_seed,
            assignment,
        })
    }
}

/// Splits 8:1:1 at the subject level: every class of a subject lands in that
/// subject's split, so no class (and no subject) straddles two splits.
pub fn split(corpus: Corpus, seed: u64) -> Result<SplitCorpus> {
    let s = corpus.config.num_subjects;
    if s < 3 {
        return Err(CorpusError::Config(
            "need at least 3 subjects for disjoint train/dev/test".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects: Vec<usize> = (0..s).collect();
    subjects.shuffle(&mut rng);
    let n_dev = (s / 10).max(1);
    let n_test = (s / 10).max(1);
    let mut table = vec![Split::Train; s];
    for &subj in &subjects[..n_dev] {
        table[subj] = Split::Dev;
    }
    for &subj in &subjects[n_dev..n_dev + n_test] {
        table[subj] = Split::Test;
    }
    let assignment = corpus
        .examples
        .iter()
        .map(|e| table[corpus.config.class_subject(e.class_id)])
        .collect();
    Ok(SplitCorpus {
        corpus,
        split_seed: seed,
        assignment,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "language")]
pub enum LanguageMode {
    Monolingual(LanguageId),
    CrossLingual,
}

/// One editing step's worth of data: the edit request plus sampled update and
/// retain examples.
#[derive(Clone, Debug)]
pub struct EditBatch {
    /// x_e: the example the edit is performed through; its language is l_e.
    pub edit: Example,
    /// y_e: the desired label.
    pub target: usize,
    /// x_u ∈ I(x_e), one per sampled updating language l_u.
    pub updates: Vec<Example>,
    /// x_r ∉ I(x_e), one per sampled retaining language l_r.
    pub retains: Vec<Example>,
}

/// Samples edit batches from one split. Indexes examples by (class, language)
/// — the corpus guarantees exactly one member per pair.
pub struct EditPool<'a> {
    config: &'a CorpusConfig,
    by_class_lang: IndexMap<(usize, LanguageId), &'a Example>,
    classes: Vec<usize>,
    languages: Vec<LanguageId>,
}

impl<'a> EditPool<'a> {
    pub fn new(config: &'a CorpusConfig, examples: &[&'a Example]) -> Result<EditPool<'a>> {
        if examples.is_empty() {
            return Err(CorpusError::Config("empty split".into()));
        }
        let mut by_class_lang = IndexMap::new();
        let mut classes = BTreeSet::new();
        let mut languages = BTreeSet::new();
        for &ex in examples {
            classes.insert(ex.class_id);
            languages.insert(ex.language);
            if by_class_lang.insert((ex.class_id, ex.language), ex).is_some() {
                return Err(CorpusError::Contract(format!(
                    "duplicate example for class {} language {}",
                    ex.class_id, ex.language
                )));
            }
        }
        let classes: Vec<usize> = classes.into_iter().collect();
        let languages: Vec<LanguageId> = languages.into_iter().collect();
        for &c in &classes {
            for &l in &languages {
                if !by_class_lang.contains_key(&(c, l)) {
                    return Err(CorpusError::Contract(format!(
                        "class {c} is missing language {l}"
                    )));
                }
            }
        }
        if classes.len() < 2 {
            return Err(CorpusError::Config(
                "need at least 2 classes to sample retain examples".into(),
            ));
        }
        Ok(EditPool {
            config,
            by_class_lang,
            classes,
            languages,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn languages(&self) -> &[LanguageId] {
        &self.languages
    }

    fn draw_language(&self, mode: LanguageMode, rng: &mut ChaCha8Rng) -> Result<LanguageId> {
        match mode {
            LanguageMode::Monolingual(l) => {
                if !self.languages.contains(&l) {
                    return Err(CorpusError::Config(format!(
                        "language {l} not present in this split"
                    )));
                }
                Ok(l)
            }
            LanguageMode::CrossLingual => {
                // A single-language pool consumes no randomness, so the
                // degenerate case coincides bit-for-bit with monolingual mode.
                if self.languages.len() == 1 {
                    Ok(self.languages[0])
                } else {
                    Ok(self.languages[rng.gen_range(0..self.languages.len())])
                }
            }
        }
    }

    /// Draws an edit batch: l_e, each l_u, and each l_r are independent
    /// uniform draws over the pool's languages (or all forced by monolingual
    /// mode); y_e is uniform over the class's label pool and may equal the
    /// current prediction.
    pub fn sample_edit_batch(
        &self,
        mode: LanguageMode,
        num_updates: usize,
        num_retains: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<EditBatch> {
        let l_e = self.draw_language(mode, rng)?;
        let class_idx = rng.gen_range(0..self.classes.len());
        let class_e = self.classes[class_idx];
        let edit = (*self.by_class_lang.get(&(class_e, l_e)).unwrap()).clone();

        let pool = self.config.edit_label_pool(class_e);
        let target = pool[rng.gen_range(0..pool.len())];

        let mut updates = Vec::with_capacity(num_updates);
        for _ in 0..num_updates {
            let l_u = self.draw_language(mode, rng)?;
            updates.push((*self.by_class_lang.get(&(class_e, l_u)).unwrap()).clone());
        }

        let mut retains = Vec::with_capacity(num_retains);
        for _ in 0..num_retains {
            let l_r = self.draw_language(mode, rng)?;
            // Uniform over classes other than the edit class.
            let mut idx = rng.gen_range(0..self.classes.len() - 1);
            if idx >= class_idx {
                idx += 1;
            }
            let class_r = self.classes[idx];
            retains.push((*self.by_class_lang.get(&(class_r, l_r)).unwrap()).clone());
        }

        Ok(EditBatch {
            edit,
            target,
            updates,
            retains,
        })
    }
}
