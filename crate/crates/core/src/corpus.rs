//! Grammar-driven synthetic captioning corpus.
//!
//! A scene is a (subject, action, object, adjective) tuple. Its context
//! feature `v` is the sum of fixed per-slot Gaussian embeddings plus a little
//! noise, its tag feature `w` is the multi-hot of the four content words,
//! and its references are expansions of several sentence templates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CrurError, Result};
use crate::tensor::Tensor;
use crate::tpr::EmbeddingTable;
use crate::training::normalize_embeddings;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PosTag {
    Det,
    Noun,
    Verb,
    Adp,
    Adj,
    End,
}

impl PosTag {
    pub const ALL: [PosTag; 6] = [
        PosTag::Det,
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adp,
        PosTag::Adj,
        PosTag::End,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PosTag::Det => "DET",
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adp => "ADP",
            PosTag::Adj => "ADJ",
            PosTag::End => "END",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosTag {
    type Err = CrurError;

    fn from_str(s: &str) -> Result<Self> {
        PosTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CrurError::Schema(format!("unknown POS label {s:?}")))
    }
}

pub const SUBJECTS: [&str; 6] = ["man", "woman", "boy", "girl", "dog", "cat"];
/// Verb with its fixed preposition.
pub const ACTIONS: [(&str, &str); 6] = [
    ("sits", "on"),
    ("stands", "near"),
    ("sleeps", "under"),
    ("plays", "with"),
    ("runs", "toward"),
    ("looks", "at"),
];
pub const OBJECTS: [&str; 8] = [
    "bench", "table", "tree", "ball", "car", "house", "chair", "box",
];
pub const ADJECTIVES: [&str; 6] = ["happy", "small", "big", "old", "young", "tired"];

/// One grammar slot of a template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Word(&'static str),
    Subject,
    Verb,
    Prep,
    Object,
    Adjective,
}

use Slot::{Adjective, Object, Prep, Subject, Verb, Word};

/// Simple, complex (subordinate clause) and compound sentence forms.
const TEMPLATES: [&[Slot]; 6] = [
    &[Word("a"), Subject, Verb, Prep, Word("the"), Object],
    &[Word("the"), Subject, Verb, Prep, Word("a"), Object],
    &[
        Word("a"),
        Adjective,
        Subject,
        Verb,
        Prep,
        Word("the"),
        Object,
    ],
    &[
        Word("the"),
        Adjective,
        Subject,
        Verb,
        Prep,
        Word("a"),
        Object,
    ],
    &[
        Word("the"),
        Subject,
        Verb,
        Prep,
        Word("the"),
        Object,
        Word("while"),
        Word("the"),
        Subject,
        Word("is"),
        Adjective,
    ],
    &[
        Word("the"),
        Subject,
        Word("is"),
        Adjective,
        Word("and"),
        Word("the"),
        Subject,
        Verb,
        Prep,
        Word("a"),
        Object,
    ],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scene {
    pub subject: usize,
    pub action: usize,
    pub object: usize,
    pub adjective: usize,
}

impl Scene {
    pub const COUNT: usize = SUBJECTS.len() * ACTIONS.len() * OBJECTS.len() * ADJECTIVES.len();

    pub fn from_index(mut i: usize) -> Scene {
        let adjective = i % ADJECTIVES.len();
        i /= ADJECTIVES.len();
        let object = i % OBJECTS.len();
        i /= OBJECTS.len();
        let action = i % ACTIONS.len();
        i /= ACTIONS.len();
        Scene {
            subject: i,
            action,
            object,
            adjective,
        }
    }
}

/// Word → tag map and sentence templates.
#[derive(Clone, Debug)]
pub struct Grammar {
    lexicon: BTreeMap<&'static str, PosTag>,
}

impl Default for Grammar {
    fn default() -> Self {
        let mut lexicon = BTreeMap::new();
        for w in ["a", "the"] {
            lexicon.insert(w, PosTag::Det);
        }
        for w in SUBJECTS.iter().chain(&OBJECTS) {
            lexicon.insert(*w, PosTag::Noun);
        }
        for (v, p) in ACTIONS {
            lexicon.insert(v, PosTag::Verb);
            lexicon.insert(p, PosTag::Adp);
        }
        lexicon.insert("is", PosTag::Verb);
        // Conjunctions share the adposition tag in the six-label set.
        lexicon.insert("while", PosTag::Adp);
        lexicon.insert("and", PosTag::Adp);
        for w in ADJECTIVES {
            lexicon.insert(w, PosTag::Adj);
        }
        Self { lexicon }
    }
}

impl Grammar {
    pub fn lexicon(&self) -> &BTreeMap<&'static str, PosTag> {
        &self.lexicon
    }

    pub fn tag(&self, word: &str) -> Option<PosTag> {
        self.lexicon.get(word).copied()
    }

    pub fn template_count(&self) -> usize {
        TEMPLATES.len()
    }

    /// Words and tags of template `t` filled with `scene`.
    pub fn expand(&self, t: usize, scene: &Scene) -> Result<(Vec<String>, Vec<PosTag>)> {
        let template = TEMPLATES
            .get(t)
            .ok_or_else(|| CrurError::Generation(format!("no template {t}")))?;
        let mut words = Vec::with_capacity(template.len());
        let mut tags = Vec::with_capacity(template.len());
        for slot in template.iter() {
            let w = match *slot {
                Word(w) => w,
                Subject => SUBJECTS[scene.subject],
                Verb => ACTIONS[scene.action].0,
                Prep => ACTIONS[scene.action].1,
                Object => OBJECTS[scene.object],
                Adjective => ADJECTIVES[scene.adjective],
            };
            let tag = self.tag(w).ok_or_else(|| {
                CrurError::Generation(format!("template word {w:?} missing from the lexicon"))
            })?;
            words.push(w.to_string());
            tags.push(tag);
        }
        Ok((words, tags))
    }

    /// Content words used as scene tags, in `w` index order.
    pub fn tag_words(&self) -> Vec<&'static str> {
        SUBJECTS
            .iter()
            .chain(ACTIONS.iter().map(|(v, _)| v))
            .chain(&OBJECTS)
            .chain(&ADJECTIVES)
            .copied()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub v_dim: usize,
    pub w_dim: usize,
    pub noise_std: f64,
    pub min_refs: usize,
    pub max_refs: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            v_dim: 64,
            w_dim: 32,
            noise_std: 0.05,
            min_refs: 3,
            max_refs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub refs: Vec<Vec<String>>,
    pub pos: Vec<Vec<PosTag>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    scene_id: u64,
    v: Vec<f64>,
    w: Vec<f64>,
    refs: Vec<Vec<String>>,
    pos: Vec<Vec<String>>,
}

impl SceneSample {
    fn to_record(&self) -> SampleRecord {
        SampleRecord {
            scene_id: self.scene_id,
            v: self.v.clone(),
            w: self.w.clone(),
            refs: self.refs.clone(),
            pos: self
                .pos
                .iter()
                .map(|p| p.iter().map(|t| t.name().to_string()).collect())
                .collect(),
        }
    }

    fn from_record(r: SampleRecord) -> Result<Self> {
        let pos = r
            .pos
            .iter()
            .map(|p| p.iter().map(|t| t.parse()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if r.refs.is_empty() {
            return Err(CrurError::Schema("sample has no references".into()));
        }
        if pos.len() != r.refs.len() || pos.iter().zip(&r.refs).any(|(p, w)| p.len() != w.len()) {
            return Err(CrurError::Schema(
                "pos labels must align with reference tokens".into(),
            ));
        }
        Ok(SceneSample {
            scene_id: r.scene_id,
            v: r.v,
            w: r.w,
            refs: r.refs,
            pos,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Corpus {
    pub fn split_names() -> [&'static str; 3] {
        ["train", "val", "test"]
    }

    pub fn splits(&self) -> [&[SceneSample]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Per-slot feature embeddings, fixed by the seed.
struct SlotEmbeddings {
    subjects: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    objects: Vec<Vec<f64>>,
    adjectives: Vec<Vec<f64>>,
}

impl SlotEmbeddings {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| normal.sample(&mut *rng)).collect())
                .collect()
        };
        Self {
            subjects: table(SUBJECTS.len()),
            actions: table(ACTIONS.len()),
            objects: table(OBJECTS.len()),
            adjectives: table(ADJECTIVES.len()),
        }
    }

    fn feature(&self, s: &Scene) -> Vec<f64> {
        let parts = [
            &self.subjects[s.subject],
            &self.actions[s.action],
            &self.objects[s.object],
            &self.adjectives[s.adjective],
        ];
        (0..parts[0].len())
            .map(|i| parts.iter().map(|p| p[i]).sum())
            .collect()
    }
}

/// Split sizes for an 8:1:1 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Draws `n` distinct scenes and splits them 8:1:1 by scene order.
pub fn generate_corpus(n: usize, seed: u64, cfg: &CorpusConfig) -> Result<Corpus> {
    let grammar = Grammar::default();
    if n < 10 {
        return Err(CrurError::Input(format!(
            "need at least 10 samples, got {n}"
        )));
    }
    if n > Scene::COUNT {
        return Err(CrurError::Generation(format!(
            "only {} distinct scenes exist",
            Scene::COUNT
        )));
    }
    let tag_words = grammar.tag_words();
    if cfg.w_dim < tag_words.len() || cfg.v_dim == 0 {
        return Err(CrurError::Generation(format!(
            "w_dim must cover the {} scene tags and v_dim must be positive",
            tag_words.len()
        )));
    }
    if cfg.min_refs == 0 || cfg.min_refs > cfg.max_refs || cfg.max_refs > grammar.template_count() {
        return Err(CrurError::Generation(format!(
            "reference counts must satisfy 1 <= min <= max <= {}",
            grammar.template_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = SlotEmbeddings::new(cfg.v_dim, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| CrurError::Parameter(e.to_string()))?;
    let scene_ids = sample(&mut rng, Scene::COUNT, n).into_vec();

    let mut samples = Vec::with_capacity(n);
    for (i, idx) in scene_ids.into_iter().enumerate() {
        let scene = Scene::from_index(idx);
        let v: Vec<f64> = slots
            .feature(&scene)
            .into_iter()
            .map(|x| x + noise.sample(&mut rng))
            .collect();
        let mut w = vec![0.0; cfg.w_dim];
        w[scene.subject] = 1.0;
        w[SUBJECTS.len() + scene.action] = 1.0;
        w[SUBJECTS.len() + ACTIONS.len() + scene.object] = 1.0;
        w[SUBJECTS.len() + ACTIONS.len() + OBJECTS.len() + scene.adjective] = 1.0;

        let count = rng.random_range(cfg.min_refs..=cfg.max_refs);
        let mut templates = sample(&mut rng, grammar.template_count(), count).into_vec();
        templates.sort_unstable();
        let mut refs = Vec::with_capacity(count);
        let mut pos = Vec::with_capacity(count);
        for t in templates {
            let (words, tags) = grammar.expand(t, &scene)?;
            refs.push(words);
            pos.push(tags);
        }
        samples.push(SceneSample {
            scene_id: i as u64,
            v,
            w,
            refs,
            pos,
        });
    }
    let (tr, va, _) = split_sizes(n);
    let test = samples.split_off(tr + va);
    let val = samples.split_off(tr);
    Ok(Corpus {
        train: samples,
        val,
        test,
    })
}

pub fn write_samples(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, &s.to_record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, split) in Corpus::split_names().iter().zip(corpus.splits()) {
        write_samples(&dir.join(format!("{name}.jsonl")), split)?;
    }
    Ok(())
}

/// Reads one JSON Lines split. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_corpus(path: &Path) -> Result<Vec<SceneSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| CrurError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let sample = SceneSample::from_record(record).map_err(|e| match e {
            CrurError::Schema(msg) => CrurError::Schema(format!("line {}: {msg}", i + 1)),
            other => other,
        })?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(CrurError::Input(format!(
            "{} contains no samples",
            path.display()
        )));
    }
    Ok(out)
}

/// Reads the three splits written by [`write_corpus`].
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    let load = |name: &str| load_corpus(&dir.join(format!("{name}.jsonl")));
    Ok(Corpus {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    })
}

/// Minimum number of occurrences for a word to get its own entry.
pub const MIN_WORD_COUNT: usize = 2;

/// Vocabulary of words seen at least twice (alphabetical after the
/// reserved tokens) and a mean-centred uniform(-0.08, 0.08) embedding table.
pub fn build_vocab<R: Rng + ?Sized>(
    samples: &[SceneSample],
    embed_dim: usize,
    rng: &mut R,
) -> Result<(Vocab, EmbeddingTable)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        for r in &s.refs {
            for w in r {
                *counts.entry(w.as_str()).or_insert(0) += 1;
            }
        }
    }
    let kept: BTreeSet<&str> = counts
        .iter()
        .filter(|(_, &c)| c >= MIN_WORD_COUNT)
        .map(|(w, _)| *w)
        .collect();
    let vocab = Vocab::new(kept.into_iter().map(String::from));
    let table = Tensor::uniform(&[vocab.len(), embed_dim], crate::cells::INIT_SCALE, rng);
    Ok((vocab, EmbeddingTable::new(normalize_embeddings(&table))?))
}
