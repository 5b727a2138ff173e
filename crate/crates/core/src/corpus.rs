//! Video samples, the corpus file format, and the synthetic world generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Category, Lexicon, LexiconEntry, LexiconError, TokenId, BOS_SURFACE, EOS_SURFACE};

pub type InstanceId = usize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample {sample}: {message}")]
    Invalid { sample: String, message: String },
    #[error("invalid world config: {0}")]
    Config(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// Relation triple: an action verb with its subject and object instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relation {
    pub verb: TokenId,
    pub subject: InstanceId,
    pub object: InstanceId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub sample_id: String,
    pub split: Split,
    /// Per-instance frame features, all of equal frame count.
    pub tracklets: BTreeMap<InstanceId, Vec<Vec<f64>>>,
    pub caption: Vec<TokenId>,
    pub gt_objects: BTreeSet<(TokenId, InstanceId)>,
    pub gt_actions: Vec<Relation>,
}

impl VideoSample {
    pub fn object_tokens(&self) -> BTreeSet<TokenId> {
        self.gt_objects.iter().map(|&(t, _)| t).collect()
    }

    pub fn action_tokens(&self) -> BTreeSet<TokenId> {
        self.gt_actions.iter().map(|r| r.verb).collect()
    }

    /// Token naming an instance (first match in `gt_objects`).
    pub fn instance_token(&self, inst: InstanceId) -> Option<TokenId> {
        self.gt_objects.iter().find(|&&(_, i)| i == inst).map(|&(t, _)| t)
    }

    pub fn num_frames(&self) -> usize {
        self.tracklets.values().next().map(Vec::len).unwrap_or(0)
    }

    fn invalid(&self, message: impl Into<String>) -> CorpusError {
        CorpusError::Invalid {
            sample: self.sample_id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self, lexicon: &Lexicon) -> Result<(), CorpusError> {
        let frames = self.num_frames();
        let mut dim = None;
        for (inst, seq) in &self.tracklets {
            if seq.len() != frames || frames == 0 {
                return Err(self.invalid(format!("tracklet {inst} has {} frames, expected {frames}", seq.len())));
            }
            for frame in seq {
                if *dim.get_or_insert(frame.len()) != frame.len() || frame.is_empty() {
                    return Err(self.invalid(format!("tracklet {inst} has inconsistent feature dimension")));
                }
                if frame.iter().any(|v| !v.is_finite()) {
                    return Err(self.invalid(format!("tracklet {inst} has non-finite values")));
                }
            }
        }
        for &t in &self.caption {
            if !lexicon.contains(t) {
                return Err(self.invalid(format!("caption references unknown token id {t}")));
            }
        }
        for &(t, inst) in &self.gt_objects {
            if lexicon.category(t).map_err(|_| self.invalid(format!("unknown token id {t}")))? != Category::Object {
                return Err(self.invalid(format!("object annotation {t} is not an object token")));
            }
            if !self.tracklets.contains_key(&inst) {
                return Err(self.invalid(format!("object instance {inst} has no tracklet")));
            }
        }
        for r in &self.gt_actions {
            if lexicon.category(r.verb).map_err(|_| self.invalid(format!("unknown token id {}", r.verb)))? != Category::Action {
                return Err(self.invalid(format!("action annotation {} is not an action token", r.verb)));
            }
            for inst in [r.subject, r.object] {
                if !self.tracklets.contains_key(&inst) {
                    return Err(self.invalid(format!("relation instance {inst} has no tracklet")));
                }
            }
        }
        Ok(())
    }
}

fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl fmt::Display for VideoSample {
    /// One tab-separated record:
    /// `sample_id  split  caption  objects  actions  tracklets`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let caption = self.caption.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let objects = self
            .gt_objects
            .iter()
            .map(|(t, i)| format!("{t}@{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let actions = self
            .gt_actions
            .iter()
            .map(|r| format!("{}@{}@{}", r.verb, r.subject, r.object))
            .collect::<Vec<_>>()
            .join(" ");
        let tracklets = self
            .tracklets
            .iter()
            .map(|(inst, frames)| {
                let body = frames.iter().map(|fr| fmt_floats(fr)).collect::<Vec<_>>().join(";");
                format!("{inst}:[{body}]")
            })
            .collect::<Vec<_>>()
            .join(" ");
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.sample_id, self.split, caption, objects, actions, tracklets
        )
    }
}

fn words(field: &str) -> impl Iterator<Item = &str> {
    field.split(' ').filter(|s| !s.is_empty())
}

fn parse_sample(raw: &str, line: usize) -> Result<VideoSample, CorpusError> {
    let err = |m: String| CorpusError::Parse { line, message: m };
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() != 6 {
        return Err(err(format!("expected 6 tab-separated fields, got {}", fields.len())));
    }
    let sample_id = fields[0].to_string();
    if sample_id.is_empty() {
        return Err(err("empty sample_id".into()));
    }
    let split = match fields[1] {
        "train" => Split::Train,
        "eval" => Split::Eval,
        s => return Err(err(format!("unknown split `{s}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer `{s}`")));
    let caption = words(fields[2]).map(num).collect::<Result<Vec<_>, _>>()?;
    let mut gt_objects = BTreeSet::new();
    for w in words(fields[3]) {
        let (t, i) = w.split_once('@').ok_or_else(|| err(format!("bad object pair `{w}`")))?;
        gt_objects.insert((num(t)?, num(i)?));
    }
    let mut gt_actions = Vec::new();
    for w in words(fields[4]) {
        let parts: Vec<&str> = w.split('@').collect();
        if parts.len() != 3 {
            return Err(err(format!("bad action triple `{w}`")));
        }
        gt_actions.push(Relation {
            verb: num(parts[0])?,
            subject: num(parts[1])?,
            object: num(parts[2])?,
        });
    }
    let mut tracklets = BTreeMap::new();
    for w in words(fields[5]) {
        let (inst, body) = w.split_once(':').ok_or_else(|| err(format!("bad tracklet `{w}`")))?;
        let body = body
            .strip_prefix('[')
            .and_then(|b| b.strip_suffix(']'))
            .ok_or_else(|| err(format!("tracklet {inst} is not bracketed")))?;
        let frames = body
            .split(';')
            .map(|fr| {
                fr.split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad float `{v}`"))))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if tracklets.insert(num(inst)?, frames).is_some() {
            return Err(err(format!("duplicate tracklet instance {inst}")));
        }
    }
    Ok(VideoSample {
        sample_id,
        split,
        tracklets,
        caption,
        gt_objects,
        gt_actions,
    })
}

/// Parses a corpus and validates every sample against the lexicon.
pub fn parse_corpus(text: &str, lexicon: &Lexicon) -> Result<Vec<VideoSample>, CorpusError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let s = parse_sample(raw, line)?;
        s.validate(lexicon).map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })?;
        if !ids.insert(s.sample_id.clone()) {
            return Err(CorpusError::Parse {
                line,
                message: format!("duplicate sample_id {}", s.sample_id),
            });
        }
        out.push(s);
    }
    Ok(out)
}

pub fn format_corpus(samples: &[VideoSample]) -> String {
    let mut s = String::new();
    for sample in samples {
        s.push_str(&sample.to_string());
        s.push('\n');
    }
    s
}

pub fn load_corpus(path: impl AsRef<Path>, lexicon: &Lexicon) -> Result<Vec<VideoSample>, CorpusError> {
    parse_corpus(&std::fs::read_to_string(path)?, lexicon)
}

pub fn save_corpus(path: impl AsRef<Path>, samples: &[VideoSample]) -> Result<(), CorpusError> {
    std::fs::write(path, format_corpus(samples))?;
    Ok(())
}

pub fn split_of(samples: &[VideoSample], split: Split) -> Vec<VideoSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_objects: usize,
    pub num_actions: usize,
    pub vocab_other: usize,
    pub num_train: usize,
    pub num_eval: usize,
    pub frames: usize,
    pub tracklet_noise: f64,
    pub d_vis: usize,
    pub d_tok: usize,
    /// Probability that a mention uses the synonym surface instead of the base one.
    pub synonym_rate: f64,
    /// Probability that a relation follows its subject's habitual action and
    /// partner object instead of a uniform draw.
    pub cooccurrence: f64,
    /// Share of each object's appearance (and each action's motion) taken
    /// from its family centroid; higher values make siblings look alike.
    pub family_similarity: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_objects: 12,
            num_actions: 6,
            vocab_other: 6,
            num_train: 500,
            num_eval: 100,
            frames: 8,
            tracklet_noise: 0.05,
            d_vis: 32,
            d_tok: 16,
            synonym_rate: 0.2,
            cooccurrence: 0.7,
            family_similarity: 0.9,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.num_objects < 1 || self.num_actions < 1 || self.vocab_other < 1 {
            return bad("num_objects, num_actions and vocab_other must be at least 1");
        }
        if self.num_train + self.num_eval == 0 {
            return bad("at least one sample must be generated");
        }
        if self.frames < 1 || self.d_vis < 2 || self.d_tok < 2 {
            return bad("frames must be >= 1 and feature dims >= 2");
        }
        if !(self.tracklet_noise >= 0.0 && self.tracklet_noise.is_finite()) {
            return bad("tracklet noise must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.synonym_rate) {
            return bad("synonym_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cooccurrence) {
            return bad("cooccurrence must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.family_similarity) {
            return bad("family_similarity must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Token ids of the concept families in a generated lexicon.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldVocab {
    pub bos: TokenId,
    pub eos: TokenId,
    pub objects: Vec<Concept>,
    pub actions: Vec<Concept>,
    pub fillers: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concept {
    pub base: TokenId,
    pub synonym: TokenId,
    pub hypernym: TokenId,
}

const OBJECT_NAMES: [(&str, &str); 12] = [
    ("child", "kid"),
    ("man", "guy"),
    ("woman", "lady"),
    ("dog", "puppy"),
    ("cat", "kitten"),
    ("horse", "pony"),
    ("car", "automobile"),
    ("bicycle", "bike"),
    ("boat", "vessel"),
    ("chair", "seat"),
    ("table", "desk"),
    ("sofa", "couch"),
];
const OBJECT_KINDS: [&str; 4] = ["person", "animal", "vehicle", "furniture"];
const ACTION_NAMES: [(&str, &str); 6] = [
    ("stand", "get_up"),
    ("walk", "stroll"),
    ("run", "sprint"),
    ("push", "shove"),
    ("pull", "drag"),
    ("hold", "grasp"),
];
const ACTION_KINDS: [&str; 2] = ["move", "handle"];
const FILLERS: [&str; 6] = ["the", "a", "in", "near", "slowly", "then"];
const GROUP: usize = 3;

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = crate::tensor::l2_norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vectors blending a per-family centroid (weight `similarity`) with an
/// individual direction.
fn family_vectors(rng: &mut ChaCha8Rng, count: usize, d: usize, similarity: f64) -> Vec<Vec<f64>> {
    let centroids: Vec<Vec<f64>> = (0..count.div_ceil(GROUP)).map(|_| random_unit(rng, d)).collect();
    let (a, b) = (similarity.sqrt(), (1.0 - similarity).sqrt());
    (0..count)
        .map(|i| {
            let own = random_unit(rng, d);
            normalized(centroids[i / GROUP].iter().zip(&own).map(|(c, o)| a * c + b * o).collect())
        })
        .collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = crate::tensor::l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn perturbed_unit(rng: &mut ChaCha8Rng, base: &[f64], spread: f64) -> Vec<f64> {
    let noise = random_unit(rng, base.len());
    normalized(base.iter().zip(&noise).map(|(b, n)| b + spread * n).collect())
}

fn name_for(table: &[(&'static str, &'static str)], prefix: &str, i: usize) -> (String, String) {
    match table.get(i) {
        Some((a, b)) => (a.to_string(), b.to_string()),
        None => (format!("{prefix}{i}"), format!("{prefix}{i}_syn")),
    }
}

fn kind_name(table: &[&'static str], prefix: &str, g: usize) -> String {
    table.get(g).map(|s| s.to_string()).unwrap_or_else(|| format!("{prefix}kind{g}"))
}

struct LexiconBuilder {
    entries: Vec<LexiconEntry>,
}

impl LexiconBuilder {
    fn push(&mut self, surface: String, category: Category, embedding: Vec<f64>) -> TokenId {
        let id = self.entries.len();
        self.entries.push(LexiconEntry {
            token_id: id,
            surface,
            category,
            synonyms: Vec::new(),
            hypernyms: Vec::new(),
            embedding,
        });
        id
    }

    fn family(
        &mut self,
        rng: &mut ChaCha8Rng,
        count: usize,
        names: &[(&'static str, &'static str)],
        kinds: &[&'static str],
        prefix: &str,
        category: Category,
        d_tok: usize,
    ) -> Vec<Concept> {
        let bases: Vec<Vec<f64>> = (0..count).map(|_| random_unit(rng, d_tok)).collect();
        let groups = count.div_ceil(GROUP);
        let kind_ids: Vec<TokenId> = (0..groups)
            .map(|g| {
                let members = &bases[g * GROUP..((g + 1) * GROUP).min(count)];
                let mut centroid = vec![0.0; d_tok];
                for m in members {
                    centroid.iter_mut().zip(m).for_each(|(c, x)| *c += x);
                }
                let emb = perturbed_unit(rng, &normalized(centroid), 0.3);
                self.push(kind_name(kinds, prefix, g), category, emb)
            })
            .collect();
        let mut concepts = Vec::with_capacity(count);
        for (i, base_emb) in bases.iter().enumerate() {
            let (name, syn_name) = name_for(names, prefix, i);
            let base = self.push(name, category, base_emb.clone());
            let syn_emb = perturbed_unit(rng, base_emb, 0.25);
            let synonym = self.push(syn_name, category, syn_emb);
            let hypernym = kind_ids[i / GROUP];
            self.entries[base].synonyms = vec![synonym];
            self.entries[base].hypernyms = vec![hypernym];
            self.entries[synonym].synonyms = vec![base];
            self.entries[synonym].hypernyms = vec![hypernym];
            concepts.push(Concept { base, synonym, hypernym });
        }
        concepts
    }
}

/// Hidden generative parameters of the synthetic world.
struct Dynamics {
    object_base: Vec<Vec<f64>>,
    /// `[action][role]` motion direction.
    motion_dir: Vec<[Vec<f64>; 2]>,
    motion_phase: Vec<[f64; 2]>,
    motion_freq: Vec<f64>,
    /// Habitual partner object and action of each object.
    partner: Vec<usize>,
    habit: Vec<usize>,
}

const MOTION_AMPLITUDE: f64 = 0.6;
const MOTION_OFFSET: f64 = 0.5;

impl Dynamics {
    /// Displacement of a participant in `action` with `role` (0 subject,
    /// 1 object) at frame `t` of `frames`.
    fn motion(&self, action: usize, role: usize, t: usize, frames: usize) -> impl Iterator<Item = f64> + '_ {
        let angle = std::f64::consts::TAU * self.motion_freq[action] * t as f64 / frames as f64 + self.motion_phase[action][role];
        let gain = MOTION_AMPLITUDE * (MOTION_OFFSET + angle.sin());
        self.motion_dir[action][role].iter().map(move |d| gain * d)
    }
}

/// Deterministic toy world: lexicon plus train/eval corpus.
pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<(Lexicon, Vec<VideoSample>), CorpusError> {
    let (lex, _vocab, corpus) = generate_world_with_vocab(seed, config)?;
    Ok((lex, corpus))
}

pub fn generate_world_with_vocab(
    seed: u64,
    config: &WorldConfig,
) -> Result<(Lexicon, WorldVocab, Vec<VideoSample>), CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_tok = config.d_tok;
    let mut b = LexiconBuilder { entries: Vec::new() };
    let bos_emb = random_unit(&mut rng, d_tok);
    let bos = b.push(BOS_SURFACE.into(), Category::Other, bos_emb);
    let eos_emb = random_unit(&mut rng, d_tok);
    let eos = b.push(EOS_SURFACE.into(), Category::Other, eos_emb);
    let objects = b.family(&mut rng, config.num_objects, &OBJECT_NAMES, &OBJECT_KINDS, "obj", Category::Object, d_tok);
    let actions = b.family(&mut rng, config.num_actions, &ACTION_NAMES, &ACTION_KINDS, "act", Category::Action, d_tok);
    let fillers: Vec<TokenId> = (0..config.vocab_other)
        .map(|i| {
            let name = FILLERS.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("w{i}"));
            let emb = random_unit(&mut rng, d_tok);
            b.push(name, Category::Other, emb)
        })
        .collect();
    let lexicon = Lexicon::new(b.entries)?;
    let vocab = WorldVocab {
        bos,
        eos,
        objects,
        actions,
        fillers,
    };

    let dynamics = Dynamics {
        object_base: family_vectors(&mut rng, config.num_objects, config.d_vis, config.family_similarity),
        motion_dir: {
            let subj = family_vectors(&mut rng, config.num_actions, config.d_vis, config.family_similarity);
            let obj = family_vectors(&mut rng, config.num_actions, config.d_vis, config.family_similarity);
            subj.into_iter().zip(obj).map(|(s, o)| [s, o]).collect()
        },
        motion_phase: (0..config.num_actions)
            .map(|_| [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)])
            .collect(),
        motion_freq: (0..config.num_actions).map(|a| 1.0 + (a % 3) as f64).collect(),
        partner: (0..config.num_objects)
            .map(|o| (o + rng.random_range(1..config.num_objects.max(2))) % config.num_objects)
            .collect(),
        habit: (0..config.num_objects).map(|_| rng.random_range(0..config.num_actions)).collect(),
    };

    let mut corpus = Vec::with_capacity(config.num_train + config.num_eval);
    for (split, count) in [(Split::Train, config.num_train), (Split::Eval, config.num_eval)] {
        for i in 0..count {
            let id = format!("{split}-{i:05}");
            corpus.push(generate_sample(&mut rng, id, split, config, &vocab, &dynamics)?);
        }
    }
    for s in &corpus {
        s.validate(&lexicon)?;
    }
    Ok((lexicon, vocab, corpus))
}

fn generate_sample(
    rng: &mut ChaCha8Rng,
    sample_id: String,
    split: Split,
    config: &WorldConfig,
    vocab: &WorldVocab,
    dynamics: &Dynamics,
) -> Result<VideoSample, CorpusError> {
    let num_triples = if config.num_actions >= 2 { rng.random_range(1..=2) } else { 1 };
    let num_instances = if num_triples == 1 { 2 } else { rng.random_range(2..=4) };
    let instance_object: Vec<usize> = (0..num_instances).map(|_| rng.random_range(0..config.num_objects)).collect();

    // Participants: every instance takes part in at least one relation.
    let pairs: Vec<(InstanceId, InstanceId)> = match (num_triples, num_instances) {
        (1, _) => vec![(0, 1)],
        (_, 2) => vec![(0, 1), (rng.random_range(0..2), 0)],
        (_, 3) => vec![(0, 1), (2, rng.random_range(0..2))],
        _ => vec![(0, 1), (2, 3)],
    };
    let pairs: Vec<(InstanceId, InstanceId)> = pairs
        .into_iter()
        .map(|(s, o)| {
            let o = if s == o { (s + 1) % num_instances } else { o };
            if rng.random_bool(0.5) { (s, o) } else { (o, s) }
        })
        .collect();
    let mut action_pool: Vec<usize> = (0..config.num_actions).collect();
    action_pool.shuffle(rng);
    let mut action_of: Vec<usize> = action_pool.into_iter().take(num_triples).collect();
    let mut instance_object = instance_object;
    if config.cooccurrence > 0.0 {
        for (k, &(s, o)) in pairs.iter().enumerate() {
            if rng.random_bool(config.cooccurrence) {
                let subject = instance_object[s];
                instance_object[o] = dynamics.partner[subject];
                let habit = dynamics.habit[subject];
                if let Some(j) = action_of.iter().position(|&a| a == habit) {
                    action_of.swap(j, k);
                } else {
                    action_of[k] = habit;
                }
            }
        }
    }

    let pick = |rng: &mut ChaCha8Rng, c: &Concept| {
        if rng.random_bool(config.synonym_rate) { c.synonym } else { c.base }
    };
    let instance_token: Vec<TokenId> = instance_object.iter().map(|&o| pick(rng, &vocab.objects[o])).collect();
    let action_token: Vec<TokenId> = action_of.iter().map(|&a| pick(rng, &vocab.actions[a])).collect();

    let noise = if config.tracklet_noise > 0.0 {
        Some(Normal::new(0.0, config.tracklet_noise).map_err(|e| CorpusError::Config(e.to_string()))?)
    } else {
        None
    };
    let mut tracklets = BTreeMap::new();
    for (inst, &obj) in instance_object.iter().enumerate() {
        let frames = (0..config.frames)
            .map(|t| {
                let mut frame = dynamics.object_base[obj].clone();
                for (k, &(s, o)) in pairs.iter().enumerate() {
                    for (role, participant) in [s, o].into_iter().enumerate() {
                        if participant == inst {
                            for (x, m) in frame.iter_mut().zip(dynamics.motion(action_of[k], role, t, config.frames)) {
                                *x += m;
                            }
                        }
                    }
                }
                if let Some(n) = &noise {
                    frame.iter_mut().for_each(|x| *x += n.sample(rng));
                }
                frame
            })
            .collect();
        tracklets.insert(inst, frames);
    }

    let mut segments: Vec<Vec<TokenId>> = pairs
        .iter()
        .enumerate()
        .map(|(k, &(s, o))| vec![instance_token[s], action_token[k], instance_token[o]])
        .collect();
    let num_fillers = rng.random_range(0..=3);
    for _ in 0..num_fillers {
        let filler = vocab.fillers[rng.random_range(0..vocab.fillers.len())];
        let slot = rng.random_range(0..=segments.len());
        segments.insert(slot, vec![filler]);
    }
    let caption: Vec<TokenId> = segments.into_iter().flatten().collect();

    Ok(VideoSample {
        sample_id,
        split,
        tracklets,
        caption,
        gt_objects: instance_token.iter().enumerate().map(|(i, &t)| (t, i)).collect(),
        gt_actions: pairs
            .iter()
            .enumerate()
            .map(|(k, &(s, o))| Relation {
                verb: action_token[k],
                subject: s,
                object: o,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            num_train: 10,
            num_eval: 5,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn split_counts_follow_config() {
        let (_, corpus) = generate_world(1, &small()).unwrap();
        assert_eq!(split_of(&corpus, Split::Train).len(), 10);
        assert_eq!(split_of(&corpus, Split::Eval).len(), 5);
        let train: BTreeSet<_> = split_of(&corpus, Split::Train).into_iter().map(|s| s.sample_id).collect();
        assert!(split_of(&corpus, Split::Eval).iter().all(|s| !train.contains(&s.sample_id)));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(42, &small()).unwrap();
        let b = generate_world(42, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(43, &small()).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn noise_free_tracklets_repeat_for_same_object_and_role() {
        let cfg = WorldConfig {
            tracklet_noise: 0.0,
            num_train: 400,
            num_eval: 0,
            ..WorldConfig::default()
        };
        let (_, vocab, corpus) = generate_world_with_vocab(3, &cfg).unwrap();
        let base_of = |t: TokenId| vocab.objects.iter().position(|c| c.base == t || c.synonym == t).unwrap();
        let action_of = |t: TokenId| vocab.actions.iter().position(|c| c.base == t || c.synonym == t).unwrap();
        // single-relation samples: key = (object, action, role)
        let mut seen: BTreeMap<(usize, usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
        let mut matched = 0;
        for s in corpus.iter().filter(|s| s.gt_actions.len() == 1) {
            let r = s.gt_actions[0];
            for (role, inst) in [(0, r.subject), (1, r.object)] {
                let key = (base_of(s.instance_token(inst).unwrap()), action_of(r.verb), role);
                let frames = &s.tracklets[&inst];
                if let Some(prev) = seen.get(&key) {
                    assert_eq!(prev, frames);
                    matched += 1;
                } else {
                    seen.insert(key, frames.clone());
                }
            }
        }
        assert!(matched > 0);
    }

    #[test]
    fn samples_satisfy_structure() {
        let (lex, corpus) = generate_world(9, &WorldConfig::default()).unwrap();
        for s in &corpus {
            s.validate(&lex).unwrap();
            assert!((2..=4).contains(&s.tracklets.len()));
            assert!((1..=2).contains(&s.gt_actions.len()));
            let referenced: BTreeSet<_> = s.gt_actions.iter().flat_map(|r| [r.subject, r.object]).collect();
            assert_eq!(referenced.len(), s.tracklets.len(), "every instance takes part in a relation");
            for r in &s.gt_actions {
                assert_ne!(r.subject, r.object);
            }
            for t in s.object_tokens().iter().chain(&s.action_tokens()) {
                assert!(s.caption.contains(t));
            }
            let fillers = s.caption.iter().filter(|&&t| lex.category(t).unwrap() == Category::Other).count();
            assert!(fillers <= 3);
            assert_eq!(s.caption.len(), 3 * s.gt_actions.len() + fillers);
        }
    }

    #[test]
    fn lexicon_has_synonym_and_hypernym_per_object() {
        let (lex, vocab, _) = generate_world_with_vocab(5, &small()).unwrap();
        for c in &vocab.objects {
            let e = lex.entry(c.base).unwrap();
            assert_eq!(e.synonyms, vec![c.synonym]);
            assert_eq!(e.hypernyms, vec![c.hypernym]);
            assert_eq!(lex.category(c.hypernym).unwrap(), Category::Object);
        }
        assert_eq!(lex.surface(vocab.objects[0].base), "child");
        assert_eq!(lex.surface(vocab.objects[0].synonym), "kid");
        assert_eq!(lex.surface(vocab.objects[0].hypernym), "person");
        assert_eq!(lex.surface(vocab.actions[0].synonym), "get_up");
        assert_eq!(lex.surface(vocab.actions[0].hypernym), "move");
    }

    #[test]
    fn empty_corpus_parses_to_empty_list() {
        let (lex, _) = generate_world(1, &small()).unwrap();
        assert!(parse_corpus("", &lex).unwrap().is_empty());
    }

    #[test]
    fn unknown_token_is_named() {
        let (lex, corpus) = generate_world(1, &small()).unwrap();
        let line = corpus[0].to_string();
        let mut fields: Vec<String> = line.split('\t').map(String::from).collect();
        fields[2] = format!("{} 9999", fields[2]);
        let err = parse_corpus(&fields.join("\t"), &lex).unwrap_err().to_string();
        assert!(err.contains("9999") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn malformed_records_rejected() {
        let (lex, corpus) = generate_world(1, &small()).unwrap();
        assert!(parse_corpus("a\tb\tc", &lex).is_err());
        let mut dup = format_corpus(&corpus[..1]);
        dup.push_str(&format_corpus(&corpus[..1]));
        assert!(parse_corpus(&dup, &lex).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = WorldConfig {
            num_train: 0,
            num_eval: 0,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(1, &cfg), Err(CorpusError::Config(_))));
        let cfg = WorldConfig {
            tracklet_noise: -1.0,
            ..WorldConfig::default()
        };
        assert!(generate_world(1, &cfg).is_err());
        for cfg in [
            WorldConfig {
                cooccurrence: 1.5,
                ..WorldConfig::default()
            },
            WorldConfig {
                family_similarity: 1.0,
                ..WorldConfig::default()
            },
        ] {
            assert!(matches!(generate_world(1, &cfg), Err(CorpusError::Config(_))));
        }
    }

    #[test]
    fn full_cooccurrence_fixes_partner_per_subject() {
        let cfg = WorldConfig {
            num_actions: 1,
            synonym_rate: 0.0,
            cooccurrence: 1.0,
            num_train: 200,
            num_eval: 0,
            ..WorldConfig::default()
        };
        let (_, corpus) = generate_world(5, &cfg).unwrap();
        let mut partner = BTreeMap::new();
        for s in &corpus {
            let r = &s.gt_actions[0];
            let (subj, obj) = (s.instance_token(r.subject).unwrap(), s.instance_token(r.object).unwrap());
            assert_eq!(*partner.entry(subj).or_insert(obj), obj, "{}", s.sample_id);
        }
        let cfg = WorldConfig {
            cooccurrence: 0.0,
            ..cfg
        };
        let (_, corpus) = generate_world(5, &cfg).unwrap();
        let mut seen: BTreeMap<TokenId, BTreeSet<TokenId>> = BTreeMap::new();
        for s in &corpus {
            let r = &s.gt_actions[0];
            seen.entry(s.instance_token(r.subject).unwrap())
                .or_default()
                .insert(s.instance_token(r.object).unwrap());
        }
        assert!(seen.values().any(|o| o.len() > 1));
    }
}
