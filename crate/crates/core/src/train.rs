//! Training loop, optimizer, evaluation hookup and multi-seed experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{build_suppression_set, default_t_dec, generate_hallucinative, AugmentError};
use crate::corpus::{generate_world, split_of, CorpusError, Split, VideoSample, WorldConfig};
use crate::gradcheck::{grad_check, GradCheckError, GradCheckReport};
use crate::lexicon::{Lexicon, LexiconError, TokenId};
use crate::losses::{self, ContrastiveBatch, LossBreakdown, LossError, LossParts, LossWarning, PairedTerm};
use crate::metrics::{eval_stats, evaluate_corpus, parse_prediction, MetricError, MetricReport, Variant};
use crate::model::{ModelConfig, ModelError, Session, ToyMllm};
use crate::tensor::{cosine, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite { step: usize, breakdown: LossBreakdown },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub use_video: bool,
    pub use_obj: bool,
    pub use_act: bool,
    pub use_c_h: bool,
}

/// Rows of the component ablation, each adding one piece to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Captioning loss only.
    Baseline,
    Video,
    VideoObj,
    VideoObjAct,
    /// All alignment losses with hallucinated hard negatives.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Baseline, Self::Video, Self::VideoObj, Self::VideoObjAct, Self::Full];
    /// The four cumulative rows of the component ablation table.
    pub const TABLE: [Ablation; 4] = [Self::Video, Self::VideoObj, Self::VideoObjAct, Self::Full];

    pub fn toggles(self) -> LossToggles {
        let (v, o, a, h) = match self {
            Self::Baseline => (false, false, false, false),
            Self::Video => (true, false, false, false),
            Self::VideoObj => (true, true, false, false),
            Self::VideoObjAct => (true, true, true, false),
            Self::Full => (true, true, true, true),
        };
        LossToggles {
            use_video: v,
            use_obj: o,
            use_act: a,
            use_c_h: h,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "L_g",
            Self::Video => "L_g+L_video",
            Self::VideoObj => "+L_obj",
            Self::VideoObjAct => "+L_act",
            Self::Full => "+C_h",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Video => "video",
            Self::VideoObj => "video_obj",
            Self::VideoObjAct => "video_obj_act",
            Self::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown configuration `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub seed: u64,
    pub toggles: LossToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 1e-2,
            optimizer: Optimizer::Adam,
            alpha: losses::DEFAULT_ALPHA,
            beta: losses::DEFAULT_BETA,
            tau: losses::DEFAULT_TAU,
            seed: 0,
            toggles: Ablation::Full.toggles(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.toggles = ablation.toggles();
        self
    }
}

/// True when `a` and `b` name the same concept (identical or synonyms).
pub fn same_concept(lexicon: &Lexicon, a: TokenId, b: TokenId) -> bool {
    a == b
        || lexicon.entry(a).map(|e| e.synonyms.contains(&b)).unwrap_or(false)
        || lexicon.entry(b).map(|e| e.synonyms.contains(&a)).unwrap_or(false)
}

/// Loss nodes and squeezer selections of one batch graph.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub total: Var,
    pub parts: LossParts,
    pub breakdown: LossBreakdown,
    /// Selected query index per sample and relation.
    pub selections: Vec<Vec<usize>>,
}

/// Options for building a batch graph.
#[derive(Debug, Clone, Copy)]
pub struct GraphOptions<'a> {
    pub toggles: LossToggles,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Reuse these squeezer selections instead of the argmax.
    pub frozen: Option<&'a [Vec<usize>]>,
}

struct Mention {
    sample: usize,
    token: TokenId,
    visual: Var,
}

fn phrase_row(session: &mut Session<'_>, table: Var, cache: &mut BTreeMap<TokenId, Var>, t: TokenId) -> Result<Var> {
    if let Some(&v) = cache.get(&t) {
        return Ok(v);
    }
    let v = session.tape.select_rows(table, &[t])?;
    cache.insert(t, v);
    Ok(v)
}

fn build_terms(
    session: &mut Session<'_>,
    lexicon: &Lexicon,
    table: Var,
    cache: &mut BTreeMap<TokenId, Var>,
    mentions: &[Mention],
    hard: &[BTreeSet<TokenId>],
) -> Result<Vec<PairedTerm>> {
    let batch_tokens: BTreeSet<TokenId> = mentions.iter().map(|m| m.token).collect();
    let mut terms = Vec::with_capacity(mentions.len());
    for (i, m) in mentions.iter().enumerate() {
        let text = phrase_row(session, table, cache, m.token)?;
        let mut term = PairedTerm::new(m.visual, text);
        term.visual_negatives = mentions
            .iter()
            .enumerate()
            .filter(|&(j, o)| j != i && !same_concept(lexicon, m.token, o.token))
            .map(|(_, o)| o.visual)
            .collect();
        let pool: Vec<TokenId> = batch_tokens
            .iter()
            .copied()
            .filter(|&t| !same_concept(lexicon, m.token, t))
            .collect();
        for &t in &pool {
            term.text_negatives.push(phrase_row(session, table, cache, t)?);
        }
        for &t in &hard[m.sample] {
            if !same_concept(lexicon, m.token, t) && !pool.contains(&t) {
                term.hard_text_negatives.push(phrase_row(session, table, cache, t)?);
            }
        }
        terms.push(term);
    }
    Ok(terms)
}

/// Records the full objective for `samples` on `session`.
/// `hallucinated[i]` is the hard-negative caption of `samples[i]`, if any.
pub fn build_batch_graph(
    session: &mut Session<'_>,
    lexicon: &Lexicon,
    samples: &[&VideoSample],
    hallucinated: &[Option<Vec<TokenId>>],
    opts: GraphOptions<'_>,
) -> Result<BatchGraph> {
    if samples.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let tg = opts.toggles;
    let table = session.phrase_table()?;
    let mut cache = BTreeMap::new();
    let mut ce_parts = Vec::with_capacity(samples.len());
    let mut video_terms = Vec::new();
    let mut object_mentions = Vec::new();
    let mut action_mentions = Vec::new();
    let mut hard_obj = vec![BTreeSet::new(); samples.len()];
    let mut hard_act = vec![BTreeSet::new(); samples.len()];
    let mut selections = Vec::with_capacity(samples.len());

    for (i, sample) in samples.iter().enumerate() {
        let v = session.video_feature(sample)?;
        let mut tokens = BTreeMap::new();
        let mut features = BTreeMap::new();
        let mut instances = Vec::with_capacity(sample.tracklets.len());
        for (&inst, frames) in &sample.tracklets {
            let t = session.tracklet_tokens(frames)?;
            let pair = session.instance_token(t)?;
            tokens.insert(inst, t);
            features.insert(inst, pair.1);
            instances.push(pair);
        }
        let visual = session.stack_visual(&instances)?;
        let ctx = session.decode_context_with(visual, table)?;
        let (ce, hidden) = session.caption_nll(&ctx, &sample.caption)?;
        ce_parts.push((ce, sample.caption.len() + 1));

        let c_h = hallucinated.get(i).and_then(|h| h.as_ref()).filter(|_| tg.use_c_h);
        if let Some(c_h) = c_h {
            let (o, a) = parse_prediction(c_h, lexicon)?;
            hard_obj[i] = o;
            hard_act[i] = a;
        }
        if tg.use_video {
            let c = session.text_feature(hidden)?;
            let mut term = PairedTerm::new(v, c);
            if let Some(c_h) = c_h.filter(|h| !h.is_empty()) {
                let f = session.caption_feature(c_h)?;
                term.hard_text_negatives.push(f);
            }
            video_terms.push(term);
        }

        let mut chosen = Vec::new();
        {
            if tg.use_obj {
                for &(token, inst) in &sample.gt_objects {
                    object_mentions.push(Mention {
                        sample: i,
                        token,
                        visual: features[&inst],
                    });
                }
            }
            if tg.use_act {
                for (r, rel) in sample.gt_actions.iter().enumerate() {
                    let phrase = phrase_row(session, table, &mut cache, rel.verb)?;
                    let frozen = opts.frozen.map(|f| f[i][r]);
                    let (visual, k) = session.action_squeeze(&[tokens[&rel.subject], tokens[&rel.object]], phrase, frozen)?;
                    chosen.push(k);
                    action_mentions.push(Mention {
                        sample: i,
                        token: rel.verb,
                        visual,
                    });
                }
            }
        }
        selections.push(chosen);
    }

    let vs: Vec<Var> = video_terms.iter().map(|t| t.visual.expect("set")).collect();
    let cs: Vec<Var> = video_terms.iter().map(|t| t.text.expect("set")).collect();
    for (i, term) in video_terms.iter_mut().enumerate() {
        term.visual_negatives = vs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect();
        term.text_negatives = cs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &c)| c).collect();
    }
    let batch = ContrastiveBatch {
        video: video_terms,
        objects: build_terms(session, lexicon, table, &mut cache, &object_mentions, &hard_obj)?,
        actions: build_terms(session, lexicon, table, &mut cache, &action_mentions, &hard_act)?,
    };

    let tape = &mut session.tape;
    let zero = |tape: &mut crate::tensor::Tape| tape.constant(Tensor::scalar(0.0));
    let parts = LossParts {
        l_g: losses::l_g(tape, &ce_parts)?,
        l_video: if tg.use_video { losses::l_video(tape, &batch, opts.tau)? } else { zero(tape)? },
        l_obj: if tg.use_obj { losses::l_obj(tape, &batch, opts.tau)? } else { zero(tape)? },
        l_act: if tg.use_act { losses::l_act(tape, &batch, opts.tau)? } else { zero(tape)? },
    };
    let (total, mut breakdown) = losses::l_total(tape, parts, opts.alpha, opts.beta, opts.tau)?;
    if tg.use_obj && batch.objects.is_empty() {
        breakdown.warnings.push(LossWarning::NoObjects);
    }
    if tg.use_act && batch.actions.is_empty() {
        breakdown.warnings.push(LossWarning::NoActions);
    }
    Ok(BatchGraph {
        total,
        parts,
        breakdown,
        selections,
    })
}

/// Greedy hallucinated captions for `samples` from a frozen snapshot.
pub fn hallucinate_batch(snapshot: &ToyMllm, lexicon: &Lexicon, samples: &[&VideoSample]) -> Result<Vec<Option<Vec<TokenId>>>> {
    samples
        .iter()
        .map(|s| {
            let omega = build_suppression_set(s, lexicon)?;
            let ch = generate_hallucinative(snapshot, s, &omega, default_t_dec(s))?;
            Ok(Some(ch.tokens))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Owns the mutable model and walks through the training corpus.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub model: ToyMllm,
    pub config: TrainConfig,
    lexicon: &'a Lexicon,
    train: Vec<&'a VideoSample>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    adam: AdamState,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ToyMllm, config: TrainConfig, lexicon: &'a Lexicon, train: &'a [VideoSample]) -> Result<Self> {
        config.validate()?;
        let train: Vec<&VideoSample> = train.iter().filter(|s| s.split == Split::Train).collect();
        if train.is_empty() {
            return Err(TrainError::Config("no training samples".into()));
        }
        let zeros: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c),
            order: Vec::new(),
            cursor: 0,
            adam: AdamState {
                m: zeros.clone(),
                v: zeros,
                t: 0,
            },
            step: 0,
            model,
            config,
            lexicon,
            train,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self) -> Vec<&'a VideoSample> {
        let n = self.config.batch_size.min(self.train.len());
        let mut batch = Vec::with_capacity(n);
        while batch.len() < n {
            if self.cursor == self.order.len() {
                self.order = (0..self.train.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.train[self.order[self.cursor]]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch();
        self.step_on(&batch)
    }

    /// Freezes a snapshot, generates hard negatives with it, then updates
    /// every parameter on the combined loss of `batch`.
    pub fn step_on(&mut self, batch: &[&VideoSample]) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let hallucinated = if cfg.toggles.use_c_h {
            let snapshot = self.model.clone();
            hallucinate_batch(&snapshot, self.lexicon, batch)?
        } else {
            vec![None; batch.len()]
        };
        let opts = GraphOptions {
            toggles: cfg.toggles,
            alpha: cfg.alpha,
            beta: cfg.beta,
            tau: cfg.tau,
            frozen: None,
        };
        let (breakdown, grads) = {
            let mut session = self.model.session(true)?;
            let graph = build_batch_graph(&mut session, self.lexicon, batch, &hallucinated, opts)?;
            if !graph.breakdown.is_finite() {
                return Err(TrainError::NonFinite {
                    step: self.step,
                    breakdown: graph.breakdown,
                });
            }
            let g = session.tape.backward(graph.total)?;
            let grads: Vec<Tensor> = session.bound().vars().iter().map(|&v| g.get_or_zeros(v)).collect();
            (graph.breakdown, grads)
        };
        self.apply(&grads);
        self.step += 1;
        if !self.model.params().all_finite() {
            return Err(TrainError::NonFinite { step: self.step - 1, breakdown });
        }
        Ok(breakdown)
    }

    fn apply(&mut self, grads: &[Tensor]) {
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.model.params_mut().tensors_mut().iter_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * d);
                }
            }
            Optimizer::Adam => {
                let st = &mut self.adam;
                st.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(st.t);
                let c2 = 1.0 - ADAM_BETA2.powi(st.t);
                let params = self.model.params_mut().tensors_mut();
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (st.m[i].data_mut(), st.v[i].data_mut());
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }

    /// Runs the configured number of steps, returning the per-step log.
    pub fn run(&mut self) -> Result<Vec<LossBreakdown>> {
        let mut log = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            log.push(self.step()?);
        }
        Ok(log)
    }
}

pub fn write_training_log<W: std::io::Write>(writer: W, log: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "L_g", "L_video", "L_obj", "L_act", "L_total"])?;
    for (i, b) in log.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.l_g.to_string(),
            b.l_video.to_string(),
            b.l_obj.to_string(),
            b.l_act.to_string(),
            b.l_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean cosine between each sample's video feature and its ground-truth
/// caption feature.
pub fn alignment_gap(model: &ToyMllm, samples: &[VideoSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let mut session = model.session(false)?;
        let v = session.video_feature(s)?;
        let c = session.caption_feature(&s.caption)?;
        total += cosine(session.tape.value(v).data(), session.tape.value(c).data())?;
    }
    Ok(total / samples.len() as f64)
}

pub fn greedy_predictions(model: &ToyMllm, samples: &[VideoSample]) -> Result<Vec<Option<Vec<TokenId>>>> {
    samples.iter().map(|s| Ok(Some(model.greedy_caption(s)?))).collect()
}

/// Greedy-decodes every evaluation sample and scores it.
pub fn evaluate(model: &ToyMllm, lexicon: &Lexicon, samples: &[VideoSample]) -> Result<MetricReport> {
    let eval: Vec<VideoSample> = split_of(samples, Split::Eval);
    let stats = eval_stats(&eval);
    let predictions = greedy_predictions(model, &eval)?;
    let report = evaluate_corpus(&predictions, &eval, lexicon, &stats)?;
    Ok(report.with_alignment_gap(alignment_gap(model, &eval)?))
}

/// Model config matching a world.
pub fn model_config(lexicon: &Lexicon, samples: &[VideoSample], seed: u64, tau: f64) -> Result<ModelConfig> {
    let first = samples.first().ok_or_else(|| TrainError::Config("empty corpus".into()))?;
    let d_vis = first.tracklets.values().next().and_then(|t| t.first()).map(Vec::len).unwrap_or(0);
    let mut cfg = ModelConfig::for_lexicon(lexicon, first.num_frames(), d_vis, seed)?;
    cfg.tau = tau;
    Ok(cfg)
}

/// Where each experiment seed gets its corpus.
#[derive(Debug, Clone)]
pub enum WorldSource {
    /// A fresh world generated from each seed.
    Generate(WorldConfig),
    Fixed { lexicon: Lexicon, samples: Vec<VideoSample> },
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub world: WorldSource,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<Ablation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub pre: MetricReport,
    pub post: MetricReport,
    pub log: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<Ablation>,
    pub runs: Vec<RunResult>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

impl ExperimentResult {
    pub fn runs_of(&self, ablation: Ablation) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.ablation == ablation)
    }

    /// Median post-training F1 over seeds.
    pub fn median_f1(&self, ablation: Ablation, variant: Variant, category: crate::lexicon::Category) -> f64 {
        let mut v: Vec<f64> = self.runs_of(ablation).map(|r| r.post.get(variant, category).f1).collect();
        median(&mut v)
    }

    pub fn write_table<W: std::io::Write>(&self, writer: W) -> Result<()> {
        use crate::lexicon::Category::{Action, Object};
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "configuration",
            "label",
            "weighted_f1_obj",
            "weighted_f1_act",
            "exact_f1_obj",
            "exact_f1_act",
            "alignment_gap",
            "n_seeds",
        ])?;
        for &a in &self.rows {
            let mut gap: Vec<f64> = self.runs_of(a).filter_map(|r| r.post.alignment_gap).collect();
            w.write_record([
                a.to_string(),
                a.label().to_string(),
                format!("{:.6}", self.median_f1(a, Variant::Weighted, Object)),
                format!("{:.6}", self.median_f1(a, Variant::Weighted, Action)),
                format!("{:.6}", self.median_f1(a, Variant::Exact, Object)),
                format!("{:.6}", self.median_f1(a, Variant::Exact, Action)),
                format!("{:.6}", median(&mut gap)),
                self.runs_of(a).count().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<Vec<RunResult>> {
    let generated;
    let (lexicon, samples) = match &spec.world {
        WorldSource::Generate(cfg) => {
            generated = generate_world(seed, cfg)?;
            (&generated.0, &generated.1)
        }
        WorldSource::Fixed { lexicon, samples } => (lexicon, samples),
    };
    let train = split_of(samples, Split::Train);
    let init = ToyMllm::new(model_config(lexicon, samples, seed, spec.train.tau)?)?;
    let pre = evaluate(&init, lexicon, samples)?;
    let mut out = Vec::with_capacity(spec.rows.len());
    for &ablation in &spec.rows {
        let cfg = TrainConfig {
            seed,
            ..spec.train.clone()
        }
        .with_ablation(ablation);
        let mut trainer = Trainer::new(init.clone(), cfg, lexicon, &train)?;
        let log = trainer.run()?;
        let post = evaluate(&trainer.model, lexicon, samples)?;
        out.push(RunResult {
            ablation,
            seed,
            pre: pre.clone(),
            post,
            log,
        });
    }
    Ok(out)
}

/// Trains every configuration from the same initialization per seed.
/// Seeds run on worker threads; results are ordered by (seed, row).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    spec.train.validate()?;
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(spec.seeds.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Vec<RunResult>>>>> = Mutex::new((0..spec.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= spec.seeds.len() {
                    break;
                }
                let r = run_seed(spec, spec.seeds[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut runs = Vec::new();
    for slot in slots.into_inner().expect("no poisoned workers") {
        runs.extend(slot.expect("every seed ran")?);
    }
    Ok(ExperimentResult {
        seeds: spec.seeds.clone(),
        rows: spec.rows.clone(),
        runs,
    })
}

/// Which scalar of a batch graph to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    Generation,
    Video,
    Object,
    Action,
    Total,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] = [Self::Generation, Self::Video, Self::Object, Self::Action, Self::Total];

    fn pick(self, g: &BatchGraph) -> Var {
        match self {
            Self::Generation => g.parts.l_g,
            Self::Video => g.parts.l_video,
            Self::Object => g.parts.l_obj,
            Self::Action => g.parts.l_act,
            Self::Total => g.total,
        }
    }
}

impl fmt::Display for CheckedLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Generation => "L_g",
            Self::Video => "L_video",
            Self::Object => "L_obj",
            Self::Action => "L_act",
            Self::Total => "L_total",
        })
    }
}

/// Small world and model used for finite-difference checks.
pub fn gradcheck_setup(seed: u64) -> Result<(Lexicon, Vec<VideoSample>, ToyMllm)> {
    let world = WorldConfig {
        num_objects: 6,
        num_actions: 4,
        vocab_other: 3,
        num_train: 3,
        num_eval: 0,
        frames: 4,
        d_vis: 6,
        d_tok: 4,
        ..WorldConfig::default()
    };
    let (lexicon, samples) = generate_world(seed, &world)?;
    let mut cfg = model_config(&lexicon, &samples, seed, losses::DEFAULT_TAU)?;
    cfg.d_tok = 4;
    cfg.d_model = 6;
    cfg.num_queries = 4;
    Ok((lexicon, samples, ToyMllm::new(cfg)?))
}

/// Central-difference check of every loss on a random toy batch with all
/// losses and hard negatives enabled, squeezer selections frozen.
pub fn gradcheck_losses(seed: u64, h: f64) -> Result<Vec<(CheckedLoss, GradCheckReport)>> {
    let (lexicon, samples, model) = gradcheck_setup(seed)?;
    let batch: Vec<&VideoSample> = samples.iter().collect();
    let hallucinated = hallucinate_batch(&model, &lexicon, &batch)?;
    let mut opts = GraphOptions {
        toggles: Ablation::Full.toggles(),
        alpha: losses::DEFAULT_ALPHA,
        beta: losses::DEFAULT_BETA,
        tau: losses::DEFAULT_TAU,
        frozen: None,
    };
    let selections = {
        let mut s = model.session(true)?;
        build_batch_graph(&mut s, &lexicon, &batch, &hallucinated, opts)?.selections
    };
    opts.frozen = Some(&selections);
    let params = model.params().flatten();
    let mut out = Vec::with_capacity(CheckedLoss::ALL.len());
    for which in CheckedLoss::ALL {
        let analytic = {
            let mut s = model.session(true)?;
            let g = build_batch_graph(&mut s, &lexicon, &batch, &hallucinated, opts)?;
            let grads = s.tape.backward(which.pick(&g))?;
            s.bound()
                .vars()
                .iter()
                .flat_map(|&v| grads.get_or_zeros(v).into_data())
                .collect::<Vec<f64>>()
        };
        let mut probe = model.clone();
        let f = |flat: &[f64]| -> f64 {
            probe.params_mut().unflatten(flat);
            let eval = || -> Result<f64> {
                let mut s = probe.session(false)?;
                let g = build_batch_graph(&mut s, &lexicon, &batch, &hallucinated, opts)?;
                Ok(s.tape.value(which.pick(&g)).item())
            };
            eval().unwrap_or(f64::NAN)
        };
        out.push((which, grad_check(f, &params, &analytic, h)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Lexicon, Vec<VideoSample>) {
        generate_world(
            2,
            &WorldConfig {
                num_train: 24,
                num_eval: 6,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn model_for(lex: &Lexicon, samples: &[VideoSample], seed: u64) -> ToyMllm {
        ToyMllm::new(model_config(lex, samples, seed, 0.07).unwrap()).unwrap()
    }

    #[test]
    fn toggles_off_leave_squeezer_untouched() {
        let (lex, samples) = tiny();
        let init = model_for(&lex, &samples, 1);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        }
        .with_ablation(Ablation::Baseline);
        let train = split_of(&samples, Split::Train);
        let mut t = Trainer::new(init.clone(), cfg, &lex, &train).unwrap();
        let log = t.run().unwrap();
        for b in &log {
            assert_eq!(b.l_total, b.l_g);
            assert_eq!((b.l_video, b.l_obj, b.l_act), (0.0, 0.0, 0.0));
        }
        for (name, before) in init.params().iter() {
            let after = t.model.params().by_name(name).unwrap();
            if name.starts_with("squeezer.") {
                assert_eq!(before, after, "{name}");
            }
        }
        assert_ne!(init.params().by_name("mllm.out_w"), t.model.params().by_name("mllm.out_w"));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (lex, samples) = tiny();
        let train = split_of(&samples, Split::Train);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            let mut t = Trainer::new(model_for(&lex, &samples, 3), cfg.clone(), &lex, &train).unwrap();
            let log = t.run().unwrap();
            (t.model, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn full_batch_reports_all_losses() {
        let (lex, samples) = tiny();
        let m = model_for(&lex, &samples, 4);
        let batch: Vec<&VideoSample> = samples.iter().take(4).collect();
        let hall = hallucinate_batch(&m, &lex, &batch).unwrap();
        let mut s = m.session(true).unwrap();
        let opts = GraphOptions {
            toggles: Ablation::Full.toggles(),
            alpha: 0.25,
            beta: 0.5,
            tau: 0.07,
            frozen: None,
        };
        let g = build_batch_graph(&mut s, &lex, &batch, &hall, opts).unwrap();
        let b = &g.breakdown;
        assert!(b.l_g > 0.0 && b.l_video > 0.0 && b.l_obj > 0.0 && b.l_act > 0.0);
        assert_eq!(b.l_total, b.compose());
        assert!(b.warnings.is_empty());
        assert_eq!(g.selections.iter().map(Vec::len).sum::<usize>(), batch.iter().map(|s| s.gt_actions.len()).sum::<usize>());
    }

    #[test]
    fn uniform_decoder_gives_log_vocab() {
        let (lex, samples) = tiny();
        let mut m = model_for(&lex, &samples, 5);
        m.zero_lm_head();
        let batch: Vec<&VideoSample> = samples.iter().take(3).collect();
        let mut s = m.session(true).unwrap();
        let opts = GraphOptions {
            toggles: Ablation::Baseline.toggles(),
            alpha: 0.0,
            beta: 0.0,
            tau: 0.07,
            frozen: None,
        };
        let g = build_batch_graph(&mut s, &lex, &batch, &[None, None, None], opts).unwrap();
        assert!((g.breakdown.l_g - (lex.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }
}
