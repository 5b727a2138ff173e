//! Toy multimodal captioner and the action squeezer.
//!
//! The captioner has a per-frame visual encoder pooled into video and
//! tracklet features, a causal token-mixing text encoder whose final hidden
//! states feed both the contrastive heads and the LM head, and an LM head that
//! reads the video through its similarity to every token's phrase feature.
//! The squeezer distills an action feature from the frame tokens of two
//! tracklets with learnable queries, one cross-attention layer and a
//! two-layer feedforward block.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VideoSample;
use crate::lexicon::{Lexicon, TokenId};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Axis, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("prefix of length {len} exceeds decoder context of {max}")]
    Context { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_vis: usize,
    pub d_tok: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub frames: usize,
    pub num_queries: usize,
    pub tau: f64,
    pub seed: u64,
    pub bos: TokenId,
    pub eos: TokenId,
    /// Use the (projected) input embeddings as the LM output matrix.
    pub tie_lm_head: bool,
}

impl ModelConfig {
    /// Defaults sized for a lexicon; `frames` and `d_vis` must match the corpus.
    pub fn for_lexicon(lexicon: &Lexicon, frames: usize, d_vis: usize, seed: u64) -> Result<Self> {
        let bos = lexicon.bos().ok_or_else(|| ModelError::Input("lexicon has no <bos> token".into()))?;
        let eos = lexicon.eos().ok_or_else(|| ModelError::Input("lexicon has no <eos> token".into()))?;
        Ok(Self {
            d_vis,
            d_tok: 16,
            d_model: 32,
            vocab_size: lexicon.len(),
            context_len: 12,
            frames,
            num_queries: 16,
            tau: 0.07,
            seed,
            bos,
            eos,
            tie_lm_head: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_vis, self.d_tok, self.d_model, self.vocab_size, self.context_len];
        if dims.iter().any(|&d| d < 2) {
            return Err(ModelError::Input("all model dimensions must be >= 2".into()));
        }
        if self.num_queries < 1 || self.frames < 1 {
            return Err(ModelError::Input("num_queries and frames must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ModelError::Input("temperature must be positive".into()));
        }
        if self.bos >= self.vocab_size || self.eos >= self.vocab_size {
            return Err(ModelError::Input("special tokens outside vocabulary".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MllmIds {
    frame_w: ParamId,
    frame_b: ParamId,
    frame_pos: ParamId,
    visual_head: ParamId,
    embed: ParamId,
    text_pos: ParamId,
    text_in: ParamId,
    mix: ParamId,
    mlp_w: ParamId,
    mlp_b: ParamId,
    text_head: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ground_scale: ParamId,
    attend: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct SqueezerIds {
    queries: ParamId,
    role: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

/// Both trainable modules: the captioner and the action squeezer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMllm {
    config: ModelConfig,
    params: ParamStore,
    m: MllmIds,
    a: SqueezerIds,
}

const CHECKPOINT_MAGIC: &str = "halalign-checkpoint 1";

impl ToyMllm {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (dv, dt, d, v, l) = (config.d_vis, config.d_tok, config.d_model, config.vocab_size, config.context_len);
        let m = MllmIds {
            frame_w: p.add_random(&mut rng, "mllm.frame_w", dv, d, dv),
            frame_b: p.add("mllm.frame_b", Tensor::zeros(&[1, d])),
            frame_pos: p.add_random(&mut rng, "mllm.frame_pos", config.frames, d, 4 * d),
            visual_head: p.add_random(&mut rng, "mllm.visual_head", d, d, d),
            embed: p.add_random(&mut rng, "mllm.embed", v, dt, 1),
            text_pos: p.add_random(&mut rng, "mllm.text_pos", l, dt, 4),
            text_in: p.add_random(&mut rng, "mllm.text_in", dt, d, dt),
            mix: p.add("mllm.mix", prefix_mean(l)),
            mlp_w: p.add_random(&mut rng, "mllm.mlp_w", d, d, d),
            mlp_b: p.add("mllm.mlp_b", Tensor::zeros(&[1, d])),
            text_head: p.add_random(&mut rng, "mllm.text_head", d, d, d),
            out_w: p.add_random(&mut rng, "mllm.out_w", d, v, d),
            out_b: p.add("mllm.out_b", Tensor::zeros(&[1, v])),
            ground_scale: p.add("mllm.ground_scale", Tensor::scalar(1.0)),
            attend: p.add_random(&mut rng, "mllm.attend", d, d, d),
        };
        let a = SqueezerIds {
            queries: p.add_random(&mut rng, "squeezer.queries", config.num_queries, d, 1),
            role: p.add_random(&mut rng, "squeezer.role", 2, d, 4 * d),
            wq: p.add_random(&mut rng, "squeezer.wq", d, d, d),
            wk: p.add_random(&mut rng, "squeezer.wk", d, d, d),
            wv: p.add_random(&mut rng, "squeezer.wv", d, d, d),
            ffn_w1: p.add_random(&mut rng, "squeezer.ffn_w1", d, 2 * d, d),
            ffn_b1: p.add("squeezer.ffn_b1", Tensor::zeros(&[1, 2 * d])),
            ffn_w2: p.add_random(&mut rng, "squeezer.ffn_w2", 2 * d, d, 2 * d),
            ffn_b2: p.add("squeezer.ffn_b2", Tensor::zeros(&[1, d])),
        };
        Ok(Self { config, params: p, m, a })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.config.tau = tau;
    }

    /// Zeroes the LM output weights, bias and grounding scale.
    pub fn zero_lm_head(&mut self) {
        for id in [self.m.out_w, self.m.out_b, self.m.ground_scale] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Opens a forward session; `trainable` marks every parameter as a
    /// gradient leaf.
    pub fn session(&self, trainable: bool) -> Result<Session<'_>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, trainable)?;
        Ok(Session { model: self, tape, p })
    }

    pub fn encode_video(&self, sample: &VideoSample) -> Result<Vec<f64>> {
        let mut s = self.session(false)?;
        let v = s.video_feature(sample)?;
        Ok(s.tape.value(v).data().to_vec())
    }

    pub fn encode_tracklet(&self, frames: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut s = self.session(false)?;
        let tokens = s.tracklet_tokens(frames)?;
        let t = s.tracklet_feature(tokens)?;
        Ok(s.tape.value(t).data().to_vec())
    }

    pub fn encode_phrase(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut s = self.session(false)?;
        let p = s.phrase_feature(tokens)?;
        Ok(s.tape.value(p).data().to_vec())
    }

    /// Per-instance visual tokens the decoder attends over.
    pub fn encode_visual(&self, sample: &VideoSample) -> Result<VisualInput> {
        let mut s = self.session(false)?;
        let v = s.visual_tokens(sample)?;
        Ok(VisualInput {
            keys: s.tape.value(v.keys).clone(),
            features: s.tape.value(v.features).clone(),
        })
    }

    /// Next-token distribution given visual tokens and the generated prefix
    /// (without the leading `<bos>`).
    pub fn decode_distribution(&self, visual: &VisualInput, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut s = self.session(false)?;
        let v = VisualTokens {
            keys: s.tape.constant(visual.keys.clone())?,
            features: s.tape.constant(visual.features.clone())?,
        };
        let ctx = s.decode_context(v)?;
        s.next_distribution(&ctx, prefix)
    }

    /// Greedy rollout from `<bos>`; `pick` chooses the token from each
    /// next-token distribution and `None` aborts the rollout with an error.
    pub fn rollout<F>(&self, sample: &VideoSample, max_len: usize, mut pick: F) -> Result<Vec<TokenId>>
    where
        F: FnMut(usize, &[f64]) -> Result<TokenId>,
    {
        let mut s = self.session(false)?;
        let v = s.visual_tokens(sample)?;
        let ctx = s.decode_context(v)?;
        let mut out = Vec::new();
        let max_len = max_len.min(self.config.context_len - 1);
        for step in 0..max_len {
            let dist = s.next_distribution(&ctx, &out)?;
            let tok = pick(step, &dist)?;
            if tok == self.config.eos {
                break;
            }
            out.push(tok);
        }
        Ok(out)
    }

    /// Unconstrained greedy captioning.
    pub fn greedy_caption(&self, sample: &VideoSample) -> Result<Vec<TokenId>> {
        self.rollout(sample, self.config.context_len - 1, |_, dist| Ok(argmax(dist)))
    }

    /// Squeezes an action feature from two tracklets, selecting the query
    /// output closest to `action_phrase`.
    pub fn action_squeeze(&self, tracklets: &[&[Vec<f64>]], action_phrase: &[f64]) -> Result<(Vec<f64>, usize)> {
        let mut s = self.session(false)?;
        let tokens = tracklets
            .iter()
            .map(|fr| s.tracklet_tokens(fr))
            .collect::<Result<Vec<_>>>()?;
        let phrase = s.tape.constant(Tensor::row(action_phrase.to_vec()))?;
        let (t, k) = s.action_squeeze(&tokens, phrase, None)?;
        Ok((s.tape.value(t).data().to_vec(), k))
    }

    /// All query outputs of the squeezer (unit rows), for inspection.
    pub fn squeezer_outputs(&self, tracklets: &[&[Vec<f64>]]) -> Result<Tensor> {
        let mut s = self.session(false)?;
        let tokens = tracklets
            .iter()
            .map(|fr| s.tracklet_tokens(fr))
            .collect::<Result<Vec<_>>>()?;
        let out = s.squeezer_outputs(&tokens)?;
        Ok(s.tape.value(out).clone())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        let _ = writeln!(out, "config\t{cfg}");
        for (name, t) in self.params.iter() {
            let shape = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            let vals = t.data().iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "param\t{name}\t{shape}\t{vals}");
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing or unsupported header".into()));
        }
        let cfg_line = lines.next().ok_or_else(|| bad("missing config line".into()))?;
        let cfg_json = cfg_line.strip_prefix("config\t").ok_or_else(|| bad("malformed config line".into()))?;
        let config: ModelConfig = serde_json::from_str(cfg_json).map_err(|e| bad(e.to_string()))?;
        let mut model = Self::new(config)?;
        let mut seen = 0;
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 || fields[0] != "param" {
                return Err(bad(format!("line {}: malformed parameter record", i + 3)));
            }
            let shape = fields[2]
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape `{}`", fields[2]))))
                .collect::<Result<Vec<_>>>()?;
            let data = fields[3]
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data)?;
            let slot = model
                .params
                .by_name_mut(fields[1])
                .ok_or_else(|| bad(format!("unknown parameter {}", fields[1])))?;
            if slot.shape() != tensor.shape() {
                return Err(bad(format!("shape mismatch for {}", fields[1])));
            }
            *slot = tensor;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(bad(format!("expected {} parameters, found {seen}", model.params.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

/// Lower-triangular prefix-mean mixing matrix.
fn prefix_mean(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..=i {
            data[i * l + j] = 1.0 / (i + 1) as f64;
        }
    }
    Tensor::matrix(l, l, data).expect("positive dims")
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-instance visual tokens: pooled frame tokens used as attention keys and
/// the unit-norm tracklet features, both `[n, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub keys: Tensor,
    pub features: Tensor,
}

/// Tape handles of [`VisualInput`].
#[derive(Debug, Clone, Copy)]
pub struct VisualTokens {
    pub keys: Var,
    pub features: Var,
}

/// Attention keys and the similarity of every visual token to every phrase
/// feature, cached for repeated decoding steps.
#[derive(Debug, Clone, Copy)]
pub struct DecodeContext {
    pub keys: Var,
    /// `features * phrase_table^T`, `[n, V]`.
    pub similarities: Var,
}

/// A tape with the model's parameters bound, used to build forward graphs.
pub struct Session<'m> {
    model: &'m ToyMllm,
    pub tape: Tape,
    p: Bound,
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m ToyMllm {
        self.model
    }

    pub fn bound(&self) -> &Bound {
        &self.p
    }

    fn frames_tensor(frames: &[Vec<f64>], d_vis: usize) -> Result<Tensor> {
        if frames.is_empty() {
            return Err(ModelError::Input("tracklet has no frames".into()));
        }
        if frames.iter().any(|f| f.len() != d_vis) {
            return Err(ModelError::Input(format!("frame features must have dimension {d_vis}")));
        }
        Ok(Tensor::from_rows(frames)?)
    }

    /// Per-frame visual tokens without temporal position.
    fn frame_tokens(&mut self, x: Var) -> Result<Var> {
        let m = &self.model.m;
        let h = self.tape.matmul(x, self.p[m.frame_w])?;
        let h = self.tape.add(h, self.p[m.frame_b])?;
        Ok(self.tape.tanh(h)?)
    }

    fn visual_head(&mut self, pooled: Var) -> Result<Var> {
        let proj = self.tape.matmul(pooled, self.p[self.model.m.visual_head])?;
        Ok(self.tape.normalize_rows(proj)?)
    }

    /// Pooled, unit-norm video feature over all frames of all instances.
    pub fn video_feature(&mut self, sample: &VideoSample) -> Result<Var> {
        if sample.tracklets.is_empty() {
            return Err(ModelError::Input(format!("sample {} has no tracklets", sample.sample_id)));
        }
        let rows: Vec<Vec<f64>> = sample.tracklets.values().flatten().cloned().collect();
        let x = Self::frames_tensor(&rows, self.model.config.d_vis)?;
        let x = self.tape.constant(x)?;
        let g = self.frame_tokens(x)?;
        let pooled = self.tape.mean_pool(g, Axis::Rows)?;
        self.visual_head(pooled)
    }

    /// Order-sensitive per-frame tokens of one tracklet, `[F, d_model]`.
    pub fn tracklet_tokens(&mut self, frames: &[Vec<f64>]) -> Result<Var> {
        let cfg = &self.model.config;
        if frames.len() != cfg.frames {
            return Err(ModelError::Input(format!(
                "tracklet has {} frames, model expects {}",
                frames.len(),
                cfg.frames
            )));
        }
        let x = Self::frames_tensor(frames, cfg.d_vis)?;
        let x = self.tape.constant(x)?;
        let m = &self.model.m;
        let h = self.tape.matmul(x, self.p[m.frame_w])?;
        let h = self.tape.add(h, self.p[m.frame_b])?;
        let h = self.tape.add(h, self.p[m.frame_pos])?;
        Ok(self.tape.tanh(h)?)
    }

    pub fn tracklet_feature(&mut self, tokens: Var) -> Result<Var> {
        let pooled = self.tape.mean_pool(tokens, Axis::Rows)?;
        self.visual_head(pooled)
    }

    /// Final hidden states (before the LM head) of a token sequence.
    pub fn text_hidden(&mut self, tokens: &[TokenId]) -> Result<Var> {
        let cfg = &self.model.config;
        if tokens.is_empty() {
            return Err(ModelError::Input("empty token sequence".into()));
        }
        if tokens.len() > cfg.context_len {
            return Err(ModelError::Context {
                len: tokens.len(),
                max: cfg.context_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::Input(format!("token {t} outside vocabulary")));
        }
        let m = &self.model.m;
        let emb = self.tape.select_rows(self.p[m.embed], tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = self.tape.select_rows(self.p[m.text_pos], &positions)?;
        let x = self.tape.add(emb, pos)?;
        let y = self.tape.matmul(x, self.p[m.text_in])?;
        let mixed = self.tape.causal_mix(self.p[m.mix], y)?;
        let z = self.tape.add(y, mixed)?;
        let h = self.tape.matmul(z, self.p[m.mlp_w])?;
        let h = self.tape.add(h, self.p[m.mlp_b])?;
        Ok(self.tape.tanh(h)?)
    }

    /// Unit-norm contrastive feature pooled from text hidden states.
    pub fn text_feature(&mut self, hidden: Var) -> Result<Var> {
        let pooled = self.tape.mean_pool(hidden, Axis::Rows)?;
        let proj = self.tape.matmul(pooled, self.p[self.model.m.text_head])?;
        Ok(self.tape.normalize_rows(proj)?)
    }

    pub fn phrase_feature(&mut self, tokens: &[TokenId]) -> Result<Var> {
        let h = self.text_hidden(tokens)?;
        self.text_feature(h)
    }

    /// Caption feature pooled over `<bos>` followed by the caption.
    pub fn caption_feature(&mut self, caption: &[TokenId]) -> Result<Var> {
        let seq = self.with_bos(caption);
        let h = self.text_hidden(&seq)?;
        self.text_feature(h)
    }

    pub fn with_bos(&self, caption: &[TokenId]) -> Vec<TokenId> {
        std::iter::once(self.model.config.bos).chain(caption.iter().copied()).collect()
    }

    /// Single-token phrase features for the whole vocabulary, `[V, d_model]`.
    /// Row `t` equals `phrase_feature(&[t])`.
    pub fn phrase_table(&mut self) -> Result<Var> {
        let m = &self.model.m;
        let pos0 = self.tape.select_rows(self.p[m.text_pos], &[0])?;
        let x = self.tape.add(self.p[m.embed], pos0)?;
        let y = self.tape.matmul(x, self.p[m.text_in])?;
        let a00 = self.tape.element(self.p[m.mix], 0, 0)?;
        let mixed = self.tape.mul(y, a00)?;
        let z = self.tape.add(y, mixed)?;
        let h = self.tape.matmul(z, self.p[m.mlp_w])?;
        let h = self.tape.add(h, self.p[m.mlp_b])?;
        let h = self.tape.tanh(h)?;
        let proj = self.tape.matmul(h, self.p[m.text_head])?;
        Ok(self.tape.normalize_rows(proj)?)
    }

    /// Pooled frame tokens and tracklet feature of one instance.
    pub fn instance_token(&mut self, tokens: Var) -> Result<(Var, Var)> {
        let pooled = self.tape.mean_pool(tokens, Axis::Rows)?;
        Ok((pooled, self.visual_head(pooled)?))
    }

    /// Stacks per-instance `(key, feature)` pairs in the given order.
    pub fn stack_visual(&mut self, instances: &[(Var, Var)]) -> Result<VisualTokens> {
        if instances.is_empty() {
            return Err(ModelError::Input("no visual tokens".into()));
        }
        let keys: Vec<Var> = instances.iter().map(|p| p.0).collect();
        let feats: Vec<Var> = instances.iter().map(|p| p.1).collect();
        Ok(VisualTokens {
            keys: self.tape.concat_rows(&keys)?,
            features: self.tape.concat_rows(&feats)?,
        })
    }

    /// Visual tokens of every instance, in instance order.
    pub fn visual_tokens(&mut self, sample: &VideoSample) -> Result<VisualTokens> {
        if sample.tracklets.is_empty() {
            return Err(ModelError::Input(format!("sample {} has no tracklets", sample.sample_id)));
        }
        let mut inst = Vec::with_capacity(sample.tracklets.len());
        for frames in sample.tracklets.values() {
            let tokens = self.tracklet_tokens(frames)?;
            inst.push(self.instance_token(tokens)?);
        }
        self.stack_visual(&inst)
    }

    pub fn decode_context(&mut self, visual: VisualTokens) -> Result<DecodeContext> {
        let table = self.phrase_table()?;
        self.decode_context_with(visual, table)
    }

    pub fn decode_context_with(&mut self, visual: VisualTokens, phrase_table: Var) -> Result<DecodeContext> {
        let t = self.tape.transpose(phrase_table)?;
        let similarities = self.tape.matmul(visual.features, t)?;
        Ok(DecodeContext {
            keys: visual.keys,
            similarities,
        })
    }

    fn output_matrix(&mut self) -> Result<Var> {
        let m = &self.model.m;
        if self.model.config.tie_lm_head {
            let e = self.tape.matmul(self.p[m.embed], self.p[m.text_in])?;
            Ok(self.tape.transpose(e)?)
        } else {
            Ok(self.p[m.out_w])
        }
    }

    /// LM logits for every position of `hidden`, `[L, V]`: the text head plus
    /// `s * attn(hidden, keys) * similarities`, where each position attends
    /// over the visual tokens.
    pub fn logits(&mut self, ctx: &DecodeContext, hidden: Var) -> Result<Var> {
        let m = &self.model.m;
        let w = self.output_matrix()?;
        let l = self.tape.matmul(hidden, w)?;
        let l = self.tape.add(l, self.p[m.out_b])?;
        let q = self.tape.matmul(hidden, self.p[m.attend])?;
        let vt = self.tape.transpose(ctx.keys)?;
        let scores = self.tape.matmul(q, vt)?;
        let attn = self.tape.softmax(scores)?;
        let g = self.tape.matmul(attn, ctx.similarities)?;
        let g = self.tape.mul(g, self.p[m.ground_scale])?;
        Ok(self.tape.add(l, g)?)
    }

    pub fn next_distribution(&mut self, ctx: &DecodeContext, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let max = self.model.config.context_len;
        if prefix.len() >= max {
            return Err(ModelError::Context { len: prefix.len(), max });
        }
        let seq = self.with_bos(prefix);
        let h = self.text_hidden(&seq)?;
        let last = self.tape.select_rows(h, &[seq.len() - 1])?;
        let logits = self.logits(ctx, last)?;
        let probs = self.tape.softmax(logits)?;
        Ok(self.tape.value(probs).data().to_vec())
    }

    /// Mean next-token cross-entropy of `caption` followed by `<eos>`, plus
    /// the hidden states of the `<bos>`-prefixed input.
    pub fn caption_nll(&mut self, ctx: &DecodeContext, caption: &[TokenId]) -> Result<(Var, Var)> {
        let input = self.with_bos(caption);
        let targets: Vec<TokenId> = caption
            .iter()
            .copied()
            .chain(std::iter::once(self.model.config.eos))
            .collect();
        let h = self.text_hidden(&input)?;
        let logits = self.logits(ctx, h)?;
        let ce = self.tape.cross_entropy(logits, &targets)?;
        Ok((ce, h))
    }

    /// All squeezer query outputs as unit rows, `[N_Q, d_model]`.
    pub fn squeezer_outputs(&mut self, tracklet_tokens: &[Var]) -> Result<Var> {
        if tracklet_tokens.len() != 2 {
            return Err(ModelError::Input(format!(
                "action squeezer expects exactly 2 tracklets, got {}",
                tracklet_tokens.len()
            )));
        }
        let a = &self.model.a;
        let mut parts = Vec::with_capacity(2);
        for (role, &tok) in tracklet_tokens.iter().enumerate() {
            let r = self.tape.select_rows(self.p[a.role], &[role])?;
            parts.push(self.tape.add(tok, r)?);
        }
        let kv = self.tape.concat_rows(&parts)?;
        let q = self.p[a.queries];
        let qp = self.tape.matmul(q, self.p[a.wq])?;
        let kp = self.tape.matmul(kv, self.p[a.wk])?;
        let vp = self.tape.matmul(kv, self.p[a.wv])?;
        let kt = self.tape.transpose(kp)?;
        let scores = self.tape.matmul(qp, kt)?;
        let scores = self.tape.scale(scores, 1.0 / (self.model.config.d_model as f64).sqrt())?;
        let attn = self.tape.softmax(scores)?;
        let ctx = self.tape.matmul(attn, vp)?;
        let o = self.tape.add(q, ctx)?;
        let hid = self.tape.matmul(o, self.p[a.ffn_w1])?;
        let hid = self.tape.add(hid, self.p[a.ffn_b1])?;
        let hid = self.tape.tanh(hid)?;
        let ff = self.tape.matmul(hid, self.p[a.ffn_w2])?;
        let ff = self.tape.add(ff, self.p[a.ffn_b2])?;
        let o2 = self.tape.add(o, ff)?;
        Ok(self.tape.normalize_rows(o2)?)
    }

    /// Returns the selected action feature and its query index. With
    /// `frozen` set the given index is used instead of the argmax.
    pub fn action_squeeze(&mut self, tracklet_tokens: &[Var], action_phrase: Var, frozen: Option<usize>) -> Result<(Var, usize)> {
        let outputs = self.squeezer_outputs(tracklet_tokens)?;
        let k = match frozen {
            Some(k) if k < self.model.config.num_queries => k,
            Some(k) => return Err(ModelError::Input(format!("query index {k} out of range"))),
            None => select_query(self.tape.value(outputs), self.tape.value(action_phrase).data()),
        };
        Ok((self.tape.select_rows(outputs, &[k])?, k))
    }
}

/// `argmax_k cos(outputs[k], phrase)`, lowest index on ties.
pub fn select_query(outputs: &Tensor, phrase: &[f64]) -> usize {
    let sims: Vec<f64> = (0..outputs.rows())
        .map(|k| crate::tensor::cosine(outputs.row_slice(k), phrase).unwrap_or(f64::NEG_INFINITY))
        .collect();
    argmax(&sims)
}
