//! Browser front end: a small generated world and model, exposed to
//! JavaScript as JSON-returning calls.

use halalign::augment::{build_suppression_set, default_t_dec, generate_hallucinative, suppressed_distribution};
use halalign::corpus::{generate_world, split_of, Split, VideoSample, WorldConfig};
use halalign::lexicon::{Category, Lexicon, TokenId};
use halalign::losses::info_nce;
use halalign::metrics::{eval_stats, score_sample, Variant};
use halalign::model::ToyMllm;
use halalign::tensor::{Tape, Tensor};
use halalign::train::{model_config, Ablation, TrainConfig, Trainer};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const TOP_K: usize = 8;

#[derive(Serialize)]
struct Ranked {
    token: String,
    p: f64,
    suppressed: bool,
}

#[derive(Serialize)]
struct SuppressionView {
    sample_id: String,
    caption: String,
    omega: Vec<String>,
    greedy: String,
    hallucinated: String,
    first_step: Vec<Ranked>,
    first_step_suppressed: Vec<Ranked>,
}

#[derive(Serialize)]
struct ScoreRow {
    variant: String,
    category: String,
    hal: f64,
    cov: f64,
    f1: f64,
}

#[derive(Serialize)]
struct CurvePoint {
    tau: f64,
    loss: f64,
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    lexicon: Lexicon,
    samples: Vec<VideoSample>,
    model: ToyMllm,
    seed: u64,
    steps: usize,
}

impl Demo {
    pub fn create(seed: u64) -> Result<Demo, String> {
        let world = WorldConfig {
            num_train: 160,
            num_eval: 40,
            ..WorldConfig::default()
        };
        let (lexicon, samples) = generate_world(seed, &world).map_err(err)?;
        let model = ToyMllm::new(model_config(&lexicon, &samples, seed, 0.07).map_err(err)?).map_err(err)?;
        Ok(Demo {
            lexicon,
            samples,
            model,
            seed,
            steps: 0,
        })
    }

    /// Continues training with every loss enabled. Optimizer moments restart
    /// on each call.
    pub fn run_training(&mut self, steps: usize) -> Result<f64, String> {
        let train = split_of(&self.samples, Split::Train);
        let cfg = TrainConfig {
            steps,
            seed: self.seed.wrapping_add(self.steps as u64),
            ..TrainConfig::default()
        }
        .with_ablation(Ablation::Full);
        let mut trainer = Trainer::new(self.model.clone(), cfg, &self.lexicon, &train).map_err(err)?;
        let log = trainer.run().map_err(err)?;
        self.model = trainer.model;
        self.steps += steps;
        Ok(log.last().map(|b| b.l_total).unwrap_or(f64::NAN))
    }

    fn sample(&self, index: usize) -> Result<&VideoSample, String> {
        self.samples
            .get(index)
            .ok_or_else(|| format!("sample index {index} out of range (0..{})", self.samples.len()))
    }

    fn ranked(&self, dist: &[f64], omega: &std::collections::BTreeSet<TokenId>) -> Vec<Ranked> {
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
        order
            .into_iter()
            .take(TOP_K)
            .map(|t| Ranked {
                token: self.lexicon.surface(t).to_string(),
                p: dist[t],
                suppressed: omega.contains(&t),
            })
            .collect()
    }

    pub fn suppression_view(&self, index: usize) -> Result<String, String> {
        let s = self.sample(index)?;
        let omega = build_suppression_set(s, &self.lexicon).map_err(err)?;
        let greedy = self.model.greedy_caption(s).map_err(err)?;
        let ch = generate_hallucinative(&self.model, s, &omega, default_t_dec(s)).map_err(err)?;
        let visual = self.model.encode_visual(s).map_err(err)?;
        let dist = self.model.decode_distribution(&visual, &[]).map_err(err)?;
        let sup = suppressed_distribution(&dist, &omega).map_err(err)?;
        let view = SuppressionView {
            sample_id: s.sample_id.clone(),
            caption: self.lexicon.render(&s.caption),
            omega: omega.iter().map(|&t| self.lexicon.surface(t).to_string()).collect(),
            greedy: self.lexicon.render(&greedy),
            hallucinated: self.lexicon.render(&ch.tokens),
            first_step: self.ranked(&dist, &omega),
            first_step_suppressed: self.ranked(&sup, &omega),
        };
        serde_json::to_string(&view).map_err(err)
    }

    /// Scores a whitespace-separated caption against sample `index`.
    pub fn score_caption(&self, index: usize, caption: &str) -> Result<String, String> {
        let s = self.sample(index)?;
        let tokens: Vec<TokenId> = caption
            .split_whitespace()
            .map(|w| self.lexicon.find(w).ok_or_else(|| format!("unknown word `{w}`")))
            .collect::<Result<_, _>>()?;
        let stats = eval_stats(&self.samples);
        let scored = score_sample(&tokens, s, &self.lexicon, &stats).map_err(err)?;
        let mut rows = Vec::new();
        for (vi, variant) in [Variant::Exact, Variant::Weighted].into_iter().enumerate() {
            for (ci, category) in [Category::Object, Category::Action].into_iter().enumerate() {
                let sc = scored.scores[vi][ci].0;
                rows.push(ScoreRow {
                    variant: variant.to_string(),
                    category: category.to_string(),
                    hal: sc.hal,
                    cov: sc.cov,
                    f1: sc.f1,
                });
            }
        }
        serde_json::to_string(&rows).map_err(err)
    }

    pub fn vocabulary(&self) -> Vec<String> {
        self.lexicon
            .entries()
            .iter()
            .filter(|e| !e.surface.starts_with('<'))
            .map(|e| e.surface.clone())
            .collect()
    }
}

fn with_cos(c: f64) -> Vec<f64> {
    let c = c.clamp(-1.0, 1.0);
    vec![c, (1.0 - c * c).sqrt()]
}

/// Contrastive loss of a unit anchor against a positive and negatives with
/// the given cosines, for `n` temperatures spaced log-uniformly.
pub fn info_nce_curve(pos_cos: f64, neg_cos: &[f64], tau_min: f64, tau_max: f64, n: usize) -> Result<String, String> {
    if !(tau_min > 0.0 && tau_max >= tau_min) || n < 2 {
        return Err("need 0 < tau_min <= tau_max and at least 2 points".into());
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let tau = tau_min * (tau_max / tau_min).powf(i as f64 / (n - 1) as f64);
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(vec![1.0, 0.0])).map_err(err)?;
        let p = t.constant(Tensor::row(with_cos(pos_cos))).map_err(err)?;
        let negs = neg_cos
            .iter()
            .map(|&c| t.constant(Tensor::row(with_cos(c))))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let l = info_nce(&mut t, a, p, &negs, tau).map_err(err)?;
        points.push(CurvePoint {
            tau,
            loss: t.value(l).item(),
        });
    }
    serde_json::to_string(&points).map_err(err)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn js_new(seed: u32) -> Result<Demo, JsValue> {
        Demo::create(seed as u64).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = train)]
    pub fn js_train(&mut self, steps: u32) -> Result<f64, JsValue> {
        self.run_training(steps as usize).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(getter, js_name = stepsTrained)]
    pub fn steps_trained(&self) -> u32 {
        self.steps as u32
    }

    #[wasm_bindgen(getter, js_name = sampleCount)]
    pub fn sample_count(&self) -> u32 {
        self.samples.len() as u32
    }

    #[wasm_bindgen(js_name = suppression)]
    pub fn js_suppression(&self, index: u32) -> Result<String, JsValue> {
        self.suppression_view(index as usize).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = score)]
    pub fn js_score(&self, index: u32, caption: &str) -> Result<String, JsValue> {
        self.score_caption(index as usize, caption).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = words)]
    pub fn js_words(&self) -> String {
        self.vocabulary().join(" ")
    }
}

#[wasm_bindgen(js_name = infoNceCurve)]
pub fn js_info_nce_curve(pos_cos: f64, neg_cos: Vec<f64>, tau_min: f64, tau_max: f64, n: u32) -> Result<String, JsValue> {
    info_nce_curve(pos_cos, &neg_cos, tau_min, tau_max, n as usize).map_err(|e| JsValue::from_str(&e))
}
