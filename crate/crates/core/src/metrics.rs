//! Exact and weighted hallucination F-scores for predicted captions.
//!
//! The weighted variant replaces exact matching in the hallucination rate
//! with clamped cosine similarity of static token embeddings, and weights
//! coverage by tf-idf over the ground-truth caption.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VideoSample;
use crate::lexicon::{tf_idf, Category, CorpusStats, Lexicon, LexiconError, TokenId};
use crate::tensor::cosine;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("{0}")]
    Usage(String),
    #[error("missing predictions for samples: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("ground-truth token {token} of sample {sample} has zero tf-idf weight")]
    ZeroWeight { sample: String, token: TokenId },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Predicted and ground-truth token sets for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSetPair {
    pub predicted: BTreeSet<TokenId>,
    pub ground_truth: BTreeSet<TokenId>,
    pub category: Category,
}

/// Object and action sets of a caption; `other` tokens are dropped.
pub fn parse_prediction(caption: &[TokenId], lexicon: &Lexicon) -> Result<(BTreeSet<TokenId>, BTreeSet<TokenId>), MetricError> {
    let mut objects = BTreeSet::new();
    let mut actions = BTreeSet::new();
    for &t in caption {
        match lexicon.category(t)? {
            Category::Object => {
                objects.insert(t);
            }
            Category::Action => {
                actions.insert(t);
            }
            Category::Other => {}
        }
    }
    Ok((objects, actions))
}

/// A score plus whether an empty-set convention decided it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub vacuous: bool,
}

impl Flagged {
    fn new(value: f64) -> Self {
        Self { value, vacuous: false }
    }

    fn vacuous(value: f64) -> Self {
        Self { value, vacuous: true }
    }
}

/// `1 - mean_{p in P} max_{g in G} clamp01(cos(p, g))`.
/// Empty `P` gives 0 (flagged); empty `G` with non-empty `P` gives 1.
pub fn hal_weighted(predicted: &BTreeSet<TokenId>, ground_truth: &BTreeSet<TokenId>, lexicon: &Lexicon) -> Result<Flagged, MetricError> {
    if predicted.is_empty() {
        return Ok(Flagged::vacuous(0.0));
    }
    if ground_truth.is_empty() {
        return Ok(Flagged::vacuous(1.0));
    }
    let mut total = 0.0;
    for &p in predicted {
        let ep = lexicon.embedding(p)?;
        let mut best: f64 = 0.0;
        for &g in ground_truth {
            // Identical ids match exactly; cosine of a vector with itself can round below 1.
            if g == p {
                best = 1.0;
                break;
            }
            let c = cosine(ep, lexicon.embedding(g)?).map_err(|e| MetricError::Usage(e.to_string()))?;
            best = best.max(c.clamp(0.0, 1.0));
        }
        total += best;
    }
    Ok(Flagged::new(1.0 - total / predicted.len() as f64))
}

/// tf-idf weighted recall of exact-id matches. Empty `G` gives 1 (flagged).
pub fn cov_weighted(
    predicted: &BTreeSet<TokenId>,
    ground_truth: &BTreeSet<TokenId>,
    stats: &CorpusStats,
    gt_document: &[TokenId],
) -> Result<Flagged, MetricError> {
    if ground_truth.is_empty() {
        return Ok(Flagged::vacuous(1.0));
    }
    let mut hit = 0.0;
    let mut all = 0.0;
    for &g in ground_truth {
        let w = tf_idf(g, gt_document, stats);
        all += w;
        if predicted.contains(&g) {
            hit += w;
        }
    }
    if all <= 0.0 {
        return Err(MetricError::Usage("ground-truth tokens carry no tf-idf weight in their document".into()));
    }
    Ok(Flagged::new(hit / all))
}

pub fn hal_exact(predicted: &BTreeSet<TokenId>, ground_truth: &BTreeSet<TokenId>) -> Flagged {
    if predicted.is_empty() {
        return Flagged::vacuous(0.0);
    }
    let inter = predicted.intersection(ground_truth).count();
    Flagged::new(1.0 - inter as f64 / predicted.len() as f64)
}

pub fn cov_exact(predicted: &BTreeSet<TokenId>, ground_truth: &BTreeSet<TokenId>) -> Flagged {
    if ground_truth.is_empty() {
        return Flagged::vacuous(1.0);
    }
    let inter = predicted.intersection(ground_truth).count();
    Flagged::new(inter as f64 / ground_truth.len() as f64)
}

/// Harmonic mean of `1 - hal` and `cov`; 0 when both are 0.
pub fn f1(hal: f64, cov: f64) -> Result<f64, MetricError> {
    if !(0.0..=1.0).contains(&hal) || !(0.0..=1.0).contains(&cov) {
        return Err(MetricError::Usage(format!("f1 inputs must lie in [0,1], got hal={hal} cov={cov}")));
    }
    let precision = 1.0 - hal;
    let denom = precision + cov;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * cov / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Exact,
    Weighted,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Exact => "exact",
            Variant::Weighted => "weighted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub hal: f64,
    pub cov: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub variant: Variant,
    pub category: Category,
    pub scores: Scores,
    /// Samples where an empty prediction set fixed Hal.
    pub empty_predictions: usize,
    /// Samples where an empty ground-truth set fixed Cov.
    pub empty_ground_truth: usize,
}

/// Per-sample scores for both categories and variants.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub sample_id: String,
    /// Indexed as `[variant][category]` with Exact/Weighted and Object/Action.
    pub scores: [[(Scores, bool, bool); 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub rows: Vec<CategoryScores>,
    /// Mean cosine between paired pooled video and caption features.
    pub alignment_gap: Option<f64>,
}

impl MetricReport {
    pub fn get(&self, variant: Variant, category: Category) -> Scores {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.category == category)
            .map(|r| r.scores)
            .unwrap_or_default()
    }

    pub fn with_alignment_gap(mut self, gap: f64) -> Self {
        self.alignment_gap = Some(gap);
        self
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["variant", "category", "Hal", "Cov", "F1", "n_samples", "alignment_gap"])?;
        let gap = self.alignment_gap.map(|g| format!("{g:?}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.to_string(),
                r.category.to_string(),
                format!("{:?}", r.scores.hal),
                format!("{:?}", r.scores.cov),
                format!("{:?}", r.scores.f1),
                self.n_samples.to_string(),
                gap.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, MetricError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<(), MetricError> {
        std::fs::write(csv_path, self.to_csv_string()?)?;
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<9} {:<7} {:>7} {:>7} {:>7}", "variant", "cat", "Hal", "Cov", "F1")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<9} {:<7} {:>7.4} {:>7.4} {:>7.4}",
                r.variant.to_string(),
                r.category.to_string(),
                r.scores.hal,
                r.scores.cov,
                r.scores.f1
            )?;
        }
        write!(f, "samples: {}", self.n_samples)?;
        if let Some(g) = self.alignment_gap {
            write!(f, "  alignment gap (mean paired cosine): {g:.4}")?;
        }
        Ok(())
    }
}

fn score_one(
    variant: Variant,
    predicted: &BTreeSet<TokenId>,
    ground_truth: &BTreeSet<TokenId>,
    lexicon: &Lexicon,
    stats: &CorpusStats,
    document: &[TokenId],
) -> Result<(Scores, bool, bool), MetricError> {
    let (hal, cov) = match variant {
        Variant::Exact => (hal_exact(predicted, ground_truth), cov_exact(predicted, ground_truth)),
        Variant::Weighted => (
            hal_weighted(predicted, ground_truth, lexicon)?,
            cov_weighted(predicted, ground_truth, stats, document)?,
        ),
    };
    Ok((
        Scores {
            hal: hal.value,
            cov: cov.value,
            f1: f1(hal.value, cov.value)?,
        },
        hal.vacuous && predicted.is_empty(),
        cov.vacuous,
    ))
}

pub fn score_sample(
    prediction: &[TokenId],
    sample: &VideoSample,
    lexicon: &Lexicon,
    stats: &CorpusStats,
) -> Result<SampleScores, MetricError> {
    let (pred_obj, pred_act) = parse_prediction(prediction, lexicon)?;
    let gt_obj = sample.object_tokens();
    let gt_act = sample.action_tokens();
    for &t in gt_obj.iter().chain(&gt_act) {
        if tf_idf(t, &sample.caption, stats) <= 0.0 {
            return Err(MetricError::ZeroWeight {
                sample: sample.sample_id.clone(),
                token: t,
            });
        }
    }
    let mut scores = [[(Scores::default(), false, false); 2]; 2];
    for (vi, variant) in [Variant::Exact, Variant::Weighted].into_iter().enumerate() {
        scores[vi][0] = score_one(variant, &pred_obj, &gt_obj, lexicon, stats, &sample.caption)?;
        scores[vi][1] = score_one(variant, &pred_act, &gt_act, lexicon, stats, &sample.caption)?;
    }
    Ok(SampleScores {
        sample_id: sample.sample_id.clone(),
        scores,
    })
}

/// Macro-averaged report over `samples`; `predictions[i]` belongs to `samples[i]`.
/// Aggregation runs in sorted sample-id order.
pub fn evaluate_corpus(
    predictions: &[Option<Vec<TokenId>>],
    samples: &[VideoSample],
    lexicon: &Lexicon,
    stats: &CorpusStats,
) -> Result<MetricReport, MetricError> {
    if predictions.len() != samples.len() || predictions.iter().any(Option::is_none) {
        let missing: Vec<String> = samples
            .iter()
            .enumerate()
            .filter(|(i, _)| predictions.get(*i).map(Option::is_none).unwrap_or(true))
            .map(|(_, s)| s.sample_id.clone())
            .collect();
        return Err(MetricError::MissingPredictions(missing));
    }
    let mut per_sample = samples
        .iter()
        .zip(predictions)
        .map(|(s, p)| score_sample(p.as_deref().unwrap_or_default(), s, lexicon, stats))
        .collect::<Result<Vec<_>, _>>()?;
    per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(aggregate(&per_sample))
}

pub fn aggregate(per_sample: &[SampleScores]) -> MetricReport {
    let n = per_sample.len();
    let mut rows = Vec::with_capacity(4);
    for (vi, variant) in [Variant::Exact, Variant::Weighted].into_iter().enumerate() {
        for (ci, category) in [Category::Object, Category::Action].into_iter().enumerate() {
            let mut acc = Scores::default();
            let (mut empty_p, mut empty_g) = (0, 0);
            for s in per_sample {
                let (sc, ep, eg) = s.scores[vi][ci];
                acc.hal += sc.hal;
                acc.cov += sc.cov;
                acc.f1 += sc.f1;
                empty_p += ep as usize;
                empty_g += eg as usize;
            }
            if n > 0 {
                acc.hal /= n as f64;
                acc.cov /= n as f64;
                acc.f1 /= n as f64;
            }
            rows.push(CategoryScores {
                variant,
                category,
                scores: acc,
                empty_predictions: empty_p,
                empty_ground_truth: empty_g,
            });
        }
    }
    MetricReport {
        n_samples: n,
        rows,
        alignment_gap: None,
    }
}

/// tf-idf statistics over the ground-truth captions of `samples`.
pub fn eval_stats(samples: &[VideoSample]) -> CorpusStats {
    CorpusStats::from_documents(samples.iter().map(|s| s.caption.as_slice()))
}
