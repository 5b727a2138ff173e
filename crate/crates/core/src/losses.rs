//! Contrastive alignment objectives and the combined training loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what} feature is not unit norm (norm {norm})")]
    NotUnit { what: &'static str, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("loss weights must be non-negative (alpha {alpha}, beta {beta})")]
    Weights { alpha: f64, beta: f64 },
}

pub type Result<T> = std::result::Result<T, LossError>;

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.07;

const UNIT_TOL: f64 = 1e-6;

fn check_unit(tape: &Tape, v: Var, what: &'static str) -> Result<()> {
    let t = tape.value(v);
    for r in 0..t.rows() {
        let norm = crate::tensor::l2_norm(t.row_slice(r));
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(LossError::NotUnit { what, norm });
        }
    }
    Ok(())
}

/// `-log(phi(a,p) / (phi(a,p) + sum_n phi(a,n)))` with `phi = exp(cos / tau)`,
/// for unit-norm `[1, d]` features. Zero when `negatives` is empty.
pub fn info_nce(tape: &mut Tape, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    check_unit(tape, anchor, "anchor")?;
    check_unit(tape, positive, "positive")?;
    for &n in negatives {
        check_unit(tape, n, "negative")?;
    }
    if negatives.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let mut rows = Vec::with_capacity(negatives.len() + 1);
    rows.push(positive);
    rows.extend_from_slice(negatives);
    let candidates = tape.concat_rows(&rows)?;
    let ct = tape.transpose(candidates)?;
    let sims = tape.matmul(anchor, ct)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    Ok(tape.cross_entropy(logits, &[0])?)
}

/// One positive visual/text pair with its negative pools.
///
/// `text_negatives` and `hard_text_negatives` are contrasted against the
/// visual anchor; `visual_negatives` against the text anchor.
#[derive(Debug, Clone, Default)]
pub struct PairedTerm {
    pub visual: Option<Var>,
    pub text: Option<Var>,
    pub visual_negatives: Vec<Var>,
    pub text_negatives: Vec<Var>,
    pub hard_text_negatives: Vec<Var>,
}

impl PairedTerm {
    pub fn new(visual: Var, text: Var) -> Self {
        Self {
            visual: Some(visual),
            text: Some(text),
            ..Default::default()
        }
    }

    fn pair(&self) -> (Var, Var) {
        (self.visual.expect("paired term without visual"), self.text.expect("paired term without text"))
    }
}

/// Video-caption terms, tracklet-object terms and squeezed-action terms of a
/// batch.
#[derive(Debug, Clone, Default)]
pub struct ContrastiveBatch {
    pub video: Vec<PairedTerm>,
    pub objects: Vec<PairedTerm>,
    pub actions: Vec<PairedTerm>,
}

/// `1/2 [info_nce(text, visual, V-) + info_nce(visual, text, T- u hard)]`.
pub fn paired_loss(tape: &mut Tape, term: &PairedTerm, tau: f64) -> Result<Var> {
    let (v, t) = term.pair();
    let t2v = info_nce(tape, t, v, &term.visual_negatives, tau)?;
    let mut pool = term.text_negatives.clone();
    pool.extend_from_slice(&term.hard_text_negatives);
    let v2t = info_nce(tape, v, t, &pool, tau)?;
    let both = tape.add(t2v, v2t)?;
    Ok(tape.scale(both, 0.5)?)
}

fn mean_paired(tape: &mut Tape, terms: &[PairedTerm], tau: f64) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let mut acc: Option<Var> = None;
    for term in terms {
        let l = paired_loss(tape, term, tau)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), 1.0 / terms.len() as f64)?)
}

pub fn l_video(tape: &mut Tape, batch: &ContrastiveBatch, tau: f64) -> Result<Var> {
    mean_paired(tape, &batch.video, tau)
}

/// Zero (with [`LossWarning::NoObjects`] reported by [`l_total`]) when the
/// batch has no annotated objects.
pub fn l_obj(tape: &mut Tape, batch: &ContrastiveBatch, tau: f64) -> Result<Var> {
    mean_paired(tape, &batch.objects, tau)
}

pub fn l_act(tape: &mut Tape, batch: &ContrastiveBatch, tau: f64) -> Result<Var> {
    mean_paired(tape, &batch.actions, tau)
}

/// Token-weighted mean of per-caption next-token cross-entropies, given as
/// `(mean cross-entropy, number of predicted tokens)` pairs.
pub fn l_g(tape: &mut Tape, per_caption: &[(Var, usize)]) -> Result<Var> {
    let total: usize = per_caption.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let mut acc: Option<Var> = None;
    for &(ce, n) in per_caption {
        let w = tape.scale(ce, n as f64 / total as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, w)?,
            None => w,
        });
    }
    Ok(acc.expect("nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossWarning {
    NoObjects,
    NoActions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_video: f64,
    pub l_obj: f64,
    pub l_act: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub warnings: Vec<LossWarning>,
}

impl LossBreakdown {
    /// The combined objective recomputed from the parts.
    pub fn compose(&self) -> f64 {
        self.alpha * (self.l_obj + self.l_act) + self.beta * self.l_video + self.l_g
    }

    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_video, self.l_obj, self.l_act, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Scalar loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub l_g: Var,
    pub l_video: Var,
    pub l_obj: Var,
    pub l_act: Var,
}

/// `alpha (L_obj + L_act) + beta L_video + L_g`, recorded on the tape so the
/// value equals [`LossBreakdown::compose`] bit for bit.
pub fn l_total(tape: &mut Tape, parts: LossParts, alpha: f64, beta: f64, tau: f64) -> Result<(Var, LossBreakdown)> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(LossError::Weights { alpha, beta });
    }
    let oa = tape.add(parts.l_obj, parts.l_act)?;
    let oa = tape.scale(oa, alpha)?;
    let v = tape.scale(parts.l_video, beta)?;
    let sum = tape.add(oa, v)?;
    let total = tape.add(sum, parts.l_g)?;
    let val = |tape: &Tape, v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        l_g: val(tape, parts.l_g),
        l_video: val(tape, parts.l_video),
        l_obj: val(tape, parts.l_obj),
        l_act: val(tape, parts.l_act),
        l_total: val(tape, total),
        alpha,
        beta,
        tau,
        warnings: Vec::new(),
    };
    Ok((total, breakdown))
}
