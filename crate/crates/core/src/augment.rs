//! Hallucinative self-augmentation: greedy decoding with every ground-truth
//! object and action token (and their one-hop synonyms and hypernyms)
//! forbidden, producing plausible but wrong captions used as hard negatives.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::corpus::VideoSample;
use crate::lexicon::{Category, Lexicon, LexiconError, TokenId};
use crate::model::{argmax, ModelError, ToyMllm};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("suppression set covers the entire support of the distribution")]
    Degenerate,
    #[error("sample {sample}: suppression set covers the entire support at decoding step {step}")]
    DegenerateStep { sample: String, step: usize },
    #[error("decode length must be at least 1")]
    ZeroLength,
    #[error("top-k sampling needs k >= 1")]
    ZeroTopK,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

pub type SuppressionSet = BTreeSet<TokenId>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HallucinativeCaption {
    pub sample_id: String,
    pub tokens: Vec<TokenId>,
    pub t_dec: usize,
    /// Fingerprint of the frozen parameters that produced the caption.
    pub snapshot_id: u64,
}

/// Expanded ground-truth object tokens united with expanded action verbs.
pub fn build_suppression_set(sample: &VideoSample, lexicon: &Lexicon) -> Result<SuppressionSet, AugmentError> {
    let mut omega = lexicon.expand_token_set(&sample.object_tokens())?;
    omega.extend(lexicon.expand_token_set(&sample.action_tokens())?);
    let mut kept = SuppressionSet::new();
    for t in omega {
        if lexicon.category(t)? != Category::Other {
            kept.insert(t);
        }
    }
    Ok(kept)
}

/// Zeroes suppressed entries and renormalizes the rest.
pub fn suppressed_distribution(dist: &[f64], omega: &SuppressionSet) -> Result<Vec<f64>, AugmentError> {
    let allowed: f64 = dist
        .iter()
        .enumerate()
        .filter(|(i, _)| !omega.contains(i))
        .map(|(_, p)| p)
        .sum();
    if !(allowed > 0.0) {
        return Err(AugmentError::Degenerate);
    }
    Ok(dist
        .iter()
        .enumerate()
        .map(|(i, &p)| if omega.contains(&i) { 0.0 } else { p / allowed })
        .collect())
}

/// Stable fingerprint of a parameter snapshot (FNV-1a over the raw bits).
pub fn snapshot_id(model: &ToyMllm) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in model.params().tensors() {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

fn decode_with<F>(
    snapshot: &ToyMllm,
    sample: &VideoSample,
    omega: &SuppressionSet,
    t_dec: usize,
    mut choose: F,
) -> Result<HallucinativeCaption, AugmentError>
where
    F: FnMut(&[f64]) -> TokenId,
{
    if t_dec == 0 {
        return Err(AugmentError::ZeroLength);
    }
    let mut degenerate = None;
    let rolled = snapshot.rollout(sample, t_dec, |step, dist| match suppressed_distribution(dist, omega) {
        Ok(sup) => Ok(choose(&sup)),
        Err(_) => {
            degenerate = Some(step);
            Err(ModelError::Input(String::new()))
        }
    });
    let tokens = match (rolled, degenerate) {
        (_, Some(step)) => {
            return Err(AugmentError::DegenerateStep {
                sample: sample.sample_id.clone(),
                step,
            })
        }
        (r, None) => r?,
    };
    Ok(HallucinativeCaption {
        sample_id: sample.sample_id.clone(),
        tokens,
        t_dec,
        snapshot_id: snapshot_id(snapshot),
    })
}

/// Greedy decoding under the suppressed distribution. Stops at `<eos>` or
/// after `t_dec` tokens.
pub fn generate_hallucinative(
    snapshot: &ToyMllm,
    sample: &VideoSample,
    omega: &SuppressionSet,
    t_dec: usize,
) -> Result<HallucinativeCaption, AugmentError> {
    decode_with(snapshot, sample, omega, t_dec, argmax)
}

/// Stochastic variant: samples each token from the `top_k` most likely
/// allowed tokens, renormalized.
pub fn sample_hallucinative<R: Rng>(
    snapshot: &ToyMllm,
    sample: &VideoSample,
    omega: &SuppressionSet,
    t_dec: usize,
    top_k: usize,
    rng: &mut R,
) -> Result<HallucinativeCaption, AugmentError> {
    if top_k == 0 {
        return Err(AugmentError::ZeroTopK);
    }
    decode_with(snapshot, sample, omega, t_dec, |dist| {
        let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        order.truncate(top_k);
        let mass: f64 = order.iter().map(|&i| dist[i]).sum();
        let mut u = rng.random::<f64>() * mass;
        for &i in &order {
            u -= dist[i];
            if u <= 0.0 {
                return i;
            }
        }
        *order.last().expect("nonempty support")
    })
}

/// Default decode length: the ground-truth caption length.
pub fn default_t_dec(sample: &VideoSample) -> usize {
    sample.caption.len().max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_world, WorldConfig};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_world() -> (Lexicon, Vec<VideoSample>) {
        generate_world(
            1,
            &WorldConfig {
                num_train: 30,
                num_eval: 0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn child_and_stand_expand_to_six_tokens() {
        let (lex, corpus) = small_world();
        let id = |s: &str| lex.find(s).unwrap();
        let mut s = corpus[0].clone();
        s.gt_objects = [(id("child"), 0)].into_iter().collect();
        s.gt_actions = vec![crate::corpus::Relation {
            verb: id("stand"),
            subject: 0,
            object: 0,
        }];
        let omega = build_suppression_set(&s, &lex).unwrap();
        let want: SuppressionSet = ["child", "kid", "person", "stand", "get_up", "move"].iter().map(|w| id(w)).collect();
        assert_eq!(omega, want);
    }

    #[test]
    fn no_annotations_give_empty_set() {
        let (lex, corpus) = small_world();
        let mut s = corpus[0].clone();
        s.gt_objects.clear();
        s.gt_actions.clear();
        assert!(build_suppression_set(&s, &lex).unwrap().is_empty());
    }

    #[test]
    fn suppression_set_covers_ground_truth() {
        let (lex, corpus) = small_world();
        for s in &corpus {
            let omega = build_suppression_set(s, &lex).unwrap();
            assert!(s.object_tokens().is_subset(&omega));
            assert!(s.action_tokens().is_subset(&omega));
            assert!(omega.iter().all(|&t| lex.category(t).unwrap() != Category::Other));
        }
    }

    #[test]
    fn renormalization_examples() {
        let d = [0.5, 0.3, 0.2];
        let out = suppressed_distribution(&d, &[0].into_iter().collect()).unwrap();
        assert!((out[0]).abs() == 0.0 && (out[1] - 0.6).abs() < 1e-12 && (out[2] - 0.4).abs() < 1e-12);
        assert_eq!(suppressed_distribution(&d, &SuppressionSet::new()).unwrap(), d.to_vec());
        assert_eq!(suppressed_distribution(&d, &[0, 2].into_iter().collect()).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            suppressed_distribution(&d, &[0, 1, 2].into_iter().collect()),
            Err(AugmentError::Degenerate)
        ));
    }

    #[test]
    fn empty_omega_matches_unconstrained_greedy() {
        let (lex, corpus) = small_world();
        let m = ToyMllm::new(ModelConfig::for_lexicon(&lex, 8, 32, 3).unwrap()).unwrap();
        for s in &corpus[..5] {
            let free = m.rollout(s, 6, |_, d| Ok(argmax(d))).unwrap();
            let ch = generate_hallucinative(&m, s, &SuppressionSet::new(), 6).unwrap();
            assert_eq!(ch.tokens, free);
        }
    }

    #[test]
    fn degenerate_step_is_named() {
        let (lex, corpus) = small_world();
        let m = ToyMllm::new(ModelConfig::for_lexicon(&lex, 8, 32, 3).unwrap()).unwrap();
        let all: SuppressionSet = (0..lex.len()).collect();
        let err = generate_hallucinative(&m, &corpus[0], &all, 4).unwrap_err();
        assert!(matches!(err, AugmentError::DegenerateStep { step: 0, .. }), "{err}");
        assert!(err.to_string().contains("step 0"));
        assert!(matches!(
            generate_hallucinative(&m, &corpus[0], &SuppressionSet::new(), 0),
            Err(AugmentError::ZeroLength)
        ));
    }

    #[test]
    fn generation_is_deterministic_and_tagged() {
        let (lex, corpus) = small_world();
        let m = ToyMllm::new(ModelConfig::for_lexicon(&lex, 8, 32, 5).unwrap()).unwrap();
        let s = &corpus[2];
        let omega = build_suppression_set(s, &lex).unwrap();
        let a = generate_hallucinative(&m, s, &omega, default_t_dec(s)).unwrap();
        let b = generate_hallucinative(&m, s, &omega, default_t_dec(s)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.snapshot_id, snapshot_id(&m));
        assert!(a.tokens.len() <= s.caption.len());
    }

    #[test]
    fn top_k_sampling_respects_suppression() {
        let (lex, corpus) = small_world();
        let m = ToyMllm::new(ModelConfig::for_lexicon(&lex, 8, 32, 5).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &corpus {
            let omega = build_suppression_set(s, &lex).unwrap();
            let ch = sample_hallucinative(&m, s, &omega, 8, 3, &mut rng).unwrap();
            assert!(ch.tokens.iter().all(|t| !omega.contains(t)));
        }
        let omega = build_suppression_set(&corpus[0], &lex).unwrap();
        let greedy = generate_hallucinative(&m, &corpus[0], &omega, 8).unwrap();
        let top1 = sample_hallucinative(&m, &corpus[0], &omega, 8, 1, &mut rng).unwrap();
        assert_eq!(greedy, top1);
    }
}
