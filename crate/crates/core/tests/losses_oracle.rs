use halalign::losses::{l_total, l_video, ContrastiveBatch, LossParts, PairedTerm, DEFAULT_ALPHA, DEFAULT_BETA};
use halalign::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const B: usize = 4;
const D: usize = 6;
const TAU: f64 = 0.07;

fn unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// -log softmax(0) over [a.p, a.n_1, ...] / tau, straight from the definition.
fn nce(a: &[f64], p: &[f64], negs: &[&Vec<f64>]) -> f64 {
    if negs.is_empty() {
        return 0.0;
    }
    let pos = (dot(a, p) / TAU).exp();
    let rest: f64 = negs.iter().map(|n| (dot(a, n) / TAU).exp()).sum();
    -(pos / (pos + rest)).ln()
}

#[test]
fn video_loss_matches_formula_on_random_batches() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vis: Vec<Vec<f64>> = (0..B).map(|_| unit(&mut rng)).collect();
        let txt: Vec<Vec<f64>> = (0..B).map(|_| unit(&mut rng)).collect();
        let hard: Vec<Vec<f64>> = (0..B).map(|_| unit(&mut rng)).collect();

        let mut oracle = 0.0;
        for i in 0..B {
            let vn: Vec<&Vec<f64>> = (0..B).filter(|&j| j != i).map(|j| &vis[j]).collect();
            let mut tn: Vec<&Vec<f64>> = (0..B).filter(|&j| j != i).map(|j| &txt[j]).collect();
            tn.push(&hard[i]);
            oracle += 0.5 * (nce(&txt[i], &vis[i], &vn) + nce(&vis[i], &txt[i], &tn));
        }
        oracle /= B as f64;

        let mut t = Tape::new();
        let mut var = |v: &Vec<f64>| t.constant(Tensor::row(v.clone())).unwrap();
        let vv: Vec<_> = vis.iter().map(&mut var).collect();
        let tv: Vec<_> = txt.iter().map(&mut var).collect();
        let hv: Vec<_> = hard.iter().map(&mut var).collect();
        let mut batch = ContrastiveBatch::default();
        for i in 0..B {
            let mut term = PairedTerm::new(vv[i], tv[i]);
            term.visual_negatives = (0..B).filter(|&j| j != i).map(|j| vv[j]).collect();
            term.text_negatives = (0..B).filter(|&j| j != i).map(|j| tv[j]).collect();
            term.hard_text_negatives = vec![hv[i]];
            batch.video.push(term);
        }
        let l = l_video(&mut t, &batch, TAU).unwrap();
        let got = t.value(l).item();
        assert!((got - oracle).abs() <= 1e-10, "seed {seed}: {got} vs {oracle}");

        let zero = t.constant(Tensor::scalar(0.0)).unwrap();
        let g = t.constant(Tensor::scalar(2.5)).unwrap();
        let parts = LossParts {
            l_g: g,
            l_video: l,
            l_obj: zero,
            l_act: zero,
        };
        let (total, b) = l_total(&mut t, parts, DEFAULT_ALPHA, DEFAULT_BETA, TAU).unwrap();
        assert_eq!(t.value(total).item(), b.compose());
        assert!((b.l_total - (2.5 + 0.5 * oracle)).abs() <= 1e-10);
    }
}

#[test]
fn hard_negatives_only_enter_the_visual_anchored_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (v, x, n, h) = (unit(&mut rng), unit(&mut rng), unit(&mut rng), unit(&mut rng));
    let mut t = Tape::new();
    let mut var = |a: &Vec<f64>| t.constant(Tensor::row(a.clone())).unwrap();
    let (vv, xv, nv, hv) = (var(&v), var(&x), var(&n), var(&h));
    let mut term = PairedTerm::new(vv, xv);
    term.visual_negatives = vec![nv];
    term.hard_text_negatives = vec![hv];
    let mut batch = ContrastiveBatch::default();
    batch.video.push(term);
    let l = l_video(&mut t, &batch, TAU).unwrap();
    let want = 0.5 * (nce(&x, &v, &[&n]) + nce(&v, &x, &[&h]));
    assert!((t.value(l).item() - want).abs() <= 1e-10);
}
