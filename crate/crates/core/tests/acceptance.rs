//! Acceptance criteria 1-8. Each test prints one `criterion N: PASS|FAIL` line.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use halalign::augment::{build_suppression_set, default_t_dec, generate_hallucinative, suppressed_distribution, SuppressionSet};
use halalign::corpus::{generate_world, split_of, Split, WorldConfig};
use halalign::lexicon::{Category, CorpusStats, Lexicon, LexiconEntry, TokenId};
use halalign::losses::{info_nce, l_total, LossParts, DEFAULT_ALPHA, DEFAULT_BETA};
use halalign::metrics::{cov_weighted, f1, hal_exact, hal_weighted, Variant};
use halalign::model::{argmax, ToyMllm};
use halalign::tensor::{Tape, Tensor};
use halalign::train::{
    evaluate, gradcheck_losses, model_config, run_experiment, Ablation, ExperimentResult, ExperimentSpec, TrainConfig,
    Trainer, WorldSource,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SUM_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-9;
const CLOSED_FORM_TOL: f64 = 1e-12;
const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const NOISE_FACTOR: f64 = 3.0;

fn verdict(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        for (which, report) in gradcheck_losses(seed, GRAD_STEP).unwrap() {
            assert!(report.coordinates > 0);
            if report.max_rel_error > GRAD_TOL {
                println!("  seed {seed} {which}: {:.3e}", report.max_rel_error);
            }
            worst = worst.max(report.max_rel_error);
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= GRAD_TOL && elapsed < GRAD_BUDGET;
    verdict(1, ok, &format!("max relative error {worst:.3e} in {elapsed:.1?}"));
    assert!(ok);
}

#[test]
fn criterion_2_suppression_invariant() {
    let mut runs = 0;
    let mut violations = 0;
    let mut worst_sum: f64 = 0.0;
    let mut greedy_mismatch = 0;
    for world_seed in 0..10u64 {
        let world = WorldConfig {
            num_train: 100,
            num_eval: 0,
            ..WorldConfig::default()
        };
        let (lexicon, samples) = generate_world(1000 + world_seed, &world).unwrap();
        let model = ToyMllm::new(model_config(&lexicon, &samples, world_seed, 0.07).unwrap()).unwrap();
        for sample in &samples {
            let omega = build_suppression_set(sample, &lexicon).unwrap();
            let t_dec = default_t_dec(sample);
            let ch = generate_hallucinative(&model, sample, &omega, t_dec).unwrap();
            runs += 1;
            violations += ch.tokens.iter().filter(|t| omega.contains(t)).count();
            model
                .rollout(sample, t_dec, |_, dist| {
                    let sup = suppressed_distribution(dist, &omega).unwrap();
                    worst_sum = worst_sum.max((sup.iter().sum::<f64>() - 1.0).abs());
                    violations += omega.iter().filter(|&&t| sup[t] != 0.0).count();
                    Ok(argmax(&sup))
                })
                .unwrap();
            let free = generate_hallucinative(&model, sample, &SuppressionSet::new(), t_dec).unwrap();
            let greedy = model.rollout(sample, t_dec, |_, d| Ok(argmax(d))).unwrap();
            if free.tokens != greedy {
                greedy_mismatch += 1;
            }
        }
    }
    let ok = runs >= 1000 && violations == 0 && worst_sum <= SUM_TOL && greedy_mismatch == 0;
    verdict(
        2,
        ok,
        &format!("{runs} runs, {violations} violations, max |sum-1| {worst_sum:.1e}, {greedy_mismatch} greedy mismatches"),
    );
    assert!(ok);
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_lexicon(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Lexicon {
    let entries = (0..n)
        .map(|i| LexiconEntry {
            token_id: i,
            surface: format!("w{i}"),
            category: Category::Object,
            synonyms: vec![],
            hypernyms: vec![],
            embedding: unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
        })
        .collect();
    Lexicon::new(entries).unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> BTreeSet<TokenId> {
    let k = rng.random_range(1..=4);
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

// Brute-force transcriptions of the weighted metrics, written without the
// library's helpers.
fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn oracle_hal(p: &BTreeSet<TokenId>, g: &BTreeSet<TokenId>, emb: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for &i in p {
        let m = g
            .iter()
            .map(|&j| if i == j { 1.0 } else { oracle_cos(&emb[i], &emb[j]).clamp(0.0, 1.0) })
            .fold(0.0, f64::max);
        s += m;
    }
    1.0 - s / p.len() as f64
}

fn oracle_cov(p: &BTreeSet<TokenId>, g: &BTreeSet<TokenId>, docs: &[Vec<TokenId>], doc: &[TokenId]) -> f64 {
    let weight = |t: TokenId| {
        let tf = doc.iter().filter(|&&x| x == t).count() as f64;
        let df = docs.iter().filter(|d| d.contains(&t)).count() as f64;
        tf * (((1.0 + docs.len() as f64) / (1.0 + df)).ln() + 1.0)
    };
    let num: f64 = g.iter().filter(|t| p.contains(t)).map(|&t| weight(t)).sum();
    let den: f64 = g.iter().map(|&t| weight(t)).sum();
    num / den
}

fn oracle_f1(hal: f64, cov: f64) -> f64 {
    let prec = 1.0 - hal;
    if prec + cov == 0.0 {
        0.0
    } else {
        2.0 * prec * cov / (prec + cov)
    }
}

#[test]
fn criterion_3_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(4..12);
        let dim = rng.random_range(2..6);
        let lexicon = random_lexicon(&mut rng, n, dim);
        let emb: Vec<Vec<f64>> = (0..n).map(|t| lexicon.embedding(t).unwrap().to_vec()).collect();
        let p = random_set(&mut rng, n);
        let g = random_set(&mut rng, n);
        let mut doc: Vec<TokenId> = g.iter().copied().collect();
        for _ in 0..rng.random_range(0..4) {
            doc.push(*g.iter().next().unwrap());
        }
        let mut docs = vec![doc.clone()];
        for _ in 0..rng.random_range(1..6) {
            docs.push((0..rng.random_range(1..6)).map(|_| rng.random_range(0..n)).collect());
        }
        let stats = CorpusStats::from_documents(docs.iter().map(Vec::as_slice));
        let hal = hal_weighted(&p, &g, &lexicon).unwrap().value;
        let cov = cov_weighted(&p, &g, &stats, &doc).unwrap().value;
        let score = f1(hal, cov).unwrap();
        let (oh, oc) = (oracle_hal(&p, &g, &emb), oracle_cov(&p, &g, &docs, &doc));
        for (a, b) in [(hal, oh), (cov, oc), (score, oracle_f1(oh, oc))] {
            worst = worst.max((a - b).abs());
        }
    }

    let lexicon = random_lexicon(&mut rng, 6, 3);
    let g: BTreeSet<TokenId> = [0, 2, 3].into_iter().collect();
    let doc: Vec<TokenId> = g.iter().copied().collect();
    let stats = CorpusStats::from_documents([doc.as_slice()]);
    let same = f1(
        hal_weighted(&g, &g, &lexicon).unwrap().value,
        cov_weighted(&g, &g, &stats, &doc).unwrap().value,
    )
    .unwrap();
    let same_exact = f1(hal_exact(&g, &g).value, 1.0).unwrap();
    let ortho = Lexicon::new(
        (0..2)
            .map(|i| LexiconEntry {
                token_id: i,
                surface: format!("o{i}"),
                category: Category::Object,
                synonyms: vec![],
                hypernyms: vec![],
                embedding: if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
            })
            .collect(),
    )
    .unwrap();
    let (p0, g1): (BTreeSet<TokenId>, BTreeSet<TokenId>) = ([0].into(), [1].into());
    let doc1 = vec![1];
    let stats1 = CorpusStats::from_documents([doc1.as_slice()]);
    let disjoint = f1(
        hal_weighted(&p0, &g1, &ortho).unwrap().value,
        cov_weighted(&p0, &g1, &stats1, &doc1).unwrap().value,
    )
    .unwrap();
    let identities = same == 1.0 && same_exact == 1.0 && disjoint == 0.0 && f1(0.5, 0.5).unwrap() == 0.5;
    let ok = worst <= METRIC_TOL && identities;
    verdict(3, ok, &format!("max oracle deviation {worst:.1e}, identities hold: {identities}"));
    assert!(ok);
}

#[test]
fn criterion_4_infonce_closed_forms() {
    let mut t = Tape::new();
    let row = |t: &mut Tape, v: Vec<f64>| t.constant(Tensor::row(v)).unwrap();
    let a = row(&mut t, vec![1.0, 0.0]);
    let p = row(&mut t, vec![1.0, 0.0]);
    let n = row(&mut t, vec![0.0, 1.0]);
    let eq = row(&mut t, vec![1.0, 0.0]);
    let empty = info_nce(&mut t, a, p, &[], 0.07).unwrap();
    let tie = info_nce(&mut t, a, p, &[eq], 0.07).unwrap();
    let tau1 = info_nce(&mut t, a, p, &[n], 1.0).unwrap();
    let empty_ok = t.value(empty).item() == 0.0;
    let tie_ok = (t.value(tie).item() - std::f64::consts::LN_2).abs() <= CLOSED_FORM_TOL;
    let tau_ok = (t.value(tau1).item() - (1.0 + (-1.0f64).exp()).ln()).abs() <= CLOSED_FORM_TOL;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut composed = true;
    for _ in 0..100 {
        let vals: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5.0)).collect();
        let parts = LossParts {
            l_g: t.constant(Tensor::scalar(vals[0])).unwrap(),
            l_video: t.constant(Tensor::scalar(vals[1])).unwrap(),
            l_obj: t.constant(Tensor::scalar(vals[2])).unwrap(),
            l_act: t.constant(Tensor::scalar(vals[3])).unwrap(),
        };
        let (total, b) = l_total(&mut t, parts, DEFAULT_ALPHA, DEFAULT_BETA, 0.07).unwrap();
        let direct = 0.25 * (vals[2] + vals[3]) + 0.5 * vals[1] + vals[0];
        composed &= t.value(total).item() == direct && b.compose() == direct;
    }
    let ok = empty_ok && tie_ok && tau_ok && composed && DEFAULT_ALPHA == 0.25 && DEFAULT_BETA == 0.5;
    verdict(
        4,
        ok,
        &format!("empty {empty_ok}, ln2 {tie_ok}, ln(1+e^-1) {tau_ok}, composition exact {composed}"),
    );
    assert!(ok);
}

fn f1_of(r: &ExperimentResult, a: Ablation, c: Category) -> f64 {
    r.median_f1(a, Variant::Weighted, c)
}

fn print_table(r: &ExperimentResult) {
    for &a in &r.rows {
        println!(
            "  {:<14} weighted F1 obj {:.4} act {:.4}",
            a.to_string(),
            f1_of(r, a, Category::Object),
            f1_of(r, a, Category::Action)
        );
    }
}

// Criteria 5 and 6 share one 5-seed run on the default corpus.
fn default_ablation() -> &'static (ExperimentResult, Duration) {
    static RUN: OnceLock<(ExperimentResult, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let spec = ExperimentSpec {
            world: WorldSource::Generate(WorldConfig::default()),
            train: TrainConfig::default(),
            seeds: SEEDS.to_vec(),
            rows: Ablation::ALL.to_vec(),
        };
        let r = run_experiment(&spec).unwrap();
        (r, start.elapsed())
    })
}

#[test]
fn criterion_5_ablation_direction() {
    let (r, elapsed) = default_ablation();
    print_table(r);
    let obj = |a| f1_of(r, a, Category::Object);
    let act = |a| f1_of(r, a, Category::Action);
    let obj_up = obj(Ablation::Full) > obj(Ablation::Baseline);
    let act_up = act(Ablation::Full) > act(Ablation::Baseline);
    let monotone = Ablation::TABLE.windows(2).all(|w| obj(w[1]) >= obj(w[0]));
    let in_time = *elapsed < ABLATION_BUDGET;
    let ok = obj_up && act_up && monotone && in_time;
    verdict(
        5,
        ok,
        &format!(
            "full > baseline F1_obj: {obj_up}, F1_act: {act_up}; table non-decreasing: {monotone}; runtime {elapsed:.1?}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_alignment_gap() {
    let (r, _) = default_ablation();
    let widened = r
        .runs_of(Ablation::Full)
        .filter(|run| run.post.alignment_gap.unwrap() > run.pre.alignment_gap.unwrap())
        .count();
    let ok = widened >= 4;
    verdict(6, ok, &format!("paired cosine increased in {widened}/5 seeds"));
    assert!(ok);
}

#[test]
fn criterion_7_noise_robustness() {
    let base = WorldConfig::default();
    let spec = ExperimentSpec {
        world: WorldSource::Generate(WorldConfig {
            tracklet_noise: NOISE_FACTOR * base.tracklet_noise,
            ..base
        }),
        train: TrainConfig::default(),
        seeds: SEEDS.to_vec(),
        rows: vec![Ablation::Baseline, Ablation::Full],
    };
    let r = run_experiment(&spec).unwrap();
    print_table(&r);
    let (full, baseline) = (f1_of(&r, Ablation::Full, Category::Object), f1_of(&r, Ablation::Baseline, Category::Object));
    let ok = full > baseline;
    verdict(7, ok, &format!("median weighted F1_obj full {full:.4} vs baseline {baseline:.4}"));
    assert!(ok);
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let world = WorldConfig {
        num_train: 120,
        num_eval: 40,
        ..WorldConfig::default()
    };
    let run = || {
        let (lexicon, samples) = generate_world(8, &world).unwrap();
        let train = split_of(&samples, Split::Train);
        let model = ToyMllm::new(model_config(&lexicon, &samples, 8, 0.07).unwrap()).unwrap();
        let cfg = TrainConfig {
            steps: 40,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, cfg, &lexicon, &train).unwrap();
        let log = trainer.run().unwrap();
        let report = evaluate(&trainer.model, &lexicon, &samples).unwrap();
        (
            serde_json::to_string(&log).unwrap(),
            serde_json::to_string(&report).unwrap(),
            trainer.model.clone(),
            lexicon,
            samples,
        )
    };
    let (log_a, report_a, model, lexicon, samples) = run();
    let (log_b, report_b, model_b, ..) = run();
    let identical = log_a == log_b && report_a == report_b && model.to_checkpoint_string() == model_b.to_checkpoint_string();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let restored = ToyMllm::load(&path).unwrap();
    let report_c = serde_json::to_string(&evaluate(&restored, &lexicon, &samples).unwrap()).unwrap();
    let bits = |m: &ToyMllm| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = report_c == report_a && bits(&restored) == bits(&model);

    let ok = identical && round_trip;
    verdict(8, ok, &format!("bit-identical reruns: {identical}, checkpoint round trip exact: {round_trip}"));
    assert!(ok);
}
