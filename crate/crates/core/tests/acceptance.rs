//! Acceptance suite. Runs every criterion in order, prints one line each and
//! exits non-zero if any failed. Criteria run sequentially so their runtimes
//! are measured without contention.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use halluguard::bound_lab::{
    data_term, decomposition_crossover, kappa_scaling_experiment, reasoning_term, risk_bound,
    simulate_empirical_risk, verify_submultiplicativity, BoundParams,
};
use halluguard::clipping::{clip_features, compute_thresholds, MemoryBank};
use halluguard::eval::{auprc, auroc, evaluate, tpr_at_fpr, EvalConfig, LabeledScore};
use halluguard::linalg::cholesky_log_det;
use halluguard::spectral::{amplification_exact, build_gram, spectral_summary, GramMatrix, PowerIteration};
use halluguard::tiny_lm::vocab::{addition_corpus, addition_prompts, encode_corpus};
use halluguard::tiny_lm::{
    detector_scorer, guided_beam_search, make_labeled_dataset, sample_k, train_tiny_lm, BeamConfig,
    Corruption, DecodeConfig, StepMaps, TinyLM, TinyLMConfig, TrainConfig,
};
use halluguard::{Detector, DetectorConfig};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

struct Trained {
    model: TinyLM,
    took: Duration,
}

static MODEL: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    MODEL.get_or_init(|| {
        let start = Instant::now();
        let corpus = encode_corpus(&addition_corpus()).expect("corpus encodes");
        let out = train_tiny_lm(&corpus, TinyLMConfig::default(), &TrainConfig::default()).expect("training converges");
        Trained {
            model: out.model,
            took: start.elapsed(),
        }
    })
}

fn spectral_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_logdet = 0.0f64;
    let mut kappa_mismatch = 0usize;
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let b = gaussian(&mut rng, k, k);
        let a = &b * b.transpose() + DMatrix::identity(k, k) * 0.1;
        let oracle: f64 = SymmetricEigen::new(a.clone()).eigenvalues.iter().map(|l| l.ln()).sum();
        let chol = cholesky_log_det(&a).expect("SPD");
        worst_logdet = worst_logdet.max((chol - oracle).abs());
        let g = GramMatrix {
            entries: a,
            ridge: 0.0,
            normalized: false,
        };
        let s = spectral_summary(&g).expect("SPD");
        worst_logdet = worst_logdet.max((s.log_det - oracle).abs());
        if s.kappa != s.lambda_max() / s.lambda_min() {
            kappa_mismatch += 1;
        }
    }
    let same = build_gram(&[vec![1.0, 0.0], vec![1.0, 0.0]], 1e-3, true).unwrap().entries;
    let ortho = build_gram(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1e-3, true).unwrap().entries;
    let tilted = build_gram(&[vec![1.0, 0.0], vec![1.0, 1.0]], 0.0, true).unwrap().entries;
    let hand = same == DMatrix::from_row_slice(2, 2, &[1.001, 1.0, 1.0, 1.001])
        && ortho == DMatrix::identity(2, 2) * 1.001
        && (tilted[(0, 1)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12
        && tilted[(0, 1)] == tilted[(1, 0)];
    Outcome::new(
        worst_logdet <= 1e-8 && kappa_mismatch == 0 && hand,
        format!("max |logdet err| {worst_logdet:.2e}, kappa mismatches {kappa_mismatch}, hand grams {hand}"),
    )
}

fn jacobian_amplification(model: &TinyLM) -> Outcome {
    let d = model.config.d_model;
    let pi = PowerIteration {
        iters: 5000,
        tol: 1e-12,
        ..PowerIteration::default()
    };
    let dc = DecodeConfig {
        k: 2,
        seed: 3,
        ..DecodeConfig::default()
    };
    let mut worst = 0.0f64;
    let mut steps = 0usize;
    let mut problems = Vec::new();
    for p in addition_prompts(3, 5) {
        let bundle = sample_k(model, &p, &dc, Corruption::StateNoise(0.75)).expect("sampling");
        for g in &bundle.generations {
            if g.tokens.len() < 2 {
                continue;
            }
            let mut seq = p.tokens.clone();
            seq.extend_from_slice(&g.tokens[..g.tokens.len() - 1]);
            let maps = StepMaps::new(model, &seq, p.tokens.len()).expect("step maps");
            let est = match amplification_exact(&maps, maps.steps(), &pi) {
                Ok(e) => e,
                Err(e) => {
                    problems.push(e.to_string());
                    continue;
                }
            };
            for (t, sigma) in est.per_step.unwrap().iter().enumerate() {
                let fd = maps.jacobian_fd(t, 1e-5).unwrap();
                let svd = DMatrix::from_row_slice(d, d, &fd).singular_values();
                let top = svd.iter().copied().fold(0.0, f64::max);
                worst = worst.max(rel(*sigma, top));
                steps += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let t = rng.random_range(1..=6);
        let js: Vec<DMatrix<f64>> = (0..t).map(|_| gaussian(&mut rng, n, n)).collect();
        if !verify_submultiplicativity(&js).unwrap().holds {
            violations += 1;
        }
    }

    // J_t = s u_{t+1} u_t^T chains its singular directions, so every
    // inequality in the chain is tight.
    let n = 5;
    let dirs: Vec<DVector<f64>> = (0..4)
        .map(|_| {
            let v = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
            v.normalize()
        })
        .collect();
    let chain: Vec<DMatrix<f64>> = (0..3).map(|t| &dirs[t + 1] * dirs[t].transpose() * 1.7).collect();
    let r = verify_submultiplicativity(&chain).unwrap();
    let tight = r.holds && rel(r.lhs, r.rhs_product) < 1e-12 && rel(r.rhs_product, r.rhs_sigma_max_t) < 1e-12;

    Outcome::new(
        problems.is_empty() && steps > 0 && worst <= 1e-4 && violations == 0 && tight,
        format!(
            "{steps} steps, max rel err vs FD SVD {worst:.2e}, power-iteration errors {}, violations {violations}/1000, rank-1 equality {tight}",
            problems.len()
        ),
    )
}

fn kappa_scaling() -> Outcome {
    match kappa_scaling_experiment(&[10.0, 100.0, 1000.0], 1e-3, 100, 7) {
        Ok(k) => Outcome::new(
            (1.6..=2.2).contains(&k.slope),
            format!("slope {:.3}, max dev^2 {:?}", k.slope, k.max_sq_deviation),
        ),
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> BoundParams {
    BoundParams {
        inf_approx: rng.random_range(0.01..2.0),
        k_pt: rng.random_range(0.0..2.0),
        complexity_pl: rng.random_range(1.1..20.0),
        k: rng.random_range(0.0..3.0),
        eps_mismatch: rng.random_range(0.0..2.0),
        signal_k: rng.random_range(0.5..5.0),
        l_size: rng.random_range(0.1..5.0),
        k_rollouts: rng.random_range(1..=20),
        eps: rng.random_range(0.05..1.0),
        c: rng.random_range(0.5..5.0),
        alpha_amp: rng.random_range(0.1..3.0),
        beta: rng.random_range(0.01..1.0),
        t: rng.random_range(0..=30),
        ..BoundParams::default()
    }
}

fn bound_behavior() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zero = reasoning_term(&BoundParams::default().with_t(0)).unwrap() == 0.0;
    let mut monotone_fail = 0;
    let mut envelope_fail = 0;
    let mut crossover_missing = 0;
    for i in 0..500 {
        let p = random_params(&mut rng);
        let b = risk_bound(&p).unwrap();
        let more_t = p.with_t(p.t + rng.random_range(1..=5));
        let more_beta = BoundParams {
            beta: p.beta + rng.random_range(0.01..1.0),
            ..p.clone()
        };
        let more_eps = BoundParams {
            eps_mismatch: p.eps_mismatch + rng.random_range(0.01..1.0),
            ..p.clone()
        };
        for q in [&more_t, &more_beta, &more_eps] {
            if risk_bound(q).unwrap() < b {
                monotone_fail += 1;
            }
        }

        let ts: Vec<u32> = (0..=40).collect();
        for pt in simulate_empirical_risk(&p, 0.05, i, &ts).unwrap() {
            if pt.empirical > pt.bound {
                envelope_fail += 1;
            }
        }

        // reasoning > data once exp(beta T) - 1 > D / (L conc alpha)
        let d = data_term(&p).unwrap();
        if p.beta > 0.0 && d > 0.0 {
            let per_unit = reasoning_term(&p.with_t(0)).map(|_| {
                let conc = (-f64::from(p.k_rollouts) * p.eps * p.eps / p.c).exp();
                p.l_size * conc * p.alpha_amp
            });
            let t_c = (1.0 + d / per_unit.unwrap()).ln() / p.beta;
            let hi = (t_c.ceil() as u32).saturating_add(1);
            let range: Vec<u32> = (0..=hi).collect();
            if decomposition_crossover(&p, &range).unwrap().is_none() {
                crossover_missing += 1;
            }
        }
    }
    Outcome::new(
        zero && monotone_fail == 0 && envelope_fail == 0 && crossover_missing == 0,
        format!(
            "R(T=0)=0 {zero}, monotonicity violations {monotone_fail}, envelope breaches {envelope_fail}, missing crossovers {crossover_missing}"
        ),
    )
}

fn labeled(scores: &[f64], labels: &[u8]) -> Vec<LabeledScore> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| LabeledScore::new(format!("{i}"), s, l))
        .collect()
}

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &sp) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sn) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            num += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn trapezoid_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let (mut area, mut fx, mut fy) = (0.0, 0.0, 0.0);
    for c in cuts {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= c && **l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= c && **l == 0).count() as f64;
        let (x, y) = (fp / n_neg, tp / n_pos);
        area += (x - fx) * (y + fy) / 2.0;
        fx = x;
        fy = y;
    }
    area
}

fn rank_by_rank_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let (mut tp, mut ap) = (0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
            ap += (1.0 / n_pos) * (tp / (rank + 1) as f64);
        }
    }
    ap
}

fn metric_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut auroc_err = 0.0f64;
    let mut ap_err = 0.0f64;
    let mut tpr_breaks = 0;
    for _ in 0..500 {
        let n = rng.random_range(4..60);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse grid so ties occur
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..12)) / 4.0).collect();
        let ls = labeled(&scores, &labels);
        let a = auroc(&ls).unwrap();
        auroc_err = auroc_err
            .max((a - pairwise_auroc(&scores, &labels)).abs())
            .max((a - trapezoid_auroc(&scores, &labels)).abs());
        let distinct: Vec<f64> = (0..n).map(|i| scores[i] + i as f64 * 1e-6).collect();
        ap_err = ap_err.max((auprc(&labeled(&distinct, &labels)).unwrap() - rank_by_rank_ap(&distinct, &labels)).abs());
        let mut prev = 0.0;
        for k in 1..20 {
            let t = tpr_at_fpr(&ls, k as f64 / 20.0).unwrap();
            if t < prev {
                tpr_breaks += 1;
            }
            prev = t;
        }
    }
    let example = auprc(&labeled(&[0.4, 0.3, 0.2, 0.1], &[0, 0, 1, 1])).unwrap();
    let exact_example = (example - 5.0 / 12.0).abs() < 1e-15;

    let n = 2000;
    let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let shuffled = auroc(&labeled(&scores, &labels)).unwrap();
    let band = 3.0 / (n as f64).sqrt();
    let permuted_ok = (shuffled - 0.5).abs() <= band;
    Outcome::new(
        auroc_err < 1e-12 && ap_err < 1e-12 && exact_example && tpr_breaks == 0 && permuted_ok,
        format!(
            "auroc err {auroc_err:.1e}, ap err {ap_err:.1e}, 5/12 example {exact_example}, tpr decreases {tpr_breaks}, permuted auroc {shuffled:.4} (band {band:.4})"
        ),
    )
}

fn end_to_end(trained: &Trained) -> Outcome {
    let model = &trained.model;
    let prompts = addition_prompts(500, 21);
    let dc = DecodeConfig {
        seed: 22,
        ..DecodeConfig::default()
    };
    let detectors = [Detector::HalluGuard, Detector::LexicalConsistency];
    let mut rates = Vec::new();
    let mut last = None;
    for rho in [0.75, 1.5] {
        let ds = make_labeled_dataset(model, &prompts, &dc, Corruption::StateNoise(rho), 0.5).expect("dataset");
        rates.push(ds.iter().filter(|b| b.label == Some(1)).count() as f64 / ds.len() as f64);
        last = Some(evaluate(&ds, &detectors, &EvalConfig::default()));
    }
    let report = match last.unwrap() {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("evaluation failed: {e}")),
    };
    let hg = report.get(Detector::HalluGuard).map_or(f64::NAN, |m| m.auroc);
    let lex = report.get(Detector::LexicalConsistency).map_or(f64::NAN, |m| m.auroc);
    Outcome::new(
        hg >= 0.70 && hg > lex && rates[1] > rates[0],
        format!(
            "rho=1.5 AUROC halluguard {hg:.4} vs lexical {lex:.4}; hallucination rate {:.3} -> {:.3} (training {:.0?})",
            rates[0], rates[1], trained.took
        ),
    )
}

fn guided_decoding(model: &TinyLM) -> Outcome {
    let prompts = addition_prompts(200, 31);
    let scorer = detector_scorer(Detector::HalluGuard, DetectorConfig::default());
    let guided_cfg = BeamConfig::default();
    let vanilla_cfg = BeamConfig {
        weight: 0.0,
        ..BeamConfig::default()
    };
    let (mut guided, mut vanilla, mut mismatches) = (0usize, 0usize, 0usize);
    for p in &prompts {
        let correct = |text: &str| p.references.iter().any(|r| r == text);
        let v = guided_beam_search(model, &p.tokens, &vanilla_cfg, None).expect("beam");
        let v_scored = guided_beam_search(model, &p.tokens, &vanilla_cfg, Some(&scorer)).expect("beam");
        let g = guided_beam_search(model, &p.tokens, &guided_cfg, Some(&scorer)).expect("beam");
        mismatches += usize::from(v != v_scored);
        vanilla += usize::from(correct(&v.text));
        guided += usize::from(correct(&g.text));
    }
    let n = prompts.len() as f64;
    let (ga, va) = (guided as f64 / n, vanilla as f64 / n);
    Outcome::new(
        ga >= va && mismatches == 0,
        format!("accuracy guided {ga:.3} vs vanilla {va:.3}; w=0 mismatches {mismatches}"),
    )
}

fn clipping_contract() -> Outcome {
    let q = 0.002;
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    };
    let mut bank = MemoryBank::new(3000);
    bank.update(&draw(3000)).unwrap();
    let (mut clipped, mut total) = (0.0, 0.0);
    let mut idempotent = true;
    for _ in 0..1000 {
        let chunk = draw(100);
        let th = compute_thresholds(&bank, q).unwrap();
        let (once, frac) = clip_features(&chunk, &th).unwrap();
        let (twice, again) = clip_features(&once, &th).unwrap();
        idempotent &= once == twice && again == 0.0;
        clipped += frac * (chunk.len() * d) as f64;
        total += (chunk.len() * d) as f64;
        bank.update(&chunk).unwrap();
    }
    let fraction = clipped / total;
    let budget = 2.5 * q;
    Outcome::new(
        idempotent && fraction <= budget,
        format!("idempotent {idempotent}, clip fraction {fraction:.5} over 1e5 vectors (budget {budget})"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, limit: Duration, run: &mut dyn FnMut() -> (Outcome, Duration)| {
        let (o, took) = run();
        let pass = o.pass && took < limit;
        failed += usize::from(!pass);
        println!(
            "criterion {id} {name}: {} ({:.1?} of {:.0?}) {}",
            if pass { "PASS" } else { "FAIL" },
            took,
            limit,
            o.detail
        );
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        (o, start.elapsed())
    };
    let secs = Duration::from_secs;
    report(1, "spectral oracle", secs(10), &mut || timed(&spectral_oracle));
    report(3, "kappa scaling", secs(30), &mut || timed(&kappa_scaling));
    report(4, "bound behavior", secs(10), &mut || timed(&bound_behavior));
    report(5, "metric correctness", secs(10), &mut || timed(&metric_correctness));
    report(8, "clipping contract", secs(10), &mut || timed(&clipping_contract));
    // criterion 6 includes training in its budget; 2 and 7 reuse the model
    report(6, "end-to-end detection", secs(600), &mut || {
        let t = trained();
        let (o, took) = timed(&|| end_to_end(t));
        (o, took + t.took)
    });
    report(2, "jacobian amplification", secs(60), &mut || timed(&|| jacobian_amplification(&trained().model)));
    report(7, "guided decoding", secs(300), &mut || timed(&|| guided_decoding(&trained().model)));
    if failed == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
