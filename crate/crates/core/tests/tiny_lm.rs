use halluguard::spectral::check_adjoint;
use halluguard::tiny_lm::sample::truncated_distribution;
use halluguard::tiny_lm::vocab::{addition_corpus, addition_prompts, copy_corpus, encode_corpus};
use halluguard::tiny_lm::{
    make_labeled_dataset, masked_accuracy, read_checkpoint, sample_k, train_tiny_lm, write_checkpoint, Corruption,
    DecodeConfig, StepMaps, TinyLM, TinyLMConfig, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn copy_task_generalizes() {
    let train = encode_corpus(&copy_corpus(4000, 5, 1)).unwrap();
    let held_out = encode_corpus(&copy_corpus(300, 5, 2)).unwrap();
    let cfg = TrainConfig {
        steps: 1500,
        ..TrainConfig::default()
    };
    let out = train_tiny_lm(&train, TinyLMConfig::default(), &cfg).unwrap();
    assert!(out.losses.last() < out.losses.first());
    let acc = masked_accuracy(&out.model, &held_out).unwrap();
    assert!(acc > 0.9, "held-out copy accuracy {acc}");
}

#[test]
fn memorized_addition_rarely_hallucinates() {
    let corpus = encode_corpus(&addition_corpus()).unwrap();
    let model = train_tiny_lm(&corpus, TinyLMConfig::default(), &TrainConfig::default())
        .unwrap()
        .model;

    // the checkpoint keeps every weight bit for bit
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    let reloaded = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(reloaded.params, model.params);

    let prompts = addition_prompts(200, 3);
    let dc = DecodeConfig {
        seed: 4,
        ..DecodeConfig::default()
    };
    let ds = make_labeled_dataset(&model, &prompts, &dc, Corruption::None, 0.5).unwrap();
    let rate = ds.iter().filter(|b| b.label == Some(1)).count() as f64 / ds.len() as f64;
    assert!(rate < 0.1, "hallucination rate {rate}");

    let noisy = make_labeled_dataset(&model, &prompts, &dc, Corruption::StateNoise(1.5), 0.5).unwrap();
    let noisy_rate = noisy.iter().filter(|b| b.label == Some(1)).count() as f64 / noisy.len() as f64;
    assert!(noisy_rate > rate);

    let mut prev = rate;
    for f in [4.0, 20.0] {
        let hot = make_labeled_dataset(&model, &prompts, &dc, Corruption::HighTemp(f), 0.5).unwrap();
        let hot_rate = hot.iter().filter(|b| b.label == Some(1)).count() as f64 / hot.len() as f64;
        assert!(hot_rate >= prev);
        prev = hot_rate;
    }
    assert!(prev > rate, "{prev} vs {rate}");
}

fn untrained() -> TinyLM {
    TinyLM::init(TinyLMConfig {
        seed: 12,
        ..TinyLMConfig::default()
    })
    .unwrap()
}

#[test]
fn step_maps_pass_adjoint_probes() {
    let model = untrained();
    let p = &addition_prompts(1, 9)[0];
    let b = sample_k(&model, p, &DecodeConfig::default(), Corruption::None).unwrap();
    let g = &b.generations[0];
    let mut seq = p.tokens.clone();
    seq.extend_from_slice(&g.tokens[..g.tokens.len() - 1]);
    let maps = StepMaps::new(&model, &seq, p.tokens.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in 0..maps.steps() {
        check_adjoint(&maps, t, 100, 1e-6, &mut rng).unwrap();
    }
}

#[test]
fn sampling_is_reproducible_and_normalized() {
    let model = untrained();
    let p = &addition_prompts(1, 10)[0];
    let dc = DecodeConfig {
        seed: 77,
        ..DecodeConfig::default()
    };
    for c in [Corruption::None, Corruption::StateNoise(0.75), Corruption::HighTemp(2.0)] {
        assert_eq!(sample_k(&model, p, &dc, c).unwrap(), sample_k(&model, p, &dc, c).unwrap());
    }
    let logits: Vec<f64> = (0..14).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
    for (t, k, top_p) in [(0.5, 10, 0.95), (1.0, 14, 1.0), (2.0, 3, 0.5), (0.1, 1, 0.9)] {
        let dist = truncated_distribution(&logits, t, k, top_p);
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(dist.len() <= k);
    }
}
