mod common;

use std::fs;
use std::time::Instant;

use common::*;
use nlft_core::corpus::{generate_synthetic, tokenize, Dataset, Difficulty};
use nlft_core::lm::{generate, loss_and_grad, softmax, DifferentiableLm, LossConvention, Model, Polarity};
use nlft_core::saliency::NlftConfig;
use nlft_core::train::{batch_loss_and_grad, train, Aggregation, Algorithm, DecodeConfig, TrainConfig, TrainInputs};

fn fd_check(model: &mut Model, convention: LossConvention, polarity: Polarity) -> f64 {
    let vocab = tiny_vocab();
    let prompt = tokenize("a b .\n", &vocab);
    let y = tokenize("c d e . f", &vocab);
    let w = [0.5, 1.5, 0.0, 2.0, 1.0, 0.7];
    let f = |m: &Model| loss_and_grad(m, &prompt, &y, &w[..y.len()], polarity, convention, 3.0, 1e-12, None).unwrap();
    let g = f(model).grad;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        let x = model.params()[i];
        model.params_mut()[i] = x + h;
        let up = f(model).loss;
        model.params_mut()[i] = x - h;
        let down = f(model).loss;
        model.params_mut()[i] = x;
        let num = (up - down) / (2.0 * h);
        let scale = g[i].abs().max(num.abs()).max(1e-8);
        worst = worst.max((g[i] - num).abs() / scale);
    }
    worst
}

#[test]
fn literal_convention_gradients_match_finite_differences() {
    let vocab = tiny_vocab();
    for polarity in [Polarity::Reinforce, Polarity::Suppress] {
        let mut m = bigram(&vocab, 3, 1.0);
        let err = fd_check(&mut m, LossConvention::Literal, polarity);
        assert!(err < 1e-6, "{polarity:?}: {err}");
    }
}

#[test]
fn global_aggregation_divides_by_batch_tokens() {
    let vocab = task_vocab();
    let d = Difficulty::default();
    let cfg = NlftConfig::default();
    let model = bigram(&vocab, 4, 0.5);
    let a = correct_example(40, &d);
    let b = correct_example(41, &d);
    let pa = prepare(&a, table_for(&model, &a, &vocab), &vocab, &cfg);
    let pb = prepare(&b, table_for(&model, &b, &vocab), &vocab, &cfg);
    let conv = LossConvention::Unlikelihood;
    let both = batch_loss_and_grad(&model, &[&pa.item, &pb.item], conv, Aggregation::Global, 1e-12, None).unwrap();
    let (na, nb) = (pa.item.y.len() as f64, pb.item.y.len() as f64);
    let ea = batch_loss_and_grad(&model, &[&pa.item], conv, Aggregation::PerExample, 1e-12, None).unwrap();
    let eb = batch_loss_and_grad(&model, &[&pb.item], conv, Aggregation::PerExample, 1e-12, None).unwrap();
    let expected = (ea.loss * na + eb.loss * nb) / (na + nb);
    assert!((both.loss - expected).abs() < 1e-12);
    let per = batch_loss_and_grad(&model, &[&pa.item, &pb.item], conv, Aggregation::PerExample, 1e-12, None).unwrap();
    assert!((per.loss - (ea.loss + eb.loss) / 2.0).abs() < 1e-12);
}

#[test]
fn temperature_sampling_matches_the_softmax() {
    let vocab = tiny_vocab();
    let model = bigram(&vocab, 8, 1.0);
    let prompt = tokenize("a", &vocab);
    let mut ids = vec![nlft_core::corpus::Vocab::BOS];
    ids.extend_from_slice(&prompt.ids);
    let temperature = 0.8;
    let logits: Vec<f64> = model.next_logits(&ids).iter().map(|l| l / temperature).collect();
    let p = softmax(&logits);
    let draws = 100_000;
    let mut counts = vec![0usize; p.len()];
    for seed in 0..draws {
        let out = generate(&model, &prompt, temperature, 1, seed, None);
        let id = out.ids.first().copied().unwrap_or(nlft_core::corpus::Vocab::EOS);
        counts[id as usize] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let freq = c as f64 / draws as f64;
        assert!((freq - p[i]).abs() < 0.01, "token {i}: {freq} vs {}", p[i]);
    }
}

#[test]
fn greedy_decoding_is_seed_independent() {
    let vocab = task_vocab();
    let model = small_transformer(&vocab, 2, 16, 128);
    let prompt = tokenize("Tom has 3 apples", &vocab);
    let a = generate(&model, &prompt, 0.0, 12, 1, None);
    let b = generate(&model, &prompt, 0.0, 12, 99, None);
    assert_eq!(a.ids, b.ids);
}

#[test]
fn large_jsonl_loads_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    generate_synthetic(5, 10_000, &Difficulty::default()).save_jsonl(&path).unwrap();
    let start = Instant::now();
    let d = Dataset::load_jsonl(&path).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(d.len(), 10_000);
    assert!(secs < 2.0, "{secs}s");
}

#[test]
fn nlft_run_directory_is_complete_and_reloadable() {
    let vocab = task_vocab();
    let d = Difficulty::default();
    let mut ex: Vec<_> = (0..4).map(|k| correct_example(60 + k, &d)).collect();
    ex.extend((0..2).map(|k| incorrect_example(70 + k, &d)));
    let data = Dataset::new(ex, Default::default()).unwrap();
    let eval = generate_synthetic(80, 4, &d);
    let cfg = TrainConfig {
        algorithm: Algorithm::Nlft,
        epochs: 2,
        batch_size: 3,
        eval: DecodeConfig {
            temperature: 0.0,
            max_tokens: 16,
            seed: 0,
        },
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = TrainInputs::new(&cfg, &vocab, &data);
    inputs.eval = Some(&eval);
    inputs.run_dir = Some(dir.path());
    let out = train(inputs, bigram(&vocab, 1, 0.1)).unwrap();

    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert_eq!(out.manifest.epochs.len(), 2);
    assert!(out.manifest.epochs.iter().all(|e| e.accuracy.is_some()));
    assert_eq!(out.tables.len(), data.len());
    assert_eq!(out.assignments.len(), data.len());
    let reloaded = Dataset::load_jsonl(dir.path().join("data.jsonl")).unwrap();
    assert_eq!(reloaded.len(), data.len());

    let ckpt = out.manifest.final_checkpoint.clone().unwrap();
    let loaded = nlft_core::lm::load_params(dir.path().join(&ckpt), Some(vocab.len())).unwrap();
    assert_eq!(loaded.params(), out.model.params());
}
