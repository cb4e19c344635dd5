//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use nlft_core::collect::{collect, CollectContext, CollectedAt, ConditionProbTable};
use nlft_core::corpus::{flawed_solution, generate_synthetic, Difficulty, ReasoningExample, TokenizerMode, Vocab};
use nlft_core::judge::{Judge, RuleJudge};
use nlft_core::lm::{Model, TabularConfig, TabularLm, TinyTransformer, TransformerConfig};
use nlft_core::prompts::TemplateVersion;
use nlft_core::saliency::{allocate, NlftConfig, SaliencyAssignment};
use nlft_core::scale::{compute_scales, ScaleVector};
use nlft_core::train::{nlft_item, pipeline_vocabulary, TrainItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VERSION: TemplateVersion = TemplateVersion::ToyV1;

pub fn easy() -> Difficulty {
    Difficulty {
        operand_min: 1,
        operand_max: 9,
        steps: 1,
        multiply: false,
    }
}

pub fn task_vocab() -> Vocab {
    pipeline_vocabulary(&Difficulty::default(), VERSION)
}

/// A dozen-word vocabulary for gradient checks.
pub fn tiny_vocab() -> Vocab {
    Vocab::from_texts(["a b c d e f g h . \n"], TokenizerMode::Word)
}

pub fn bigram(vocab: &Vocab, seed: u64, init_std: f64) -> Model {
    Model::Tabular(TabularLm::new(TabularConfig::bigram(vocab.len(), seed, init_std)))
}

pub fn small_transformer(vocab: &Vocab, seed: u64, d_model: usize, window: usize) -> Model {
    Model::Transformer(TinyTransformer::new(TransformerConfig {
        vocab_size: vocab.len(),
        d_model,
        n_layers: 2,
        n_heads: 2,
        context_window: window,
        seed,
        init_std: 0.1,
    }))
}

/// A problem whose response is its own reference solution.
pub fn correct_example(seed: u64, difficulty: &Difficulty) -> ReasoningExample {
    let mut e = generate_synthetic(seed, 1, difficulty).examples.remove(0);
    e.generated_output = Some(e.standard_solution.clone());
    e.is_correct = Some(true);
    e
}

/// A problem answered with a flawed response and judged by the rule judge.
pub fn incorrect_example(seed: u64, difficulty: &Difficulty) -> ReasoningExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = seed;
    loop {
        let mut e = generate_synthetic(s, 1, difficulty).examples.remove(0);
        if let Some(w) = flawed_solution(&e, difficulty, &mut rng) {
            e.generated_output = Some(w);
            e.is_correct = Some(false);
            e.judgment = Some(RuleJudge.judge(&e).expect("rule judge").text);
            return e;
        }
        s = s.wrapping_add(1_000_003);
    }
}

pub fn table_for(model: &Model, example: &ReasoningExample, vocab: &Vocab) -> ConditionProbTable {
    let ctx = CollectContext {
        vocab,
        version: VERSION,
        eps: NlftConfig::default().eps,
        counters: None,
    };
    collect(model, example, &ctx, &CollectedAt::default()).expect("collect")
}

/// Raises the judge-conditioned probability of the chosen positions to
/// `boost` times the larger of the other two, so they satisfy the incorrect
/// branch's ratio test. Tabular models cannot read the judgment, so this
/// stands in for a model that can.
pub fn boost_judge(table: &mut ConditionProbTable, positions: &[usize], boost: f64) {
    let pj = table.p_judge.as_mut().expect("incorrect table");
    for &i in positions {
        let reference = table.p_base[i].max(table.p_standard[i]).max(0.02);
        pj[i] = (reference * boost).min(1.0);
    }
}

pub fn random_positions(n: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < fraction).collect();
    if out.is_empty() {
        out.push(rng.random_range(0..n));
    }
    out
}

pub struct Prepared {
    pub table: ConditionProbTable,
    pub assignment: SaliencyAssignment,
    pub scales: ScaleVector,
    pub item: TrainItem,
}

pub fn prepare(example: &ReasoningExample, table: ConditionProbTable, vocab: &Vocab, cfg: &NlftConfig) -> Prepared {
    let assignment = allocate(&table, cfg).expect("allocate");
    let scales = compute_scales(&table, &assignment, cfg).expect("scales");
    let item = nlft_item(example, &assignment, &scales, vocab, VERSION, false).expect("item");
    Prepared {
        table,
        assignment,
        scales,
        item,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
