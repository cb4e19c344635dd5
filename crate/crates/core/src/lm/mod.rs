//! Differentiable autoregressive language models: teacher-forced conditional
//! log-probabilities, temperature sampling and exact gradients of a
//! token-weighted objective. Everything on the probability path is `f64`.

mod checkpoint;
mod tabular;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, Vocab};
use crate::counters::{Counters, Purpose};
use crate::error::{Error, Result};

pub use checkpoint::{load_params, save_params, CheckpointHeader, FORMAT_VERSION};
pub use tabular::{TabularConfig, TabularLm};
pub use transformer::{TinyTransformer, TransformerConfig};

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Maps teacher-forced logits (`rows x vocab`, row-major) to a scalar loss
/// and its gradient with respect to those logits.
pub type LogitHead<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

pub trait DifferentiableLm: Send + Sync {
    fn arch(&self) -> Arch;
    fn vocab_size(&self) -> usize;
    fn context_window(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn segments(&self) -> Vec<ParamSegment>;

    /// Row `i` holds the logits of the token following `ids[..=i]`.
    fn logits(&self, ids: &[TokenId]) -> Vec<f64>;

    /// Logits of the token following the whole of `ids`.
    fn next_logits(&self, ids: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size();
        let all = self.logits(ids);
        all[all.len() - v..].to_vec()
    }

    /// Runs the forward pass, asks `head` for the loss and logit gradient,
    /// and backpropagates to a gradient over all parameters.
    fn value_and_grad(&self, ids: &[TokenId], head: &mut LogitHead<'_>) -> Result<(f64, Vec<f64>)>;
}

/// Architecture descriptor stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Tabular(TabularConfig),
    Transformer(TransformerConfig),
}

impl Arch {
    pub fn vocab_size(&self) -> usize {
        match self {
            Arch::Tabular(c) => c.vocab_size,
            Arch::Transformer(c) => c.vocab_size,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Arch::Tabular(c) => c.seed,
            Arch::Transformer(c) => c.seed,
        }
    }
}

/// Concrete model used by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Tabular(TabularLm),
    Transformer(TinyTransformer),
}

impl Model {
    pub fn from_arch(arch: &Arch) -> Self {
        match arch {
            Arch::Tabular(c) => Model::Tabular(TabularLm::new(c.clone())),
            Arch::Transformer(c) => Model::Transformer(TinyTransformer::new(c.clone())),
        }
    }

    fn inner(&self) -> &dyn DifferentiableLm {
        match self {
            Model::Tabular(m) => m,
            Model::Transformer(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn DifferentiableLm {
        match self {
            Model::Tabular(m) => m,
            Model::Transformer(m) => m,
        }
    }
}

impl DifferentiableLm for Model {
    fn arch(&self) -> Arch {
        self.inner().arch()
    }
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn context_window(&self) -> usize {
        self.inner().context_window()
    }
    fn params(&self) -> &[f64] {
        self.inner().params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.inner_mut().params_mut()
    }
    fn segments(&self) -> Vec<ParamSegment> {
        self.inner().segments()
    }
    fn logits(&self, ids: &[TokenId]) -> Vec<f64> {
        self.inner().logits(ids)
    }
    fn next_logits(&self, ids: &[TokenId]) -> Vec<f64> {
        self.inner().next_logits(ids)
    }
    fn value_and_grad(&self, ids: &[TokenId], head: &mut LogitHead<'_>) -> Result<(f64, Vec<f64>)> {
        self.inner().value_and_grad(ids, head)
    }
}

/// Per-token natural-log probabilities of a fixed response.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector {
    pub values: Vec<f64>,
}

impl LogProbVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.exp()).collect()
    }
}

/// In-place log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `[BOS] ++ prompt ++ y`, checked against the model window.
pub fn teacher_forced_ids(
    model: &dyn DifferentiableLm,
    prompt: &TokenSequence,
    y: &TokenSequence,
) -> Result<Vec<TokenId>> {
    let required = 1 + prompt.len() + y.len();
    if required > model.context_window() {
        return Err(Error::ContextOverflow {
            required,
            available: model.context_window(),
        });
    }
    let mut ids = Vec::with_capacity(required);
    ids.push(Vocab::BOS);
    ids.extend_from_slice(&prompt.ids);
    ids.extend_from_slice(&y.ids);
    Ok(ids)
}

/// `values[t] = log P(y_t | prompt ++ y_<t)` under teacher forcing.
pub fn conditional_logprobs(
    model: &dyn DifferentiableLm,
    prompt: &TokenSequence,
    y: &TokenSequence,
) -> Result<LogProbVector> {
    if y.is_empty() {
        return Ok(LogProbVector { values: Vec::new() });
    }
    let ids = teacher_forced_ids(model, prompt, y)?;
    let v = model.vocab_size();
    let logits = model.logits(&ids);
    let first_row = prompt.len(); // row predicting y_0 (BOS shifts by one)
    let values = y
        .ids
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let row = &logits[(first_row + t) * v..(first_row + t + 1) * v];
            log_softmax(row)[tok as usize]
        })
        .collect();
    Ok(LogProbVector { values })
}

/// Autoregressive decoding. Temperature 0 means greedy argmax (lowest id on
/// ties). Stops at end-of-sequence, `max_tokens`, or a full context window.
/// The end-of-sequence token itself is not included in the result.
pub fn generate(
    model: &dyn DifferentiableLm,
    prompt: &TokenSequence,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
    counters: Option<&Counters>,
) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(1 + prompt.len() + max_tokens);
    ids.push(Vocab::BOS);
    ids.extend_from_slice(&prompt.ids);
    let mut out = Vec::new();
    while out.len() < max_tokens && ids.len() < model.context_window() {
        let logits = model.next_logits(&ids);
        if let Some(c) = counters {
            c.record(Purpose::Generation, 1);
        }
        let next = if temperature <= 0.0 {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            sample(&softmax(&scaled), &mut rng)
        };
        if next == Vocab::EOS {
            break;
        }
        ids.push(next);
        out.push(next);
    }
    TokenSequence::from_ids(out)
}

fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample(probs: &[f64], rng: &mut impl Rng) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    (probs.len() - 1) as TokenId
}

/// Whether the response being scored is to be reinforced or suppressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Tokens of a correct response.
    Reinforce,
    /// Tokens of an incorrect response.
    Suppress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossConvention {
    /// Minimized `S·(−log P)` for reinforced tokens and `S·(−log(1 − P))`
    /// for suppressed tokens.
    #[default]
    Unlikelihood,
    /// The signed sum `S·log P` / `S·(1 − log P)` taken as printed.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Tokens whose probability was clamped to `1 − eps` in an unlikelihood term.
    pub clamped_tokens: Vec<usize>,
}

/// Objective for one response and its exact parameter gradient.
///
/// Each token contributes `weight · term / normalizer`; weights are
/// constants. Tokens with zero weight are skipped.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    model: &dyn DifferentiableLm,
    prompt: &TokenSequence,
    y: &TokenSequence,
    token_weights: &[f64],
    polarity: Polarity,
    convention: LossConvention,
    normalizer: f64,
    eps: f64,
    counters: Option<&Counters>,
) -> Result<LossAndGrad> {
    if token_weights.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "token_weights",
            got: token_weights.len(),
            expected: y.len(),
        });
    }
    if normalizer <= 0.0 || !normalizer.is_finite() {
        return Err(Error::Config(format!("loss normalizer must be positive, got {normalizer}")));
    }
    if token_weights.iter().all(|&w| w == 0.0) {
        return Ok(LossAndGrad {
            loss: 0.0,
            grad: vec![0.0; model.params().len()],
            clamped_tokens: Vec::new(),
        });
    }
    let ids = teacher_forced_ids(model, prompt, y)?;
    if let Some(c) = counters {
        c.record(Purpose::Training, 1);
    }
    let v = model.vocab_size();
    let first_row = prompt.len();
    let mut clamped = Vec::new();
    let mut head = |logits: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut dlogits = vec![0.0; logits.len()];
        let mut loss = 0.0;
        for (t, (&tok, &w)) in y.ids.iter().zip(token_weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row_idx = first_row + t;
            let row = &logits[row_idx * v..(row_idx + 1) * v];
            let logp_row = log_softmax(row);
            let logp = logp_row[tok as usize];
            let scale = w / normalizer;
            // coefficient c such that dlogits = c * (onehot - softmax)
            let (term, coef) = match (convention, polarity) {
                (LossConvention::Unlikelihood, Polarity::Reinforce) => (-logp, -scale),
                (LossConvention::Unlikelihood, Polarity::Suppress) => {
                    let p = logp.exp();
                    let mut one_minus = -logp.exp_m1();
                    if one_minus < eps {
                        one_minus = eps;
                        clamped.push(t);
                    }
                    (-one_minus.ln(), scale * p / one_minus)
                }
                (LossConvention::Literal, Polarity::Reinforce) => (logp, scale),
                (LossConvention::Literal, Polarity::Suppress) => (1.0 - logp, -scale),
            };
            let contribution = w * term / normalizer;
            if !contribution.is_finite() {
                return Err(Error::NonFiniteLoss { index: t });
            }
            loss += contribution;
            let drow = &mut dlogits[row_idx * v..(row_idx + 1) * v];
            for (j, d) in drow.iter_mut().enumerate() {
                let onehot = if j == tok as usize { 1.0 } else { 0.0 };
                *d += coef * (onehot - logp_row[j].exp());
            }
        }
        Ok((loss, dlogits))
    };
    let (loss, grad) = model.value_and_grad(&ids, &mut head)?;
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    Ok(LossAndGrad {
        loss,
        grad,
        clamped_tokens: clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(v: usize) -> Model {
        Model::Tabular(TabularLm::new(TabularConfig::bigram(v, 0, 0.0)))
    }

    #[test]
    fn uniform_model_gives_log_inverse_vocab() {
        let m = uniform(10);
        let prompt = TokenSequence::from_ids(vec![4, 5]);
        let y = TokenSequence::from_ids(vec![6, 7, 8, 2]);
        let lp = conditional_logprobs(&m, &prompt, &y).unwrap();
        assert_eq!(lp.len(), 4);
        for v in lp.values {
            assert!((v + (10f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_response_gives_empty_vector() {
        let m = uniform(10);
        let lp = conditional_logprobs(&m, &TokenSequence::from_ids(vec![4]), &TokenSequence::default())
            .unwrap();
        assert!(lp.is_empty());
    }

    #[test]
    fn context_overflow_reports_lengths() {
        let m = Model::Transformer(TinyTransformer::new(TransformerConfig {
            context_window: 8,
            ..TransformerConfig::small(12, 1)
        }));
        let prompt = TokenSequence::from_ids(vec![4; 5]);
        let y = TokenSequence::from_ids(vec![5; 4]);
        match conditional_logprobs(&m, &prompt, &y) {
            Err(Error::ContextOverflow { required, available }) => {
                assert_eq!((required, available), (10, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn greedy_decoding_ignores_seed() {
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(12, 3, 1.0)));
        let prompt = TokenSequence::from_ids(vec![5, 6]);
        let a = generate(&m, &prompt, 0.0, 20, 1, None);
        let b = generate(&m, &prompt, 0.0, 20, 99, None);
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(12, 3, 1.0)));
        let prompt = TokenSequence::from_ids(vec![5, 6]);
        let counters = Counters::new();
        let a = generate(&m, &prompt, 0.8, 20, 7, Some(&counters));
        let b = generate(&m, &prompt, 0.8, 20, 7, None);
        assert_eq!(a, b);
        assert!(counters.snapshot().generation >= a.len() as u64);
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(9, 2, 1.0)));
        let prompt = TokenSequence::from_ids(vec![4]);
        let y = TokenSequence::from_ids(vec![5, 6, 7]);
        for polarity in [Polarity::Reinforce, Polarity::Suppress] {
            let r = loss_and_grad(
                &m,
                &prompt,
                &y,
                &[0.0; 3],
                polarity,
                LossConvention::Unlikelihood,
                3.0,
                1e-12,
                None,
            )
            .unwrap();
            assert_eq!(r.loss, 0.0);
            assert!(r.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn weight_length_mismatch_is_an_error() {
        let m = uniform(6);
        let r = loss_and_grad(
            &m,
            &TokenSequence::from_ids(vec![4]),
            &TokenSequence::from_ids(vec![5, 4]),
            &[1.0],
            Polarity::Reinforce,
            LossConvention::Unlikelihood,
            1.0,
            1e-12,
            None,
        );
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn certain_token_in_unlikelihood_term_is_clamped_and_flagged() {
        let mut m = TabularLm::new(TabularConfig::bigram(6, 0, 0.0));
        // Make token 5 certain after token 4.
        m.params_mut()[4 * 6 + 5] = 1e4;
        let m = Model::Tabular(m);
        let r = loss_and_grad(
            &m,
            &TokenSequence::from_ids(vec![4]),
            &TokenSequence::from_ids(vec![5]),
            &[1.0],
            Polarity::Suppress,
            LossConvention::Unlikelihood,
            1.0,
            1e-12,
            None,
        )
        .unwrap();
        assert_eq!(r.clamped_tokens, vec![0]);
        assert!((r.loss - (-(1e-12f64).ln())).abs() < 1e-9);
    }
}
