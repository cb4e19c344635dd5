//! The fine-tuning loop for NLFT and the SFT baseline.

mod optim;
mod outputs;
mod warmup;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collect::{collect_batch, response_tokens, save_tables, CollectContext, CollectedAt, ConditionProbTable};
use crate::corpus::{task_vocabulary, write_atomic, Dataset, Difficulty, Provenance, ReasoningExample, TokenSequence, Vocab};
use crate::counters::{CounterSnapshot, Counters};
use crate::error::{Error, Result};
use crate::eval::{evaluate, split_id, MetricsRow, METRICS_HEADER};
use crate::judge::{judge_dataset, Judge, JudgeCache, RuleJudge};
use crate::lm::{loss_and_grad, save_params, Arch, DifferentiableLm, LossConvention, Model, Polarity};
use crate::prompts::{render, template_texts, PromptCondition, TemplateVersion};
use crate::saliency::{allocate, AssignmentRecord, Branch, Label, NlftConfig, SaliencyAssignment};
use crate::scale::{compute_scales, ScaleVector};

pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
pub use warmup::{context_reading_set, WARMUP_SOURCE};
pub use outputs::{
    example_seed, generate_outputs, DataMode, DecodeConfig, ModelGenerator, OracleGenerator, TextGenerator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Nlft,
    Sft,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Nlft => "nlft",
            Algorithm::Sft => "sft",
        }
    }
}

/// How per-example objectives combine within a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over examples of each example's token-normalized objective.
    #[default]
    PerExample,
    /// One sum over the batch divided by its total token count.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub run_name: String,
    pub algorithm: Algorithm,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub data_mode: DataMode,
    pub nlft: NlftConfig,
    pub recollect_every: usize,
    pub aggregation: Aggregation,
    pub template_version: TemplateVersion,
    /// Decoding for self-study outputs.
    pub generation: DecodeConfig,
    /// Decoding for evaluation.
    pub eval: DecodeConfig,
    /// Evaluate every this many epochs (the last epoch is always evaluated); 0 for last only.
    pub eval_every: usize,
    pub parallelism: usize,
    /// Diagnostic: every correct-branch scale is replaced by 1.
    pub unit_scales: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run_name: String::new(),
            algorithm: Algorithm::Nlft,
            epochs: 10,
            batch_size: 4,
            learning_rate: 5e-5,
            optimizer: AdamWConfig::default(),
            seed: 0,
            data_mode: DataMode::Teaching,
            nlft: NlftConfig::default(),
            recollect_every: 1,
            aggregation: Aggregation::PerExample,
            template_version: TemplateVersion::ToyV1,
            generation: DecodeConfig {
                temperature: 0.6,
                max_tokens: 96,
                seed: 0,
            },
            eval: DecodeConfig::default(),
            eval_every: 1,
            parallelism: 1,
            unit_scales: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.recollect_every == 0 {
            return Err(Error::Config("recollect_every must be at least 1".into()));
        }
        self.nlft.validate()
    }

    pub fn display_name(&self) -> String {
        if self.run_name.is_empty() {
            self.algorithm.name().to_string()
        } else {
            self.run_name.clone()
        }
    }
}

/// One weighted response ready for the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub example_id: String,
    pub prompt: TokenSequence,
    pub y: TokenSequence,
    pub weights: Vec<f64>,
    pub polarity: Polarity,
    pub filtered: bool,
}

/// Reference solutions with unit weights.
pub fn sft_items(examples: &[ReasoningExample], vocab: &Vocab, version: TemplateVersion) -> Result<Vec<TrainItem>> {
    examples
        .iter()
        .map(|e| {
            let prompt = render(PromptCondition::Base, e, version, vocab)?.token_ids;
            let y = response_tokens(&e.standard_solution, vocab);
            Ok(TrainItem {
                example_id: e.id.clone(),
                weights: vec![1.0; y.len()],
                prompt,
                y,
                polarity: Polarity::Reinforce,
                filtered: false,
            })
        })
        .collect()
}

/// Generated responses weighted by their scales.
pub fn nlft_item(
    example: &ReasoningExample,
    assignment: &SaliencyAssignment,
    scales: &ScaleVector,
    vocab: &Vocab,
    version: TemplateVersion,
    unit_scales: bool,
) -> Result<TrainItem> {
    let output = example.generated_output.as_deref().ok_or_else(|| Error::InvalidExample {
        id: example.id.clone(),
        message: "no generated output".into(),
    })?;
    let prompt = render(PromptCondition::Base, example, version, vocab)?.token_ids;
    let y = response_tokens(output, vocab);
    if y.len() != scales.values.len() {
        return Err(Error::LengthMismatch {
            what: "scales",
            got: scales.values.len(),
            expected: y.len(),
        });
    }
    let (weights, polarity) = match assignment.branch {
        Branch::Correct if unit_scales => (vec![1.0; y.len()], Polarity::Reinforce),
        Branch::Correct => (scales.values.clone(), Polarity::Reinforce),
        Branch::Incorrect => (scales.values.clone(), Polarity::Suppress),
    };
    Ok(TrainItem {
        example_id: example.id.clone(),
        prompt,
        y,
        weights,
        polarity,
        filtered: assignment.filtered_out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    /// `None` when every example in the batch was filtered out.
    pub grad: Option<Vec<f64>>,
    pub active: usize,
    pub clamped_tokens: usize,
}

/// Objective and gradient of one minibatch. Filtered items are ignored
/// entirely, including in the normalization.
pub fn batch_loss_and_grad(
    model: &dyn DifferentiableLm,
    batch: &[&TrainItem],
    convention: LossConvention,
    aggregation: Aggregation,
    eps: f64,
    counters: Option<&Counters>,
) -> Result<BatchOutcome> {
    let active: Vec<&TrainItem> = batch.iter().copied().filter(|i| !i.filtered).collect();
    if active.is_empty() {
        return Ok(BatchOutcome {
            loss: 0.0,
            grad: None,
            active: 0,
            clamped_tokens: 0,
        });
    }
    let total_tokens: usize = active.iter().map(|i| i.y.len()).sum();
    let mut grad = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    let mut clamped = 0;
    for item in &active {
        let normalizer = match aggregation {
            Aggregation::PerExample => item.y.len().max(1) as f64,
            Aggregation::Global => total_tokens.max(1) as f64,
        };
        let r = loss_and_grad(
            model,
            &item.prompt,
            &item.y,
            &item.weights,
            item.polarity,
            convention,
            normalizer,
            eps,
            counters,
        )
        .map_err(|e| Error::for_example(&item.example_id, e))?;
        loss += r.loss;
        clamped += r.clamped_tokens.len();
        for (g, d) in grad.iter_mut().zip(&r.grad) {
            *g += d;
        }
    }
    if aggregation == Aggregation::PerExample {
        let k = active.len() as f64;
        loss /= k;
        for g in &mut grad {
            *g /= k;
        }
    }
    Ok(BatchOutcome {
        loss,
        grad: Some(grad),
        active: active.len(),
        clamped_tokens: clamped,
    })
}

/// Optimizer plus schedule position; owns nothing but its state.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub state: AdamWState,
    pub step: usize,
    pub total_steps: usize,
    pub base_lr: f64,
}

impl Stepper {
    pub fn new(n_params: usize, config: &TrainConfig, total_steps: usize) -> Self {
        Stepper {
            state: AdamWState::new(n_params, config.optimizer),
            step: 0,
            total_steps,
            base_lr: config.learning_rate,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }

    /// Applies one update and advances the schedule. A batch with no active
    /// example advances the schedule without touching the parameters.
    pub fn apply(&mut self, model: &mut Model, outcome: &BatchOutcome) -> Result<f64> {
        let lr = self.current_lr();
        if let Some(grad) = &outcome.grad {
            adamw_step(model.params_mut(), grad, &mut self.state, lr)?;
        }
        self.step += 1;
        Ok(lr)
    }
}

/// Vocabulary covering generated problems, the prompt template and the
/// rule judge's phrasing.
pub fn pipeline_vocabulary(difficulty: &Difficulty, version: TemplateVersion) -> Vocab {
    let mut texts = template_texts(version);
    texts.extend(RuleJudge::phrase_texts());
    task_vocabulary(difficulty, texts)
}

/// Minibatch order for an epoch. Shared by both algorithms so runs with the
/// same seed see the same examples in the same batches.
pub fn minibatch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(example_seed(seed, epoch)));
    order
}

fn order_digest(order: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in order {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub forwards: CounterSnapshot,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub n_filtered: usize,
    pub n_overflow_skipped: usize,
    pub saliency_tokens: usize,
    pub sub_saliency_tokens: usize,
    pub irrelevant_tokens: usize,
    pub clamped_tokens: usize,
    pub batch_order_digest: String,
    pub checkpoint: Option<String>,
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub algorithm: Algorithm,
    pub config: TrainConfig,
    pub template_version: String,
    pub arch: Arch,
    pub vocab_size: usize,
    pub parameter_count: usize,
    pub dataset: Provenance,
    pub train_examples: usize,
    pub eval_split: Option<String>,
    pub initial_accuracy: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub counters: CounterSnapshot,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: Option<String>,
    /// Where each effective setting came from, when supplied by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_provenance: Option<serde_json::Value>,
    pub notes: Vec<String>,
}

pub struct TrainInputs<'a> {
    pub config: &'a TrainConfig,
    pub vocab: &'a Vocab,
    pub train: &'a Dataset,
    pub eval: Option<&'a Dataset>,
    /// Judge for responses lacking a judgment; the rule judge when absent.
    pub judge: Option<&'a dyn Judge>,
    pub judge_cache: Option<&'a JudgeCache>,
    /// Teaching-mode generator for responses that are missing; the oracle when absent.
    pub teacher: Option<&'a dyn TextGenerator>,
    pub run_dir: Option<&'a Path>,
    pub config_provenance: Option<serde_json::Value>,
}

impl<'a> TrainInputs<'a> {
    pub fn new(config: &'a TrainConfig, vocab: &'a Vocab, train: &'a Dataset) -> Self {
        TrainInputs {
            config,
            vocab,
            train,
            eval: None,
            judge: None,
            judge_cache: None,
            teacher: None,
            run_dir: None,
            config_provenance: None,
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub manifest: RunManifest,
    /// Last epoch's tables and assignments (NLFT only).
    pub tables: Vec<ConditionProbTable>,
    pub assignments: Vec<SaliencyAssignment>,
    /// Training data as last used, with outputs and judgments.
    pub data: Dataset,
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        Ok(RunFiles { dir: dir.to_path_buf() })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable");
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

fn training_error(epoch: usize, step: usize, source: Error) -> Error {
    Error::Training {
        epoch,
        step,
        source: Box::new(source),
    }
}

fn needs_judging(data: &Dataset) -> bool {
    data.examples
        .iter()
        .any(|e| e.is_correct.is_none() || (e.is_correct == Some(false) && e.judgment.is_none()))
}

/// Whether every prompt the example is scored under fits the window.
fn fits_window(e: &ReasoningExample, model: &dyn DifferentiableLm, vocab: &Vocab, version: TemplateVersion) -> Result<bool> {
    let y = response_tokens(e.generated_output.as_deref().unwrap_or(""), vocab).len();
    let mut conditions = vec![PromptCondition::Base, PromptCondition::Standard];
    if e.is_correct == Some(false) {
        conditions.push(PromptCondition::Judge);
    }
    for c in conditions {
        let p = render(c, e, version, vocab)?.token_ids.len();
        if 1 + p + y > model.context_window() {
            return Ok(false);
        }
    }
    Ok(true)
}

struct NlftEpoch {
    items: Vec<TrainItem>,
    tables: Vec<ConditionProbTable>,
    assignments: Vec<SaliencyAssignment>,
    overflow: usize,
}

/// Runs the fine-tuning loop and, if a run directory is given, writes the
/// config snapshot, vocabulary, per-epoch checkpoints, `metrics.csv`,
/// `timing.csv` and `manifest.json`.
pub fn train(inputs: TrainInputs<'_>, mut model: Model) -> Result<TrainOutcome> {
    let cfg = inputs.config;
    cfg.validate()?;
    let vocab = inputs.vocab;
    if model.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match the vocabulary ({})",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let n = inputs.train.len();
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let started = Instant::now();
    let run_name = cfg.display_name();
    let files = inputs.run_dir.map(RunFiles::create).transpose()?;
    if let Some(f) = &files {
        f.write_json("config.json", cfg)?;
        f.write_json("vocab.json", vocab)?;
    }

    let counters = Counters::new();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut stepper = Stepper::new(model.params().len(), cfg, cfg.epochs * steps_per_epoch);
    let eval_split = inputs.eval.map(split_id);
    let eval_now = |model: &Model| -> Result<f64> {
        let eval = inputs.eval.expect("checked by caller");
        let g = ModelGenerator {
            model,
            vocab,
            version: cfg.template_version,
            counters: None,
        };
        Ok(evaluate(&g, eval, &cfg.eval)?.accuracy)
    };
    let initial_accuracy = inputs.eval.map(|_| eval_now(&model)).transpose()?;

    let mut manifest = RunManifest {
        run_name: run_name.clone(),
        algorithm: cfg.algorithm,
        config: cfg.clone(),
        template_version: cfg.template_version.name().to_string(),
        arch: model.arch(),
        vocab_size: vocab.len(),
        parameter_count: model.params().len(),
        dataset: inputs.train.provenance.clone(),
        train_examples: n,
        eval_split,
        initial_accuracy,
        epochs: Vec::new(),
        counters: CounterSnapshot::default(),
        wall_clock_secs: 0.0,
        checkpoints: Vec::new(),
        final_checkpoint: None,
        config_provenance: inputs.config_provenance.clone(),
        notes: vec![
            "desk-scale model and synthetic arithmetic task stand in for a pretrained LLM and GSM8K".into(),
        ],
    };
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut timing = String::from("run,epoch,phase,seconds\n");

    let mut data = inputs.train.clone();
    let rule_judge = RuleJudge;
    let judge: &dyn Judge = inputs.judge.unwrap_or(&rule_judge);
    let sft = match cfg.algorithm {
        Algorithm::Sft => Some(sft_items(&data.examples, vocab, cfg.template_version)?),
        Algorithm::Nlft => None,
    };
    let mut cached: Option<NlftEpoch> = None;
    let mut last_checkpoint = "init".to_string();

    for epoch in 1..=cfg.epochs {
        let before = counters.snapshot();
        let mut record = EpochRecord {
            epoch,
            ..EpochRecord::default()
        };
        let phase = |name: &str, t: Instant, rec: &mut EpochRecord| {
            rec.seconds.insert(name.to_string(), t.elapsed().as_secs_f64());
        };

        let step0 = stepper.step;
        let ctx = move |e: Error| training_error(epoch, step0, e);

        let items: &[TrainItem] = if let Some(items) = &sft {
            items
        } else {
            let mut outputs_changed = false;
            let t = Instant::now();
            let missing_outputs = data.examples.iter().any(|e| e.generated_output.is_none());
            match cfg.data_mode {
                DataMode::SelfStudy => {
                    let g = ModelGenerator {
                        model: &model,
                        vocab,
                        version: cfg.template_version,
                        counters: Some(&counters),
                    };
                    let decode = DecodeConfig {
                        seed: example_seed(cfg.generation.seed ^ cfg.seed, epoch),
                        ..cfg.generation
                    };
                    data = generate_outputs(&g, &data, &decode).map_err(ctx)?;
                    outputs_changed = true;
                }
                DataMode::Teaching if missing_outputs => {
                    let oracle = OracleGenerator;
                    let teacher = inputs.teacher.unwrap_or(&oracle);
                    data = generate_outputs(teacher, &data, &cfg.generation).map_err(ctx)?;
                    outputs_changed = true;
                }
                DataMode::Teaching => {}
            }
            phase("generation", t, &mut record);

            let t = Instant::now();
            if outputs_changed || needs_judging(&data) {
                data = judge_dataset(&data, judge, inputs.judge_cache, cfg.parallelism).map_err(ctx)?.0;
            }
            phase("judging", t, &mut record);

            let t = Instant::now();
            let recollect = outputs_changed || cached.is_none() || (epoch - 1) % cfg.recollect_every == 0;
            if recollect {
                let mut usable = Vec::with_capacity(n);
                let mut overflow = 0;
                for e in &data.examples {
                    if fits_window(e, &model, vocab, cfg.template_version).map_err(ctx)? {
                        usable.push(e.clone());
                    } else {
                        overflow += 1;
                        log::warn!("example {} does not fit the context window; skipped this epoch", e.id);
                    }
                }
                let cctx = CollectContext {
                    vocab,
                    version: cfg.template_version,
                    eps: cfg.nlft.eps,
                    counters: Some(&counters),
                };
                let at = CollectedAt {
                    checkpoint_id: last_checkpoint.clone(),
                    epoch,
                };
                let tables = collect_batch(&model, &usable, &cctx, &at, cfg.parallelism).map_err(ctx)?;
                let mut items = Vec::with_capacity(tables.len());
                let mut assignments = Vec::with_capacity(tables.len());
                for (e, table) in usable.iter().zip(&tables) {
                    let a = allocate(table, &cfg.nlft).map_err(ctx)?;
                    let s = compute_scales(table, &a, &cfg.nlft).map_err(ctx)?;
                    items.push(nlft_item(e, &a, &s, vocab, cfg.template_version, cfg.unit_scales).map_err(ctx)?);
                    assignments.push(a);
                }
                cached = Some(NlftEpoch {
                    items,
                    tables,
                    assignments,
                    overflow,
                });
            }
            phase("collection", t, &mut record);
            let c = cached.as_ref().expect("collected above");
            record.n_overflow_skipped = c.overflow;
            for (a, t) in c.assignments.iter().zip(&c.tables) {
                if t.is_correct {
                    record.n_correct += 1;
                } else {
                    record.n_incorrect += 1;
                }
                record.n_filtered += a.filtered_out as usize;
                record.saliency_tokens += a.count(Label::Saliency);
                record.sub_saliency_tokens += a.count(Label::SubSaliency);
                record.irrelevant_tokens += a.count(Label::Irrelevant);
            }
            &c.items
        };
        if let Some(items) = &sft {
            record.n_correct = items.len();
        }

        let t = Instant::now();
        let order = minibatch_order(items.len(), cfg.seed, epoch);
        record.batch_order_digest = order_digest(&order);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let outcome = batch_loss_and_grad(
                &model,
                &batch,
                cfg.nlft.loss_convention,
                cfg.aggregation,
                cfg.nlft.eps,
                Some(&counters),
            )
            .map_err(|e| training_error(epoch, stepper.step, e))?;
            record.clamped_tokens += outcome.clamped_tokens;
            if outcome.grad.is_some() {
                batch_losses.push(outcome.loss);
            } else {
                record.skipped_steps += 1;
            }
            let step = stepper.step;
            record.lr = stepper
                .apply(&mut model, &outcome)
                .map_err(|e| training_error(epoch, step, e))?;
            record.steps += 1;
        }
        // Keep the schedule aligned when fewer items than examples were usable.
        while stepper.step < epoch * steps_per_epoch {
            stepper.step += 1;
            record.skipped_steps += 1;
        }
        record.loss = if batch_losses.is_empty() {
            0.0
        } else {
            batch_losses.iter().sum::<f64>() / batch_losses.len() as f64
        };
        phase("training", t, &mut record);

        let t = Instant::now();
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if inputs.eval.is_some() && due {
            record.accuracy = Some(eval_now(&model)?);
        }
        phase("evaluation", t, &mut record);

        record.forwards = counters.snapshot().since(&before);
        if let Some(f) = &files {
            let name = format!("checkpoints/epoch-{epoch:03}.ckpt");
            save_params(&model, f.dir.join(&name))?;
            manifest.checkpoints.push(name.clone());
            manifest.final_checkpoint = Some(name.clone());
            record.checkpoint = Some(name.clone());
            last_checkpoint = name;
        } else {
            last_checkpoint = format!("epoch-{epoch:03}");
        }
        let row = MetricsRow {
            run: run_name.clone(),
            epoch,
            accuracy: record.accuracy,
            loss: record.loss,
            lr: record.lr,
            forwards_collection: record.forwards.collection,
            forwards_generation: record.forwards.generation,
            forwards_training: record.forwards.training,
        };
        metrics.push_str(&row.to_csv_line());
        metrics.push('\n');
        for (p, s) in &record.seconds {
            timing.push_str(&format!("{run_name},{epoch},{p},{s}\n"));
        }
        log::info!(
            "{run_name} epoch {epoch}: loss {:.5} lr {:.3e} accuracy {}",
            record.loss,
            record.lr,
            record.accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into())
        );
        manifest.epochs.push(record);
        manifest.counters = counters.snapshot();
        manifest.wall_clock_secs = started.elapsed().as_secs_f64();
        if let Some(f) = &files {
            f.write("metrics.csv", metrics.as_bytes())?;
            f.write("timing.csv", timing.as_bytes())?;
            f.write_json("manifest.json", &manifest)?;
        }
    }

    let (tables, assignments) = match cached {
        Some(c) => (c.tables, c.assignments),
        None => (Vec::new(), Vec::new()),
    };
    if let Some(f) = &files {
        if cfg.algorithm == Algorithm::Nlft {
            save_tables(&tables, f.dir.join("tables.jsonl"))?;
            let mut out = String::new();
            for a in &assignments {
                out.push_str(&serde_json::to_string(&AssignmentRecord::from(a)).expect("serializable"));
                out.push('\n');
            }
            f.write("assignments.jsonl", out.as_bytes())?;
        }
        data.save_jsonl(f.dir.join("data.jsonl"))?;
    }
    Ok(TrainOutcome {
        model,
        manifest,
        tables,
        assignments,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;
    use crate::lm::{TabularConfig, TabularLm};

    fn setup(n: usize) -> (Vocab, Dataset) {
        let d = Difficulty::default();
        (pipeline_vocabulary(&d, TemplateVersion::ToyV1), generate_synthetic(21, n, &d))
    }

    fn tabular(v: usize) -> Model {
        Model::Tabular(TabularLm::new(TabularConfig::bigram(v, 4, 0.5)))
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let (vocab, data) = setup(3);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(TrainInputs::new(&cfg, &vocab, &data), tabular(vocab.len())).is_err());
    }

    #[test]
    fn nlft_and_sft_share_batch_order_and_count_forwards() {
        let (vocab, data) = setup(7);
        let base = TrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-2,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let nlft = train(TrainInputs::new(&base, &vocab, &data), tabular(vocab.len())).unwrap();
        let sft_cfg = TrainConfig {
            algorithm: Algorithm::Sft,
            ..base.clone()
        };
        let sft = train(TrainInputs::new(&sft_cfg, &vocab, &data), tabular(vocab.len())).unwrap();
        for (a, b) in nlft.manifest.epochs.iter().zip(&sft.manifest.epochs) {
            assert_eq!(a.batch_order_digest, b.batch_order_digest);
            assert_eq!(a.forwards.collection, 2 * 7);
            assert_eq!(b.forwards.collection, 0);
            assert_eq!(b.forwards.training, 7);
        }
    }

    #[test]
    fn filtered_batch_skips_the_update() {
        let (vocab, data) = setup(1);
        let model = tabular(vocab.len());
        let e = &data.examples[0];
        let prompt = render(PromptCondition::Base, e, TemplateVersion::ToyV1, &vocab).unwrap().token_ids;
        let y = response_tokens("#### 1", &vocab);
        let item = TrainItem {
            example_id: e.id.clone(),
            prompt,
            weights: vec![1.0; y.len()],
            y,
            polarity: Polarity::Suppress,
            filtered: true,
        };
        let out = batch_loss_and_grad(&model, &[&item], LossConvention::Unlikelihood, Aggregation::PerExample, 1e-12, None)
            .unwrap();
        assert!(out.grad.is_none());
        let mut m2 = model.clone();
        let mut s = Stepper::new(model.params().len(), &TrainConfig::default(), 4);
        s.apply(&mut m2, &out).unwrap();
        assert_eq!(m2, model);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn run_directory_layout() {
        let (vocab, data) = setup(4);
        let (_, eval) = setup(3);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            eval: DecodeConfig {
                temperature: 0.0,
                max_tokens: 8,
                seed: 0,
            },
            ..TrainConfig::default()
        };
        let mut inputs = TrainInputs::new(&cfg, &vocab, &data);
        inputs.eval = Some(&eval);
        inputs.run_dir = Some(dir.path());
        let out = train(inputs, tabular(vocab.len())).unwrap();
        for f in [
            "config.json",
            "vocab.json",
            "manifest.json",
            "metrics.csv",
            "timing.csv",
            "tables.jsonl",
            "assignments.jsonl",
            "data.jsonl",
            "checkpoints/epoch-001.ckpt",
            "checkpoints/epoch-002.ckpt",
        ] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        assert_eq!(out.manifest.epochs.len(), 2);
        assert!(out.manifest.epochs[1].accuracy.is_some());
    }
}
