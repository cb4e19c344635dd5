mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nlft_core::collect::{collect_batch, load_tables, save_tables, CollectContext, CollectedAt};
use nlft_core::corpus::{generate_synthetic, write_atomic, Dataset, Vocab};
use nlft_core::eval::{compare_runs, evaluate, saliency_report, RunMetrics};
use nlft_core::judge::{judge_dataset, Judge, JudgeCache, RemoteJudge, RuleJudge};
use nlft_core::lm::{load_params, Model};
use nlft_core::saliency::{AssignmentRecord, SaliencyAssignment};
use nlft_core::scale::compute_scales;
use nlft_core::train::{
    context_reading_set, generate_outputs, pipeline_vocabulary, train, Algorithm, DataMode, ModelGenerator, OracleGenerator,
    TextGenerator, TrainConfig, TrainInputs,
};
use serde_json::{json, Value};

use config::{resolve, JudgeKind, Resolved};

#[derive(Parser)]
#[command(name = "nlft", version, about = "Natural-language fine-tuning experiments on desk-scale models")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Teaching,
    SelfStudy,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    /// Word problems with reference solutions.
    Problems,
    /// Warm-up items that teach a fresh model to read references and judgments.
    ContextReading,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Rule,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Nlft,
    Sft,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic arithmetic dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_enum, default_value = "problems")]
        kind: DataKind,
    },
    /// Fill in generated responses by teaching or self-study.
    GenOutputs {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Checkpoint path, or `oracle` for the reference-solution teacher.
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mark correctness and attach judgments to incorrect responses.
    Judge {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        judge: Option<JudgeArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Collect per-token probabilities under each prompt condition.
    Collect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Fine-tune a model with NLFT or SFT.
    Train {
        #[arg(long, value_enum)]
        algo: AlgoArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Teaching-mode generator checkpoint for missing responses (default: oracle).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate accuracy on a dataset.
    Eval {
        /// Checkpoint path, or `oracle`.
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Vocabulary from a run directory (default: rebuilt from the config).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the token-level saliency report of one training example.
    Inspect {
        #[arg(long)]
        example_id: String,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs: aligned CSV plus an accuracy chart.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn provenance_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut d = Dataset::load_jsonl(path).with_context(|| format!("loading {}", path.display()))?;
    let side = provenance_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side)?;
        d.provenance = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
    }
    Ok(d)
}

fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    d.save_jsonl(path)?;
    let side = serde_json::to_string_pretty(&d.provenance)?;
    write_atomic(&provenance_path(path), side.as_bytes())?;
    Ok(())
}

fn vocab_for(resolved: &Resolved, run_dir: Option<&Path>) -> Result<Vocab> {
    if let Some(dir) = run_dir {
        let path = dir.join("vocab.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut v: Vocab = serde_json::from_str(&text)?;
        v.rebuild_index();
        return Ok(v);
    }
    let c = &resolved.config;
    Ok(pipeline_vocabulary(&c.corpus.difficulty(), c.train.template_version))
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<Model> {
    load_params(path, Some(vocab.len())).with_context(|| format!("loading model {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::GenData {
            seed,
            count,
            out,
            split,
            kind,
        } => {
            if count == 0 {
                bail!("--count must be at least 1");
            }
            let r = resolve(file, &[])?;
            let difficulty = r.config.corpus.difficulty();
            let mut d = match kind {
                DataKind::Problems => generate_synthetic(seed, count, &difficulty),
                DataKind::ContextReading => context_reading_set(seed, count, &difficulty)?,
            };
            d.provenance.split = split;
            save_dataset(&d, &out)?;
            println!("wrote {} examples to {}", d.len(), out.display());
        }

        Command::GenOutputs {
            mode,
            model,
            data,
            out,
            temperature,
            max_tokens,
            seed,
        } => {
            let mut flags = Vec::new();
            if let Some(t) = temperature {
                flags.push(("train.generation.temperature", json!(t)));
            }
            if let Some(m) = max_tokens {
                flags.push(("train.generation.max_tokens", json!(m)));
            }
            if let Some(s) = seed {
                flags.push(("train.generation.seed", json!(s)));
            }
            let r = resolve(file, &flags)?;
            let vocab = vocab_for(&r, None)?;
            let d = load_dataset(&data)?;
            let decode = r.config.train.generation;
            let out_d = if model == "oracle" {
                if matches!(mode, ModeArg::SelfStudy) {
                    bail!("self-study needs the trainee checkpoint, not the oracle");
                }
                generate_outputs(&OracleGenerator, &d, &decode)?
            } else {
                let m = load_model(Path::new(&model), &vocab)?;
                let g = ModelGenerator {
                    model: &m,
                    vocab: &vocab,
                    version: r.config.train.template_version,
                    counters: None,
                };
                generate_outputs(&g, &d, &decode)?
            };
            save_dataset(&out_d, &out)?;
            let correct = out_d.examples.iter().filter(|e| e.is_correct == Some(true)).count();
            println!("{correct} of {} responses correct; wrote {}", out_d.len(), out.display());
        }

        Command::Judge {
            data,
            judge,
            out,
            cache_dir,
        } => {
            let mut flags = Vec::new();
            if let Some(j) = judge {
                let kind = match j {
                    JudgeArg::Rule => "rule",
                    JudgeArg::Remote => "remote",
                };
                flags.push(("judge.kind", json!(kind)));
            }
            if let Some(c) = &cache_dir {
                flags.push(("judge.cache_dir", json!(c.display().to_string())));
            }
            let r = resolve(file, &flags)?;
            let d = load_dataset(&data)?;
            let jc = &r.config.judge;
            let cache = jc.remote.cache_dir.as_ref().map(JudgeCache::open).transpose()?;
            let remote;
            let judge: &dyn Judge = match jc.kind {
                JudgeKind::Rule => &RuleJudge,
                JudgeKind::Remote => {
                    remote = RemoteJudge::with_http(jc.remote.clone())?;
                    &remote
                }
            };
            let (judged, stats) = judge_dataset(&d, judge, cache.as_ref(), jc.remote.max_concurrency)?;
            save_dataset(&judged, &out)?;
            println!(
                "{} correct, {} incorrect ({} judged, {} from cache, {} disagreements); wrote {}",
                stats.correct,
                stats.incorrect,
                stats.judged,
                stats.cache_hits,
                stats.disagreements,
                out.display()
            );
        }

        Command::Collect {
            model,
            data,
            out,
            parallelism,
        } => {
            let flags: Vec<(&str, Value)> = parallelism.map(|p| ("train.parallelism", json!(p))).into_iter().collect();
            let r = resolve(file, &flags)?;
            let vocab = vocab_for(&r, None)?;
            let m = load_model(&model, &vocab)?;
            let d = load_dataset(&data)?;
            let ctx = CollectContext {
                vocab: &vocab,
                version: r.config.train.template_version,
                eps: r.config.train.nlft.eps,
                counters: None,
            };
            let at = CollectedAt {
                checkpoint_id: model.display().to_string(),
                epoch: 0,
            };
            let tables = collect_batch(&m, &d.examples, &ctx, &at, r.config.train.parallelism)?;
            save_tables(&tables, &out)?;
            println!("wrote {} tables to {}", tables.len(), out.display());
        }

        Command::Train {
            algo,
            data,
            out_dir,
            eval_data,
            init,
            teacher,
            mode,
            epochs,
            batch_size,
            lr,
            seed,
            name,
        } => {
            let mut flags = vec![(
                "train.algorithm",
                json!(match algo {
                    AlgoArg::Nlft => "nlft",
                    AlgoArg::Sft => "sft",
                }),
            )];
            if let Some(m) = mode {
                flags.push((
                    "train.data_mode",
                    json!(match m {
                        ModeArg::Teaching => "teaching",
                        ModeArg::SelfStudy => "self_study",
                    }),
                ));
            }
            if let Some(e) = epochs {
                flags.push(("train.epochs", json!(e)));
            }
            if let Some(b) = batch_size {
                flags.push(("train.batch_size", json!(b)));
            }
            if let Some(l) = lr {
                flags.push(("train.learning_rate", json!(l)));
            }
            if let Some(s) = seed {
                flags.push(("train.seed", json!(s)));
            }
            if let Some(n) = &name {
                flags.push(("train.run_name", json!(n)));
            }
            let r = resolve(file, &flags)?;
            let cfg: &TrainConfig = &r.config.train;
            let vocab = vocab_for(&r, None)?;
            let train_data = load_dataset(&data)?;
            let eval = eval_data.as_deref().map(load_dataset).transpose()?;
            let model = match &init {
                Some(p) => load_model(p, &vocab)?,
                None => r.config.model.build(vocab.len())?,
            };
            let teacher_model = teacher.as_deref().map(|p| load_model(p, &vocab)).transpose()?;
            let teacher_gen = teacher_model.as_ref().map(|m| ModelGenerator {
                model: m,
                vocab: &vocab,
                version: cfg.template_version,
                counters: None,
            });
            let jc = &r.config.judge;
            let cache = jc.remote.cache_dir.as_ref().map(JudgeCache::open).transpose()?;
            let remote = match jc.kind {
                JudgeKind::Remote => Some(RemoteJudge::with_http(jc.remote.clone())?),
                JudgeKind::Rule => None,
            };
            let mut inputs = TrainInputs::new(cfg, &vocab, &train_data);
            inputs.eval = eval.as_ref();
            inputs.judge = remote.as_ref().map(|j| j as &dyn Judge);
            inputs.judge_cache = cache.as_ref();
            inputs.teacher = teacher_gen.as_ref().map(|g| g as &dyn TextGenerator);
            inputs.run_dir = Some(&out_dir);
            inputs.config_provenance = Some(r.provenance_json());
            if cfg.algorithm == Algorithm::Nlft && cfg.data_mode == DataMode::Teaching && teacher_gen.is_none() {
                log::info!("teaching mode without --teacher: missing responses come from the oracle");
            }
            let outcome = train(inputs, model)?;
            let m = &outcome.manifest;
            let last = m.epochs.last().expect("at least one epoch");
            println!(
                "{}: {} epochs, final loss {:.5}, accuracy {}, run directory {}",
                m.run_name,
                m.epochs.len(),
                last.loss,
                last.accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into()),
                out_dir.display()
            );
        }

        Command::Eval {
            model,
            data,
            temperature,
            seed,
            max_tokens,
            run_dir,
            out,
        } => {
            let mut flags = Vec::new();
            if let Some(t) = temperature {
                flags.push(("eval.temperature", json!(t)));
            }
            if let Some(s) = seed {
                flags.push(("eval.seed", json!(s)));
            }
            if let Some(m) = max_tokens {
                flags.push(("eval.max_tokens", json!(m)));
            }
            let r = resolve(file, &flags)?;
            let d = load_dataset(&data)?;
            let result = if model == "oracle" {
                evaluate(&OracleGenerator, &d, &r.config.eval)?
            } else {
                let vocab = vocab_for(&r, run_dir.as_deref())?;
                let m = load_model(Path::new(&model), &vocab)?;
                let g = ModelGenerator {
                    model: &m,
                    vocab: &vocab,
                    version: r.config.train.template_version,
                    counters: None,
                };
                evaluate(&g, &d, &r.config.eval)?
            };
            if let Some(o) = &out {
                write_text(o, &serde_json::to_string_pretty(&result)?)?;
            }
            println!(
                "accuracy {:.4} ({} of {}) on {}",
                result.accuracy,
                result.n_correct(),
                result.records.len(),
                result.split
            );
        }

        Command::Inspect {
            example_id,
            run_dir,
            out,
        } => {
            let cfg_text = fs::read_to_string(run_dir.join("config.json")).context("run directory lacks config.json")?;
            let cfg: TrainConfig = serde_json::from_str(&cfg_text)?;
            let data = Dataset::load_jsonl(run_dir.join("data.jsonl")).context("run directory lacks data.jsonl")?;
            let example = data
                .get(&example_id)
                .with_context(|| format!("no example {example_id} in {}", run_dir.display()))?;
            let tables = load_tables(run_dir.join("tables.jsonl")).context("run directory lacks tables.jsonl")?;
            let table = tables
                .iter()
                .find(|t| t.example_id == example_id)
                .with_context(|| format!("no probability table for {example_id}"))?;
            let assignments_text = fs::read_to_string(run_dir.join("assignments.jsonl"))?;
            let assignment: SaliencyAssignment = assignments_text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<AssignmentRecord>)
                .collect::<std::result::Result<Vec<_>, _>>()?
                .into_iter()
                .find(|a| a.example_id == example_id)
                .with_context(|| format!("no assignment for {example_id}"))?
                .into();
            let scales = compute_scales(table, &assignment, &cfg.nlft)?;
            let html = saliency_report(example, table, &assignment, &scales)?;
            let path = out.unwrap_or_else(|| run_dir.join(format!("report-{example_id}.html")));
            write_text(&path, &html)?;
            println!("wrote {}", path.display());
        }

        Command::Compare { runs, out } => {
            let metrics = runs.iter().map(RunMetrics::load).collect::<nlft_core::Result<Vec<_>>>()?;
            let c = compare_runs(&metrics)?;
            fs::create_dir_all(&out)?;
            write_text(&out.join("comparison.csv"), &c.csv)?;
            write_text(&out.join("accuracy.svg"), &c.svg)?;
            println!("wrote comparison of {} runs to {}", metrics.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
