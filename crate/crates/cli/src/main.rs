//! `lrcn`: train, evaluate and sample recurrent sequence models.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (non-finite loss or a failed gradient check).

mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lrcn::decode::{decode, DecodeConfig, Strategy};
use lrcn::eval::{clip_protocol_eval, corpus_bleu, metric_line, retrieval_metrics, score_pairs};
use lrcn::io::checkpoint::{Checkpoint, RngState};
use lrcn::io::config::Config;
use lrcn::io::formats::{load_dataset, load_task_data, save_task_data, Dataset, DatasetFormat};
use lrcn::io::synth::{gen_copy_task, gen_order_task, gen_toy_captioning, gradcheck_problem};
use lrcn::train::{gradient_check, train_epoch};
use lrcn::{CaptionVariant, CellKind, Example, Input, Lrcn, Target, Task, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "lrcn", version, about = "Recurrent sequence models: training, evaluation and decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Decode outputs for the rows of a feature file.
    Generate(GenerateArgs),
    /// Compare analytic gradients with finite differences on small models.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

#[derive(clap::Args)]
struct TrainArgs {
    /// classify, caption or encode_decode (default: the config's `task`).
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Flat key=value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides a config entry; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Bleu,
    Retrieval,
    Accuracy,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Highest BLEU n-gram order.
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    /// Recall cut-offs for retrieval.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
    ks: Vec<usize>,
    /// Classify with the clip protocol using clips of this many frames.
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long, default_value_t = lrcn::eval::CLIP_STRIDE)]
    stride: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Beam,
    Sample,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::Beam)]
    strategy: StrategyArg,
    /// Beam width.
    #[arg(long, default_value_t = 1)]
    width: usize,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Logit scale factor for sampling.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file: one image per row, or the frames of one sequence.
    #[arg(long)]
    input: PathBuf,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// A task name, or `all`.
    #[arg(long, default_value = "all")]
    task: String,
    /// Caption stack; all three when omitted.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "lstm")]
    cell: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthTask {
    Copy,
    Caption,
    Order,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: SynthTask,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Copy task alphabet size.
    #[arg(long, default_value_t = 6)]
    vocab: usize,
    /// Copy task sequence length.
    #[arg(long, default_value_t = 3)]
    len: usize,
    /// Caption image noise amplitude.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

/// Failure that maps to exit status 3.
#[derive(Debug)]
struct NumericFailure(String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if let Some(lrcn::Error::NonFinite(_)) = cause.downcast_ref::<lrcn::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Prints a line, exiting quietly if stdout has been closed.
fn emit(line: &str) {
    use std::io::Write;
    if let Err(e) = writeln!(std::io::stdout().lock(), "{line}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{kv}'");
        };
        cfg.set(k.trim(), v.trim());
    }
    if let Some(s) = a.seed {
        cfg.set("seed", s);
    }
    settings::check_keys(&cfg)?;
    let task = match a.task {
        Some(t) => t,
        None => Task::parse(cfg.get("task").context("no --task given and config has no 'task'")?)?,
    };
    let data = load_task_data(&a.data, task, None).with_context(|| format!("loading {}", a.data.display()))?;
    let spec = settings::model_spec(&cfg, &data)?;
    let tc = settings::train_config(&cfg)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    init_rng.set_stream(1);
    let mut model = Lrcn::init(spec, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let updates_per_epoch = data.examples.len().div_ceil(tc.batch_size) as u64;
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let report = train_epoch(&mut model, &data.examples, &tc, &mut rng)?;
        step += updates_per_epoch;
        emit(&format!("epoch {epoch} loss {:.6}", report.mean_nll));
    }
    let ckpt = Checkpoint {
        model,
        rng: Some(RngState::capture(&rng)),
        step,
    };
    ckpt.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(&format!("saved {}", a.out.display()));
    Ok(())
}

/// Examples grouped by identical input, in first-appearance order.
fn group_by_input(examples: &[Example]) -> Vec<(&Input, Vec<&[usize]>)> {
    let mut groups: Vec<(&Input, Vec<&[usize]>)> = Vec::new();
    for ex in examples {
        let Target::Tokens(t) = &ex.target else { continue };
        match groups.iter_mut().find(|(i, _)| *i == &ex.input) {
            Some((_, refs)) => refs.push(t),
            None => groups.push((&ex.input, vec![t])),
        }
    }
    groups
}

fn greedy(m: &Lrcn, input: &Input, max_len: usize) -> Result<Vec<usize>> {
    let ctx = m.condition(input)?;
    Ok(lrcn::decode::greedy_decode(&ctx, max_len)?.tokens)
}

fn strip_eos(tokens: &[usize], eos: usize) -> Vec<usize> {
    tokens.iter().copied().take_while(|&t| t != eos).collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let m = &ckpt.model;
    let task = m.spec.task;
    let data = load_task_data(&a.data, task, m.vocab()).with_context(|| format!("loading {}", a.data.display()))?;
    let mut lines = Vec::new();
    match a.metric {
        Metric::Accuracy => {
            let mut correct = 0usize;
            for ex in &data.examples {
                let ok = match (&ex.input, &ex.target) {
                    (Input::Frames(frames), Target::Class(label)) => {
                        let p = match a.clip_len {
                            Some(c) => clip_protocol_eval(m, frames, c, a.stride)?,
                            None => m.classify_sequence(frames)?,
                        };
                        if !p.is_finite() {
                            return Err(NumericFailure("non-finite class distribution".into()).into());
                        }
                        p.argmax() == *label
                    }
                    (input, Target::Tokens(t)) => greedy(m, input, a.max_len)? == *t,
                    _ => bail!("unsupported example for accuracy"),
                };
                correct += usize::from(ok);
            }
            let name = if task == Task::Classify { "accuracy" } else { "sequence_accuracy" };
            lines.push(metric_line(name, correct as f64 / data.examples.len().max(1) as f64));
        }
        Metric::Bleu => {
            let vocab = m.vocab().context("BLEU needs a token model")?;
            let eos = vocab.eos();
            let pairs = group_by_input(&data.examples)
                .into_iter()
                .map(|(input, refs)| {
                    let hyp = strip_eos(&greedy(m, input, a.max_len)?, eos);
                    Ok((hyp, refs.iter().map(|r| strip_eos(r, eos)).collect::<Vec<_>>()))
                })
                .collect::<Result<Vec<_>>>()?;
            // Empty hypotheses score zero rather than failing the corpus.
            let scored: Vec<_> = pairs.into_iter().filter(|(h, _)| !h.is_empty()).collect();
            let score = if scored.is_empty() { 0.0 } else { corpus_bleu(&scored, a.max_n)? };
            lines.push(metric_line(&format!("bleu{}", a.max_n), score));
        }
        Metric::Retrieval => {
            if task != Task::Caption && task != Task::PerstepDecode {
                bail!("retrieval needs a caption checkpoint");
            }
            let groups = group_by_input(&data.examples);
            let mut captions: Vec<Vec<usize>> = Vec::new();
            let mut images = Vec::new();
            let mut truth = Vec::new();
            for (i, (input, refs)) in groups.iter().enumerate() {
                let Input::Static(img) = input else { bail!("caption inputs must be single images") };
                images.push(img.clone());
                for r in refs {
                    let c = match captions.iter().position(|c| c == r) {
                        Some(c) => c,
                        None => {
                            captions.push(r.to_vec());
                            captions.len() - 1
                        }
                    };
                    truth.push((i, c));
                }
            }
            let s = score_pairs(m, &images, &captions, &truth)?;
            for (prefix, mat) in [("annotation", s.clone()), ("search", s.transpose())] {
                let r = retrieval_metrics(&mat, &a.ks);
                for (k, v) in r.recall {
                    lines.push(metric_line(&format!("{prefix}_r@{k}"), v));
                }
                lines.push(metric_line(&format!("{prefix}_medr"), r.median_rank));
            }
        }
    }
    for l in lines {
        emit(&l);
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let m = &ckpt.model;
    let Dataset::Features(f) = load_dataset(&a.input, DatasetFormat::Features)? else {
        unreachable!()
    };
    let rows: Vec<Tensor> = (0..f.rows.len()).map(|i| f.row(i)).collect::<lrcn::Result<_>>()?;
    if rows.is_empty() {
        bail!("{} has no rows", a.input.display());
    }
    let (strategy, width) = match a.strategy {
        StrategyArg::Greedy => (Strategy::Greedy, 1),
        StrategyArg::Beam => (Strategy::Beam, a.width),
        StrategyArg::Sample => (Strategy::Sample, a.n),
    };
    let cfg = DecodeConfig {
        strategy,
        width,
        tau: a.tau,
        max_len: a.max_len,
        seed: a.seed,
    };
    let inputs = match m.spec.task {
        Task::Classify => {
            let p = m.classify_sequence(&rows)?;
            if !p.is_finite() {
                return Err(NumericFailure("non-finite class distribution".into()).into());
            }
            emit(&p.argmax().to_string());
            return Ok(());
        }
        Task::EncodeDecode => vec![Input::Frames(rows)],
        Task::Caption | Task::PerstepDecode => rows.into_iter().map(Input::Static).collect(),
    };
    let vocab = m.vocab().context("checkpoint has no vocabulary")?;
    for input in &inputs {
        let hyp = decode(&m.condition(input)?, &cfg)?;
        if !hyp.log_prob.is_finite() {
            return Err(NumericFailure("non-finite sequence score".into()).into());
        }
        emit(&vocab.decode(&hyp.tokens));
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cell = CellKind::parse(&a.cell)?;
    let variants = match &a.variant {
        Some(v) => vec![CaptionVariant::parse(v)?],
        None => CaptionVariant::ALL.to_vec(),
    };
    let tasks = match a.task.as_str() {
        "all" => vec![Task::Classify, Task::Caption, Task::EncodeDecode, Task::PerstepDecode],
        t => vec![Task::parse(t)?],
    };
    let mut all_passed = true;
    for task in tasks {
        let stacks: Vec<(String, CaptionVariant)> = if task == Task::Caption {
            variants.iter().map(|v| (v.name().to_string(), *v)).collect()
        } else {
            vec![(task.name().to_string(), CaptionVariant::OneLayer)]
        };
        for (label, variant) in stacks {
            let (m, batch) = gradcheck_problem(task, variant, cell, a.seed)?;
            let report = gradient_check(&m, &batch, a.eps, a.tol)?;
            for b in &report.blocks {
                emit(&format!(
                    "{label} {} rel {:.3e} abs {:.3e} {}",
                    b.name,
                    b.max_rel_error,
                    b.max_abs_error,
                    if b.passed { "ok" } else { "FAIL" }
                ));
            }
            all_passed &= report.passed;
        }
    }
    if !all_passed {
        return Err(NumericFailure(format!("gradient check failed at tolerance {}", a.tol)).into());
    }
    emit("gradcheck passed");
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let (task, set) = match a.task {
        SynthTask::Copy => (Task::EncodeDecode, gen_copy_task(a.seed, a.vocab, a.len, a.count)),
        SynthTask::Caption => (Task::Caption, gen_toy_captioning(a.seed, a.count, a.noise).set),
        SynthTask::Order => (Task::Classify, gen_order_task(a.seed, a.count)),
    };
    save_task_data(&a.out, task, &set.examples, set.vocab.as_ref())?;
    emit(&format!("wrote {} {} examples to {}", set.examples.len(), task.name(), a.out.display()));
    Ok(())
}
