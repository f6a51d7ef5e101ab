//! Command-line front end for the summarization stack: pre-training,
//! grounded continuation, fine-tuning, generation, scoring, gradient
//! verification, and encoder cost reporting.
//!
//! Configuration layers, lowest to highest precedence: built-in defaults,
//! a TOML file (`--config`), the `ZSUMM_SEED` environment variable (seed
//! only), then command-line flags. Training subcommands stream one JSON
//! metrics line per optimizer step to stdout and mirror them into a run
//! log file next to the checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use zsumm_core::checkpoint::{load_checkpoint, save_checkpoint};
use zsumm_core::data::{
    format_grounded, load_jsonl, normalize_tokens, FormatConfig, InstructionTemplates,
    Vocabulary, BOS, EOS, NUM_SPECIALS,
};
use zsumm_core::decode::{beam_search, DecodeConfig};
use zsumm_core::fie::{fie_cost, FiEConfig};
use zsumm_core::model::{ModelConfig, Seq2SeqScorer};
use zsumm_core::objectives::LossWeights;
use zsumm_core::optim::{AdamState, TrainConfig};
use zsumm_core::rng::example_rng;
use zsumm_core::rouge::{rouge_l, rouge_n};
use zsumm_core::trainer::{batch_at, token_windows, CorruptionConfig, Trainer};
use zsumm_core::{verify, CoreError, Result};

// ── Argument surface ─────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "zsumm", version, about = "Train, run, and score a small summarization model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Joint pre-training (masked prediction, replacement detection, span
    /// prediction) over raw text files.
    Pretrain(PretrainArgs),
    /// Continue a checkpoint on instruction-prefixed (source, summary)
    /// pairs with a fresh optimizer.
    Ground(ContinueArgs),
    /// Continue a checkpoint on plain (source, summary) pairs with a fresh
    /// optimizer; pairs may still carry their own instructions.
    Finetune(ContinueArgs),
    /// Beam-search summaries for a JSONL pair file.
    Generate(GenerateArgs),
    /// Mean overlap scores for a prediction file, as CSV.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Encoder attention-score counts, full vs chunked, as CSV.
    FieCost(FieCostArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (beats ZSUMM_SEED and the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Run log path (default: the output path with ".log" appended).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Optimizer steps to run.
    #[arg(long)]
    steps: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup steps (default: a tenth of the schedule).
    #[arg(long)]
    warmup: Option<u64>,
    /// Schedule length for the linear decay (default: one past the run
    /// length, so the final step keeps a nonzero rate; a longer value keeps
    /// the rate up at the end of this run).
    #[arg(long)]
    schedule_total: Option<u64>,
    /// Examples per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Decoupled weight decay on non-embedding matrices.
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Raw text corpus files.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Checkpoint output path; the vocabulary lands beside it.
    #[arg(long)]
    out: PathBuf,
    /// Maximum vocabulary size, reserved ids included.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Pre-training window length in tokens.
    #[arg(long, default_value_t = 64)]
    window: usize,
    /// Fraction of tokens masked for the generator.
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Mean corrupted-span length.
    #[arg(long)]
    mean_span: Option<f64>,
    /// Span-corruption granularity.
    #[arg(long, value_enum)]
    csp_mode: Option<CspModeArg>,
    /// Masked-prediction loss weight.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Detection loss weight.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Span-prediction loss weight.
    #[arg(long)]
    lambda3: Option<f64>,
    /// Embedding width.
    #[arg(long)]
    d: Option<usize>,
    /// Encoder layers.
    #[arg(long)]
    enc_layers: Option<usize>,
    /// Decoder layers.
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Chunk width for local encoder attention (enables chunking).
    #[arg(long)]
    fie_chunk: Option<usize>,
    /// Trailing encoder layers that attend globally when chunking.
    #[arg(long)]
    fie_global_layers: Option<usize>,
}

#[derive(Args)]
struct ContinueArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint to continue from (vocabulary is read from beside it).
    #[arg(long)]
    from: PathBuf,
    /// JSONL pair file: {"source", "summary", optional "instruction", "task"}.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Instruction template JSON ({task: [instructions]}); the built-in set
    /// is used when absent. Ignored by `finetune`, which formats plainly.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Store the summed discriminator embedding table in the output.
    #[arg(long)]
    finalize: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to decode with.
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL pair file; summaries ride along as references.
    #[arg(long)]
    data: PathBuf,
    /// Prediction JSONL output (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Instruction template JSON; the built-in set is used when absent.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Format inputs without any instruction prefix.
    #[arg(long)]
    plain: bool,
    /// Beam width (1 is greedy).
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Length-penalty exponent.
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    /// Block repeated n-grams of this size (0 disables).
    #[arg(long, default_value_t = 3)]
    block_ngram: usize,
    /// Maximum generated tokens.
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    /// Minimum generated tokens before the sequence may end.
    #[arg(long, default_value_t = 1)]
    min_len: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction JSONL: {"prediction", "reference"} per line.
    #[arg(long)]
    pred: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the fixture and parameters.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Coordinates probed per tensor.
    #[arg(long, default_value_t = 2)]
    coords: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Vocabulary size for the check model.
    #[arg(long, default_value_t = 130)]
    vocab_size: usize,
}

#[derive(Args)]
struct FieCostArgs {
    /// Input lengths to tabulate.
    #[arg(long = "n", default_values_t = vec![256usize, 512, 1024, 2048])]
    lens: Vec<usize>,
    /// Total encoder layers.
    #[arg(long, default_value_t = 24)]
    layers: usize,
    /// Trailing layers that attend globally.
    #[arg(long, default_value_t = 1)]
    fie_global_layers: usize,
    /// Chunk width for the local layers.
    #[arg(long, default_value_t = 256)]
    fie_chunk: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CspModeArg {
    /// Corrupt word spans.
    Span,
    /// Corrupt whole sentences.
    Sentence,
}

// ── Layered configuration ────────────────────────────────────────────

/// Optional per-field overrides read from the TOML config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    corruption: CorruptionSection,
    #[serde(default)]
    weights: WeightsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    d: Option<usize>,
    enc_layers: Option<usize>,
    dec_layers: Option<usize>,
    gen_layers: Option<usize>,
    heads: Option<usize>,
    d_ff: Option<usize>,
    vocab_size: Option<usize>,
    rel_k: Option<usize>,
    fie_chunk: Option<usize>,
    fie_global_layers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    steps: Option<u64>,
    lr: Option<f64>,
    warmup: Option<u64>,
    schedule_total: Option<u64>,
    batch: Option<usize>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorruptionSection {
    mask_rate: Option<f64>,
    mean_span: Option<f64>,
    csp_mode: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsSection {
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    lambda3: Option<f64>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => toml::from_str(&fs::read_to_string(p)?)
            .map_err(|e| CoreError::Config(format!("{}: {e}", p.display()))),
    }
}

/// Flag beats ZSUMM_SEED beats config file beats the default.
fn resolve_seed(flag: Option<u64>, env: Option<String>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(raw) = env {
        return raw
            .parse()
            .map_err(|_| CoreError::Config(format!("ZSUMM_SEED must be an integer, got {raw:?}")));
    }
    Ok(file.unwrap_or(42))
}

fn env_seed() -> Option<String> {
    std::env::var("ZSUMM_SEED").ok()
}

/// Assembles the optimizer schedule for one run of `steps` steps.
fn build_train_config(
    args: &TrainArgs,
    file: &TrainSection,
    seed: u64,
    default_steps: u64,
    default_lr: f64,
    batch_default: usize,
) -> (TrainConfig, u64) {
    let steps = args.steps.or(file.steps).unwrap_or(default_steps);
    let total = args.schedule_total.or(file.schedule_total).unwrap_or(steps + 1).max(steps);
    let warmup = args
        .warmup
        .or(file.warmup)
        .unwrap_or_else(|| (total / 10).max(1).min(total.saturating_sub(1)));
    let cfg = TrainConfig {
        peak_lr: args.lr.or(file.lr).unwrap_or(default_lr),
        warmup,
        total_steps: total.max(warmup + 1),
        batch: args.batch.or(file.batch).unwrap_or(batch_default),
        weight_decay: args.weight_decay.or(file.weight_decay).unwrap_or(0.01),
        seed,
        ..TrainConfig::default()
    };
    (cfg, steps)
}

// ── Metrics stream ───────────────────────────────────────────────────

/// Writes each metrics line to stdout and the run log.
struct MetricsSink {
    log: fs::File,
}

impl MetricsSink {
    fn create(out: &Path, explicit: &Option<PathBuf>) -> Result<MetricsSink> {
        let path = match explicit {
            Some(p) => p.clone(),
            None => {
                let mut s = out.as_os_str().to_owned();
                s.push(".log");
                PathBuf::from(s)
            }
        };
        Ok(MetricsSink { log: fs::File::create(path)? })
    }

    fn emit<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        println!("{line}");
        writeln!(self.log, "{line}")?;
        Ok(())
    }
}

// ── Subcommands ──────────────────────────────────────────────────────

fn vocab_sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".vocab.json");
    PathBuf::from(s)
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let file = load_file_config(&args.common.config)?;
    let seed = resolve_seed(args.common.seed, env_seed(), file.train.seed)?;

    let vocab_size = args.vocab_size.or(file.model.vocab_size).unwrap_or(512);
    if vocab_size <= NUM_SPECIALS {
        return Err(CoreError::Config(format!(
            "vocab size {vocab_size} leaves no room for words; the first {NUM_SPECIALS} ids are reserved"
        )));
    }
    let vocab = Vocabulary::build_from_paths(&args.corpus, vocab_size)?;

    let m = &file.model;
    let enc_layers = args.enc_layers.or(m.enc_layers).unwrap_or(2);
    let fie = match (
        args.fie_chunk.or(m.fie_chunk),
        args.fie_global_layers.or(m.fie_global_layers),
    ) {
        (None, None) => None,
        (chunk, global) => {
            let global_layers = global.unwrap_or(1);
            if global_layers > enc_layers {
                return Err(CoreError::Config(format!(
                    "{global_layers} global layers exceed the {enc_layers} encoder layers"
                )));
            }
            Some(FiEConfig {
                local_layers: enc_layers - global_layers,
                global_layers,
                chunk: chunk.unwrap_or(64),
            })
        }
    };
    let model = ModelConfig {
        l_enc: enc_layers,
        l_dec: args.dec_layers.or(m.dec_layers).unwrap_or(2),
        l_gen: m.gen_layers.unwrap_or(1),
        d: args.d.or(m.d).unwrap_or(64),
        heads: m.heads.unwrap_or(4),
        d_ff: m.d_ff.unwrap_or_else(|| 4 * args.d.or(m.d).unwrap_or(64)),
        vocab: vocab.size(),
        k: m.rel_k.unwrap_or(8),
        fie,
    };

    let (train, steps) = build_train_config(&args.train, &file.train, seed, 200, 5e-4, 8);
    let corruption = CorruptionConfig {
        mask_rate: args.mask_rate.or(file.corruption.mask_rate).unwrap_or(0.15),
        mean_span: args.mean_span.or(file.corruption.mean_span).unwrap_or(3.0),
        sentence_mode: match (&args.csp_mode, &file.corruption.csp_mode) {
            (Some(CspModeArg::Sentence), _) => true,
            (Some(CspModeArg::Span), _) => false,
            (None, Some(s)) if s == "sentence" => true,
            (None, Some(s)) if s == "span" => false,
            (None, Some(other)) => {
                return Err(CoreError::Config(format!(
                    "csp_mode must be \"span\" or \"sentence\", got {other:?}"
                )))
            }
            (None, None) => false,
        },
        delimiters: vec![vocab.id("."), vocab.id("!"), vocab.id("?")],
    };
    let weights = LossWeights {
        lambda1: args.lambda1.or(file.weights.lambda1).unwrap_or(1.0),
        lambda2: args.lambda2.or(file.weights.lambda2).unwrap_or(30.0),
        lambda3: args.lambda3.or(file.weights.lambda3).unwrap_or(1.0),
    };

    let mut stream = Vec::new();
    for path in &args.corpus {
        stream.extend(vocab.tokenize(&fs::read_to_string(path)?));
    }
    let windows = token_windows(&stream, args.window);
    if windows.is_empty() {
        return Err(CoreError::Config(format!(
            "corpus yields no windows of length {} (streamed {} tokens)",
            args.window,
            stream.len()
        )));
    }

    let mut trainer = Trainer::new(model, train, corruption, weights)?;
    let mut sink = MetricsSink::create(&args.out, &args.common.log)?;
    while trainer.step() < steps {
        let batch = batch_at(&windows, trainer.train_config.batch, trainer.step());
        let metrics = trainer.pretrain_step(&batch)?;
        sink.emit(&metrics)?;
    }

    save_checkpoint(&args.out, &trainer, false)?;
    vocab.save(vocab_sidecar(&args.out))?;
    eprintln!(
        "saved {} after {} steps ({} windows, vocab {})",
        args.out.display(),
        trainer.step(),
        windows.len(),
        vocab.size()
    );
    Ok(())
}

/// `ground` and `finetune` share everything except formatting and label.
fn run_continue(args: ContinueArgs, phase: &'static str) -> Result<()> {
    let file = load_file_config(&args.common.config)?;
    let seed = resolve_seed(args.common.seed, env_seed(), file.train.seed)?;

    let vocab = Vocabulary::load(vocab_sidecar(&args.from)).map_err(|e| {
        CoreError::Config(format!(
            "cannot read vocabulary beside {}: {e}",
            args.from.display()
        ))
    })?;
    let loaded = load_checkpoint(&args.from)?;

    let templates = if phase == "ground" {
        match &args.templates {
            Some(p) => InstructionTemplates::load(p)?,
            None => InstructionTemplates::bundled(),
        }
    } else {
        InstructionTemplates::empty()
    };
    let pairs = load_jsonl(&args.data)?;
    if pairs.is_empty() {
        return Err(CoreError::Config(format!("{} holds no pairs", args.data.display())));
    }
    let format = FormatConfig::default();
    let examples: Vec<(Vec<u32>, Vec<u32>)> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = example_rng(seed.wrapping_add(1), i as u64);
            format_grounded(p, &templates, &vocab, &format, &mut rng)
        })
        .collect();

    let (train, steps) = build_train_config(&args.train, &file.train, seed, 100, 3e-4, 8);
    // Fresh optimizer and schedule: only the weights carry over.
    let mut trainer = Trainer {
        params: loaded.params,
        model_config: loaded.model_config,
        train_config: train,
        corruption: loaded.corruption,
        weights: loaded.weights,
        opt: AdamState::new(),
        next_draw: 0,
    };

    let mut sink = MetricsSink::create(&args.out, &args.common.log)?;
    while trainer.step() < steps {
        let batch = batch_at(&examples, trainer.train_config.batch, trainer.step());
        let metrics = trainer.grounded_step(&batch, phase)?;
        sink.emit(&metrics)?;
    }

    save_checkpoint(&args.out, &trainer, args.finalize)?;
    vocab.save(vocab_sidecar(&args.out))?;
    eprintln!(
        "saved {} after {} steps on {} pairs",
        args.out.display(),
        trainer.step(),
        examples.len()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    prediction: String,
    reference: String,
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let file = load_file_config(&args.common.config)?;
    let seed = resolve_seed(args.common.seed, env_seed(), file.train.seed)?;

    let vocab = Vocabulary::load(vocab_sidecar(&args.ckpt)).map_err(|e| {
        CoreError::Config(format!(
            "cannot read vocabulary beside {}: {e}",
            args.ckpt.display()
        ))
    })?;
    let loaded = load_checkpoint(&args.ckpt)?;
    let templates = if args.plain {
        InstructionTemplates::empty()
    } else {
        match &args.templates {
            Some(p) => InstructionTemplates::load(p)?,
            None => InstructionTemplates::bundled(),
        }
    };

    let cfg = DecodeConfig {
        beam: args.beam,
        alpha: args.alpha,
        block_ngram: args.block_ngram,
        max_len: args.max_len,
        min_len: args.min_len,
    };
    let pairs = load_jsonl(&args.data)?;
    let format = FormatConfig::default();
    let mut lines = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = example_rng(seed.wrapping_add(1), i as u64);
        let (input, _) = format_grounded(pair, &templates, &vocab, &format, &mut rng);
        let scorer = Seq2SeqScorer::new(&loaded.params, &loaded.model_config, &input)?;
        let ids = beam_search(&scorer, BOS, EOS, &cfg)?;
        lines.push(serde_json::to_string(&Prediction {
            prediction: vocab.detokenize(&ids),
            reference: pair.summary.clone(),
        })?);
    }

    let body = lines.join("\n") + "\n";
    match &args.out {
        Some(p) => fs::write(p, body)?,
        None => print!("{body}"),
    }
    eprintln!("decoded {} inputs with beam {}", pairs.len(), args.beam);
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.pred)?;
    let (mut r1, mut r2, mut rl, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Prediction = serde_json::from_str(line).map_err(|e| CoreError::Jsonl {
            line: i + 1,
            message: e.to_string(),
        })?;
        let cand = normalize_tokens(&rec.prediction);
        let reference = normalize_tokens(&rec.reference);
        r1 += rouge_n(&cand, &reference, 1).f1;
        r2 += rouge_n(&cand, &reference, 2).f1;
        rl += rouge_l(&cand, &reference).f1;
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::Config(format!("{} holds no predictions", args.pred.display())));
    }
    let d = n as f64;
    println!("rouge1,rouge2,rougeL");
    println!("{:.4},{:.4},{:.4}", r1 / d, r2 / d, rl / d);
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let config = ModelConfig::tiny(args.vocab_size);
    let checks = verify::check_losses(&config, args.seed, args.coords, args.h)?;
    let mut ok = true;
    for c in &checks {
        let verdict = if c.max_rel_err <= args.tol { "ok" } else { "FAIL" };
        ok &= c.max_rel_err <= args.tol;
        println!(
            "{}: max relative error {:.3e} over {} coordinates ... {verdict}",
            c.loss, c.max_rel_err, c.coords_checked
        );
    }
    if !ok {
        return Err(CoreError::Config(format!(
            "gradient check exceeded tolerance {:.1e}",
            args.tol
        )));
    }
    Ok(())
}

fn run_fie_cost(args: FieCostArgs) -> Result<()> {
    if args.fie_global_layers > args.layers {
        return Err(CoreError::Config(format!(
            "{} global layers exceed the {} total layers",
            args.fie_global_layers, args.layers
        )));
    }
    let local = args.layers - args.fie_global_layers;
    println!("n,full_cost,fie_cost");
    for &n in &args.lens {
        let full = args.layers as u64 * (n as u64) * (n as u64);
        let chunked = fie_cost(n, args.layers, local, args.fie_global_layers, args.fie_chunk);
        println!("{n},{full},{chunked}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(args) => run_pretrain(args),
        Command::Ground(args) => run_continue(args, "ground"),
        Command::Finetune(args) => run_continue(args, "finetune"),
        Command::Generate(args) => run_generate(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::FieCost(args) => run_fie_cost(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence_is_flag_env_file_default() {
        assert_eq!(resolve_seed(Some(1), Some("2".into()), Some(3)).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some("2".into()), Some(3)).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some(3)).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 42);
        assert!(resolve_seed(None, Some("x".into()), None).is_err());
    }

    #[test]
    fn schedule_defaults_fill_sanely() {
        let args = TrainArgs {
            steps: Some(50),
            lr: None,
            warmup: None,
            schedule_total: None,
            batch: None,
            weight_decay: None,
        };
        let (cfg, steps) = build_train_config(&args, &TrainSection::default(), 7, 200, 5e-4, 8);
        assert_eq!(steps, 50);
        assert_eq!(cfg.total_steps, 51, "the last step keeps a nonzero rate");
        assert_eq!(cfg.warmup, 5);
        assert_eq!(cfg.seed, 7);
        cfg.validate().unwrap();

        // A longer schedule keeps the rate up at the end of the run.
        let args2 = TrainArgs { schedule_total: Some(500), ..args };
        let (cfg2, steps2) = build_train_config(&args2, &TrainSection::default(), 7, 200, 5e-4, 8);
        assert_eq!(steps2, 50);
        assert_eq!(cfg2.total_steps, 500);
        cfg2.validate().unwrap();
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let bad: std::result::Result<FileConfig, _> = toml::from_str("[train]\nlearning = 1.0");
        assert!(bad.is_err());
        let good: FileConfig = toml::from_str("[train]\nlr = 0.001\nseed = 9").unwrap();
        assert_eq!(good.train.lr, Some(0.001));
        assert_eq!(good.train.seed, Some(9));
    }

    #[test]
    fn sidecar_path_appends_suffix() {
        assert_eq!(
            vocab_sidecar(Path::new("runs/ck.bin")),
            PathBuf::from("runs/ck.bin.vocab.json")
        );
    }
}
