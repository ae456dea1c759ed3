//! Command-line front end: synthetic data generation, training, evaluation,
//! normalization, and the bias-size sweep.
//!
//! Machine-readable JSON goes to stdout (or `--out`); human summaries go to
//! stderr. Exit codes: 0 success, 1 runtime failure, 2 usage errors.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use adacs::data::{self, Difficulty, SplitConfig, SplitSet, SpokenReferencePair};
use adacs::eval::{
    bias_size_sweep, run_experiment, sweep_csv, tagger_span_f1, BiasMode, ExperimentConfig,
};
use adacs::model::{fit, AdaCsModel, ModelConfig, TrainConfig};
use adacs::text::Vocabulary;
use adacs::BiasEntry;

#[derive(Parser)]
#[command(name = "adacs", version, about = "Adaptive code-switching normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset splits and training lexicon.
    GenData(GenDataArgs),
    /// Train a model on a JSONL dataset and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set under one bias mode.
    Eval(EvalArgs),
    /// Normalize sentences from stdin or a file against a bias list.
    Normalize(NormalizeArgs),
    /// Run the bias-size sweep and emit CSV rows.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for train.jsonl, test_general.jsonl,
    /// test_medical.jsonl and train_lexicon.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON config file; the "data" section overrides split defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training pairs, JSON lines.
    #[arg(long)]
    data: PathBuf,
    /// Training lexicon (JSON array of phrases) for bias-list distractors.
    #[arg(long)]
    lexicon: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    bank_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Wall-clock training cap in minutes (safety valve; makes early stops
    /// nondeterministic).
    #[arg(long)]
    time_budget_mins: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// none | words | phrases
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 200)]
    bank_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// all | easy | hard
    #[arg(long, default_value = "all")]
    difficulty: String,
    /// Also score tagger span F1.
    #[arg(long)]
    f1: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Bias list: JSON array of words/phrases.
    #[arg(long)]
    bias: Option<PathBuf>,
    /// Input file, one sentence per line; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Print tags, regions and replacements to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated bank sizes, ascending.
    #[arg(long, default_value = "10,100,500")]
    sizes: String,
    #[arg(long, default_value = "words")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The JSON config file schema shared by gen-data and train.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct AppConfig {
    model: ModelSpec,
    train: TrainSpec,
    data: Option<SplitConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ModelSpec {
    d_model: usize,
    heads: usize,
    enc_layers: usize,
    dec_layers: usize,
    max_seq_len: usize,
    max_decode_len: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            max_seq_len: 512,
            max_decode_len: 160,
        }
    }
}

impl ModelSpec {
    fn to_model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            vocab_size,
            max_seq_len: self.max_seq_len,
            max_decode_len: self.max_decode_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainSpec {
    epochs: usize,
    batch_size: usize,
    bank_size: usize,
    lr: f64,
    seed: u64,
    max_steps: Option<u64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            bank_size: 200,
            lr: 3e-4,
            seed: 0,
            max_steps: None,
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn read_pairs(path: &Path) -> Result<Vec<SpokenReferencePair>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
    data::read_jsonl(&text).with_context(|| format!("parsing dataset {}", path.display()))
}

fn read_string_list(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading list {}", path.display()))?;
    let list: Vec<String> =
        serde_json::from_str(&text).with_context(|| format!("parsing list {}", path.display()))?;
    Ok(list)
}

fn emit(report: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, report).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{report}"),
    }
    Ok(())
}

fn filter_difficulty(
    pairs: Vec<SpokenReferencePair>,
    which: &str,
) -> Result<Vec<SpokenReferencePair>> {
    let filtered = match which {
        "all" => pairs,
        "easy" => pairs
            .into_iter()
            .filter(|p| p.difficulty == Difficulty::Easy)
            .collect(),
        "hard" => pairs
            .into_iter()
            .filter(|p| p.difficulty == Difficulty::Hard)
            .collect(),
        other => bail!("unknown difficulty filter {other:?} (use all|easy|hard)"),
    };
    Ok(filtered)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let split_cfg = cfg.data.unwrap_or_default();
    let set = data::build_splits(&split_cfg, args.seed)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = args.out_dir.join(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
    };
    write("train.jsonl", data::write_jsonl(&set.train))?;
    write("test_general.jsonl", data::write_jsonl(&set.test_general))?;
    write("test_medical.jsonl", data::write_jsonl(&set.test_medical))?;
    write(
        "train_lexicon.json",
        serde_json::to_string_pretty(&set.lexicon_general.train_visible())?,
    )?;
    let summary = serde_json::json!({
        "seed": args.seed,
        "train_pairs": set.train.len(),
        "test_general_pairs": set.test_general.len(),
        "test_medical_pairs": set.test_medical.len(),
        "cs_token_fraction_train": SplitSet::cs_token_fraction(&set.train),
        "unseen_rate_general": set.unseen_phrase_rate(&set.test_general),
        "unseen_rate_medical": set.unseen_phrase_rate(&set.test_medical),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    eprintln!(
        "wrote {} train / {} + {} test pairs to {}",
        set.train.len(),
        set.test_general.len(),
        set.test_medical.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let pairs = read_pairs(&args.data)?;
    let lexicon = read_string_list(&args.lexicon)?;
    let corpus: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.spoken.as_str(), p.reference.as_str()])
        .collect();
    let vocab = Vocabulary::build(&corpus)?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let model_cfg = cfg.model.to_model_config(vocab.size(), seed);
    let train_cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(cfg.train.epochs),
        batch_size: args.batch_size.unwrap_or(cfg.train.batch_size),
        bank_size: args.bank_size.unwrap_or(cfg.train.bank_size),
        lr: cfg.train.lr,
        seed,
        max_steps: args.max_steps.or(cfg.train.max_steps),
        time_budget: args.time_budget_mins.map(|m| Duration::from_secs(m * 60)),
    };
    eprintln!(
        "training on {} pairs, vocab {}, d_model {}, {} epochs",
        pairs.len(),
        vocab.size(),
        model_cfg.d_model,
        train_cfg.epochs
    );
    let mut model = AdaCsModel::<f32>::new(model_cfg)?;
    let report = fit(&mut model, &pairs, &vocab, &lexicon, &train_cfg, |stats| {
        eprintln!(
            "epoch {} | {} steps | loss {:.4} (tag {:.4} enc {:.4} dec {:.4} gen {:.4}) | {:.1}s",
            stats.epoch,
            stats.steps,
            stats.mean_loss.total,
            stats.mean_loss.l_tagger,
            stats.mean_loss.l_enc_rank,
            stats.mean_loss.l_dec_rank,
            stats.mean_loss.l_gen,
            stats.wall_seconds
        );
    })?;
    fs::write(&args.out, model.save_checkpoint(&vocab))
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    let summary = serde_json::json!({
        "checkpoint": args.out.display().to_string(),
        "steps": report.steps,
        "stopped_early": report.stopped_early,
        "epochs": report.epochs,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    eprintln!("saved checkpoint to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mode = BiasMode::parse(&args.mode)
        .with_context(|| format!("unknown bias mode {:?} (use none|words|phrases)", args.mode))?;
    let bytes = fs::read(&args.ckpt)
        .with_context(|| format!("reading checkpoint {}", args.ckpt.display()))?;
    let (model, vocab) = AdaCsModel::<f32>::load_checkpoint(&bytes)?;
    let pairs = filter_difficulty(read_pairs(&args.data)?, &args.difficulty)?;
    if pairs.is_empty() {
        bail!("no pairs left after the difficulty filter");
    }
    let cfg = ExperimentConfig::new(mode, args.bank_size, args.seed);
    let report = run_experiment(&model, &vocab, &pairs, &cfg)?;
    let json = if args.f1 {
        let f1 = tagger_span_f1(&model, &vocab, &pairs, &cfg)?;
        serde_json::to_string_pretty(&serde_json::json!({
            "metrics": report,
            "span_f1": f1,
        }))?
    } else {
        report.to_json()
    };
    emit(&json, &args.out)?;
    eprintln!(
        "{} pairs | mode {} | WER {:.4} | N-WER {:.4} | CS-WER {:.4} | {:.2} ex/s",
        pairs.len(),
        mode.as_str(),
        report.wer,
        report.n_wer,
        report.cs_wer,
        report.speed_examples_per_s
    );
    Ok(())
}

fn cmd_normalize(args: NormalizeArgs) -> Result<()> {
    let bytes = fs::read(&args.ckpt)
        .with_context(|| format!("reading checkpoint {}", args.ckpt.display()))?;
    let (model, vocab) = AdaCsModel::<f32>::load_checkpoint(&bytes)?;
    let bias_list = match &args.bias {
        Some(path) => read_string_list(path)?,
        None => Vec::new(),
    };
    let entries: Vec<BiasEntry> = bias_list
        .iter()
        .map(|p| BiasEntry::new(p, &vocab))
        .collect();
    let bank = model.freeze_bank(&entries)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let process = |line: &str, out: &mut dyn Write| -> Result<()> {
        let trimmed = line.trim_end_matches('\n');
        if trimmed.is_empty() {
            writeln!(out)?;
            return Ok(());
        }
        let result = model.normalize(trimmed, &vocab, &bank)?;
        if args.verbose {
            eprintln!("tags    : {}", result.tags.as_string());
            let sel: String = result
                .enc_selected
                .iter()
                .map(|&s| if s == 0 { '.' } else { (b'A' + ((s - 1) % 26) as u8) as char })
                .collect();
            eprintln!("selected: {sel}");
            for (r, rep) in result.regions.iter().zip(&result.replacements) {
                eprintln!("region  : [{}, {}] -> {rep:?}", r.start, r.end);
            }
        }
        writeln!(out, "{}", result.output)?;
        Ok(())
    };
    match &args.input {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading input {}", path.display()))?;
            for line in text.lines() {
                process(line, &mut out)?;
            }
        }
        None => {
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                process(&line?, &mut out)?;
            }
        }
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mode = BiasMode::parse(&args.mode)
        .with_context(|| format!("unknown bias mode {:?} (use none|words|phrases)", args.mode))?;
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing sizes {:?}", args.sizes))?;
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        bail!("sizes must be ascending");
    }
    let bytes = fs::read(&args.ckpt)
        .with_context(|| format!("reading checkpoint {}", args.ckpt.display()))?;
    let (model, vocab) = AdaCsModel::<f32>::load_checkpoint(&bytes)?;
    let pairs = read_pairs(&args.data)?;
    let rows = bias_size_sweep(&model, &vocab, &pairs, mode, &sizes, args.seed)?;
    let csv = sweep_csv(&rows);
    emit(&csv, &args.out)?;
    for row in &rows {
        eprintln!(
            "size {:>5} | CS-WER {:.4} | N-WER {:.4} | WER {:.4} | {:.2} ex/s",
            row.size, row.cs_wer, row.n_wer, row.wer, row.examples_per_s
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Normalize(args) => cmd_normalize(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
