//! Command-line surface for the auto-sizing toolkit: generate toy data,
//! train with group-regularized proximal steps, prune dead units out of
//! a checkpoint, evaluate, and render size/quality comparisons.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asnmt::autosize::{
    compact, detect_dead_groups, render_records, render_table, scope_to_groups,
    zero_near_dead_groups, AutosizeScope, SystemRow,
};
use asnmt::checkpoint;
use asnmt::config::{param_count, ModelLayout};
use asnmt::data::{gen_task, read_corpus, write_corpus, Split, TaskKind, Vocab};
use asnmt::decode::beam_search;
use asnmt::error::{Error, Result};
use asnmt::metrics::{bleu, token_accuracy};
use asnmt::model::TransformerModel;
use asnmt::runconfig::RunConfig;
use asnmt::trainer::train_loop;

const DEFAULTS_HELP: &str = "\
Defaults follow the reference training regime: num_layers 6, d_model 512, \
num_heads 8, d_ffn 2048, dropout 0.1, label_smoothing 0.1, clip_norm 0.1, \
Adam learning_rate 1e-4 with early stop once the decayed rate falls below \
1e-5, and beam 5 with length normalization at evaluation time. \
Run `asnmt init-config` to print the full default configuration file.";

#[derive(Parser)]
#[command(name = "asnmt", version, about = "Auto-sizing toy translation toolkit", long_about = None, after_help = DEFAULTS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus (train/valid/test + vocab)
    Gen(GenArgs),
    /// Print the default run configuration with documented defaults
    InitConfig,
    /// Train a model according to a run configuration file
    Train(TrainArgs),
    /// Delete exactly-zero groups from a checkpoint and report the shrink
    Prune(PruneArgs),
    /// Decode a corpus split with beam search and score it
    Eval(EvalArgs),
    /// Render a size/quality comparison table over checkpoints or configs
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// copy | reverse | lexical-swap
    #[arg(long)]
    task: String,
    /// vocabulary size including the 4 reserved tokens (must exceed 4)
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    /// training pair count (validation and test are size/10, capped)
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// output directory for train/valid/test.{src,tgt} and vocab.txt
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// run configuration file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// history file path (defaults to <out-checkpoint>.history)
    #[arg(long)]
    history: Option<PathBuf>,
    /// override the config's data_dir
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// zero groups whose max-abs entry is below this before pruning
    /// (default 0: only exact zeros are deleted)
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// directory holding <split>.src and <split>.tgt
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// beam width
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// length-normalization exponent
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// add-one BLEU smoothing for tiny corpora
    #[arg(long, default_value_t = false)]
    smooth_bleu: bool,
    /// decode at most this many sentences (0 = all)
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// write decoded sentences here, one per line
    #[arg(long)]
    hyp_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// baseline checkpoint or run-config file
    #[arg(long)]
    baseline: PathBuf,
    /// pruned/system checkpoints or config files, in display order
    #[arg(long)]
    pruned: Vec<PathBuf>,
    /// metrics record files (from `eval`), applied to systems in order
    #[arg(long)]
    metrics: Vec<PathBuf>,
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let kind = TaskKind::parse(&args.task)?;
    let task = gen_task(kind, args.vocab_size, args.size, (args.min_len, args.max_len), args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    task.vocab.save(&args.out.join("vocab.txt"))?;
    write_corpus(&args.out, "train", &task.train, &task.vocab)?;
    write_corpus(&args.out, "valid", &task.valid, &task.vocab)?;
    write_corpus(&args.out, "test", &task.test, &task.vocab)?;
    println!(
        "task={} vocab={} train={} valid={} test={} seed={} out={}",
        args.task,
        task.vocab.len(),
        task.train.pairs.len(),
        task.valid.pairs.len(),
        task.test.pairs.len(),
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(&args.config)?;
    let data_dir = args
        .data
        .or_else(|| run.data_dir.clone())
        .ok_or_else(|| Error::Config("no data_dir in config and no --data given".into()))?;
    let vocab = Vocab::load(&data_dir.join("vocab.txt"))?;
    // the data defines the vocabulary; the config value covers size
    // reporting without data
    run.model.vocab_size = vocab.len();
    let train = read_corpus(&data_dir, "train", Split::Train, &vocab)?;
    let valid = read_corpus(&data_dir, "valid", Split::Valid, &vocab)?;

    let mut model = TransformerModel::new(run.model.clone(), run.train.seed)?;
    let outcome = train_loop(&mut model, &train, &valid, &run.train)?;

    let history_path = args
        .history
        .unwrap_or_else(|| PathBuf::from(format!("{}.history", args.out_checkpoint.display())));
    std::fs::write(&history_path, outcome.history_text())?;
    checkpoint::save(&args.out_checkpoint, &model, &vocab)?;

    if let Some(last) = outcome.history.last() {
        println!("{}", last.record());
    }
    println!(
        "checkpoint={} params={} bytes={} epochs={}",
        args.out_checkpoint.display(),
        model.param_count(),
        checkpoint::serialized_size(&model, &vocab),
        outcome.epochs_run
    );
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<()> {
    let (mut model, vocab) = checkpoint::load(&args.checkpoint)?;
    let specs = scope_to_groups(&model, AutosizeScope::All);
    if args.epsilon > 0.0 {
        let zeroed = zero_near_dead_groups(&mut model, &specs, args.epsilon)?;
        println!("epsilon={} zeroed_groups={zeroed}", args.epsilon);
    }
    let dead = detect_dead_groups(&model, &specs)?;
    let (compacted, report) = compact(&model, &dead, &vocab)?;
    checkpoint::save(&args.out, &compacted, &vocab)?;
    print!("{}", report.records());
    println!(
        "pruned_groups={} out={}",
        report.total_zero_groups(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, vocab) = checkpoint::load(&args.checkpoint)?;
    let corpus = read_corpus(&args.corpus, &args.split, Split::Test, &vocab)?;
    let pairs: Vec<_> = if args.limit > 0 && args.limit < corpus.pairs.len() {
        corpus.pairs[..args.limit].to_vec()
    } else {
        corpus.pairs.clone()
    };

    let mut hypotheses = Vec::with_capacity(pairs.len());
    for (src, _) in &pairs {
        hypotheses.push(beam_search(&model, src, args.beam, args.alpha)?);
    }
    if let Some(path) = &args.hyp_out {
        let mut text = String::new();
        for hyp in &hypotheses {
            text.push_str(&vocab.detokenize(hyp));
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    let references: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let b = bleu(&hypotheses, &references, args.smooth_bleu)?;
    let scored = asnmt::data::ParallelCorpus { split: Split::Test, pairs };
    let acc = token_accuracy(&model, &scored, 4096)?;
    println!(
        "bleu={:.4} p1={:.4} p2={:.4} p3={:.4} p4={:.4} bp={:.4} token_accuracy={:.4} sentences={} beam={} alpha={}",
        b.score,
        b.precisions[0],
        b.precisions[1],
        b.precisions[2],
        b.precisions[3],
        b.brevity_penalty,
        acc,
        scored.pairs.len(),
        args.beam,
        args.alpha
    );
    Ok(())
}

fn is_checkpoint(path: &Path) -> bool {
    std::fs::File::open(path)
        .and_then(|mut f| {
            use std::io::Read;
            let mut magic = [0u8; 6];
            f.read_exact(&mut magic)?;
            Ok(magic == *checkpoint::MAGIC)
        })
        .unwrap_or(false)
}

fn load_metrics(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        if let Some((key, value)) = token.split_once('=') {
            if matches!(key, "bleu" | "token_accuracy") {
                if let Ok(v) = value.parse::<f64>() {
                    out.push((key.to_string(), v));
                }
            }
        }
    }
    Ok(out)
}

fn system_row(path: &Path) -> Result<SystemRow> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if is_checkpoint(path) {
        let (model, vocab) = checkpoint::load(path)?;
        let disk_bytes = std::fs::metadata(path)?.len();
        debug_assert_eq!(disk_bytes, checkpoint::serialized_size(&model, &vocab));
        Ok(SystemRow { name, disk_bytes, params: model.param_count(), metrics: Vec::new() })
    } else {
        // a run config: report the closed-form parameter count and the
        // raw f64 payload it would serialize to
        let run = RunConfig::load(path)?;
        let layout = ModelLayout::full(&run.model);
        let params = param_count(&run.model, &layout);
        Ok(SystemRow { name, disk_bytes: 8 * params as u64, params, metrics: Vec::new() })
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut rows = vec![system_row(&args.baseline)?];
    for path in &args.pruned {
        rows.push(system_row(path)?);
    }
    for (row, metrics_path) in rows.iter_mut().zip(&args.metrics) {
        row.metrics = load_metrics(metrics_path)?;
    }
    print!("{}", render_table(&rows));
    print!("{}", render_records(&rows));
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => cmd_gen(args),
        Command::InitConfig => {
            print!("{}", RunConfig::default_file());
            Ok(())
        }
        Command::Train(args) => cmd_train(args),
        Command::Prune(args) => cmd_prune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
