use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use salguide::datagen::{generate_all, GenDataOptions};
use salguide::evidence::{dump_saliency, run_evidence, EvidenceOptions};
use salguide::metrics::{to_csv, MetricsRow};
use salguide::protocol::{run_ablation, run_all, Axis, ProtocolSettings, DEFAULT_SEEDS};
use salguide::report::write_report;
use salguide::run::{execute, load_model, read_runs, RunData, RunSpec, MANIFEST_FILE};
use salguide::{eval_checkpoint, HarnessError, Result};
use salguide_core::store::read_dataset;
use salguide_core::train::{DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_FREQ, DEFAULT_LEARNING_RATE};
use salguide_core::{Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "salguide", version, about = "Saliency-guided training experiments on synthetic biased domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source train/val splits and the six target test splits.
    GenData(GenDataArgs),
    /// Train one run.
    Train(TrainArgs),
    /// Evaluate a checkpoint on dataset splits.
    Eval(EvalArgs),
    /// Train all modes over several seeds.
    Experiment(ExperimentArgs),
    /// Train one ablation axis and write its table.
    Ablate(AblateArgs),
    /// Train a two-domain classifier and dump per-domain saliency.
    DomainEvidence(EvidenceArgs),
    /// Summarize finished runs into CSV and SVG charts.
    Report(ReportArgs),
    /// Write GradCAM maps of a checkpoint as PGM files.
    SaliencyDump(DumpArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that a source background matches its class.
    #[arg(long, default_value_t = 1.0)]
    bias: f64,
    /// Source training images per class.
    #[arg(long, default_value_t = 200)]
    n_per_class: usize,
    #[arg(long, default_value_t = 50)]
    val_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct Hyper {
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_FREQ)]
    freq: usize,
    /// Target domains are evaluated during this many final epochs.
    #[arg(long, default_value_t = 4)]
    eval_targets_last: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    /// Masking block, 1-based (default: last).
    #[arg(long)]
    block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    /// Skip the run if an identical completed run exists.
    #[arg(long)]
    reuse: bool,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split directories, e.g. data/sketch/test.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    no_pointing: bool,
    /// Also write the rows to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    #[arg(long)]
    reuse: bool,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_parser = parse_axis)]
    axis: Axis,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Table path (default: <out>/ablation_<axis>.csv).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    reuse: bool,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct EvidenceArgs {
    /// Two split directories, comma-separated: A,B (A is label 0).
    #[arg(long, value_delimiter = ',', required = true)]
    domains: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One split directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (default: <run>/saliency/<domain>_<split>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse()
}

const NUM_BLOCKS: usize = 4;

fn settings(h: &Hyper, seeds: Vec<u64>) -> ProtocolSettings {
    ProtocolSettings {
        epochs: h.epochs,
        learning_rate: h.lr,
        batch_size: h.batch_size,
        freq: h.freq,
        num_blocks: NUM_BLOCKS,
        seeds,
        eval_targets_last: h.eval_targets_last,
    }
}

fn print_rows(rows: &[MetricsRow]) {
    print!("{}", to_csv(rows));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let opts = GenDataOptions {
                out: a.out,
                seed: a.seed,
                bias: a.bias,
                num_classes: a.classes,
                train_per_class: a.n_per_class,
                val_per_class: a.val_per_class,
                test_per_class: a.test_per_class,
                side: a.side,
                force: a.force,
            };
            for m in generate_all(&opts)? {
                println!("{}/{}: {} examples", m.domain, m.split, m.example_count);
            }
        }
        Command::Train(a) => {
            let mut c = TrainConfig::new(a.mode, NUM_BLOCKS, a.seed);
            c.epochs = a.hyper.epochs;
            c.learning_rate = a.hyper.lr;
            c.batch_size = a.hyper.batch_size;
            c.freq = a.hyper.freq;
            c.xai_block = a.block.unwrap_or(NUM_BLOCKS);
            c.validate(NUM_BLOCKS)?;
            let mut spec = RunSpec::new(c, &a.data);
            spec.eval_targets_last = a.hyper.eval_targets_last;
            if let Some(id) = a.run_id {
                spec.run_id = id;
            }
            let data = RunData::load(&a.data)?;
            let outcome = execute(&spec, &data, &a.out, a.reuse)?;
            print_rows(&outcome.rows);
            eprintln!("run written to {}", outcome.dir.display());
        }
        Command::Eval(a) => {
            let rows = eval_checkpoint(&a.checkpoint, &a.data, !a.no_pointing)?;
            if let Some(p) = &a.out {
                std::fs::write(p, to_csv(&rows)).map_err(|e| HarnessError::io(p, e))?;
            }
            print_rows(&rows);
        }
        Command::Experiment(a) => {
            let s = settings(&a.hyper, a.seeds);
            s.train_config(Mode::Xai, 0).validate(NUM_BLOCKS)?;
            let data = RunData::load(&a.data)?;
            for o in run_all(&s.main_specs(&a.data), &data, &a.out, a.reuse)? {
                eprintln!("{}{}", o.dir.display(), if o.reused { " (reused)" } else { "" });
            }
            write_report(&read_runs(&a.out)?, &a.out.join("report"))?;
        }
        Command::Ablate(a) => {
            let s = settings(&a.hyper, vec![a.seed]);
            s.train_config(Mode::Xai, a.seed).validate(NUM_BLOCKS)?;
            let data = RunData::load(&a.data)?;
            let table = run_ablation(a.axis, &s, a.seed, &data, &a.data, &a.out, a.reuse)?;
            let name = match a.axis {
                Axis::Where => "ablation_where.csv",
                Axis::When => "ablation_when.csv",
            };
            let path = a.table.unwrap_or_else(|| a.out.join(name));
            std::fs::write(&path, table.to_csv()).map_err(|e| HarnessError::io(&path, e))?;
            print!("{}", table.to_csv());
        }
        Command::DomainEvidence(a) => {
            if a.domains.len() != 2 {
                return Err(HarnessError::Usage(format!("--domains needs exactly two directories, got {}", a.domains.len())));
            }
            let mut opts = EvidenceOptions::new(&a.domains[0], &a.domains[1], &a.out);
            opts.epochs = a.epochs;
            opts.learning_rate = a.lr;
            opts.seed = a.seed;
            let r = run_evidence(&opts)?;
            println!("test accuracy {:.4} over {} images", r.test_accuracy, r.test_ids.len());
        }
        Command::Report(a) => {
            write_report(&read_runs(&a.runs)?, &a.out)?;
            println!("report written to {}", a.out.display());
        }
        Command::SaliencyDump(a) => {
            let (model, manifest) = load_model(&a.checkpoint)?;
            let run_dir = a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
            let block = match a.block {
                Some(b) => b,
                None => manifest.xai_block(&run_dir.join(MANIFEST_FILE))?,
            };
            let (ds, m) = read_dataset(&a.data)?;
            let out = a
                .out
                .unwrap_or_else(|| run_dir.join("saliency").join(format!("{}_{}", m.domain, m.split)));
            let n = dump_saliency(&model, &ds, block, a.limit, &out)?;
            println!("{n} maps written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
