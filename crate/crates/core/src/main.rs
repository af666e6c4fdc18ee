use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lora_rffi::harness::report::timestamp;
use lora_rffi::harness::{
    cfo_report, evaluate, train_checkpoint, write_dataset, Checkpoint, ClassifierKind, Config, DatasetFile,
    FrontEnd, PacketSource, Selection, SyntheticSource,
};
use lora_rffi::repr::ReprKind;
use lora_rffi::{Error, Result};

#[derive(Parser)]
#[command(name = "lora-rffi", version, about = "LoRa RF fingerprint identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a device population and write a dataset container.
    Generate(GenerateArgs),
    /// Train a classifier on the first packets of each device.
    Train(TrainArgs),
    /// Classify a test selection and write text and CSV reports.
    Eval(EvalArgs),
    /// Estimate the CFO of every packet and write plot-ready CSV.
    CfoReport(CfoReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self) -> Result<Config> {
        match &self.config {
            Some(path) => Config::load(path),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Args)]
struct CompensateFlags {
    /// Apply CFO compensation before building representations.
    #[arg(long, overrides_with = "no_compensate")]
    compensate: bool,
    #[arg(long, overrides_with = "compensate")]
    no_compensate: bool,
}

impl CompensateFlags {
    fn value(&self) -> Option<bool> {
        match (self.compensate, self.no_compensate) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "dataset.lrfd")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    representation: Option<ReprKind>,
    #[command(flatten)]
    compensate: CompensateFlags,
    /// Training seed; overrides `optimizer.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "model.lrfc")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classifier: Option<ClassifierKind>,
    /// CFO gate in Hz (`inf` disables gating).
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated test sessions.
    #[arg(long, value_delimiter = ',')]
    test_sessions: Option<Vec<u32>>,
    /// First test packet per device and session.
    #[arg(long)]
    start: Option<usize>,
    /// Test packets per device and session.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    compensate: CompensateFlags,
    /// Permit test packets that were also used for training.
    #[arg(long)]
    allow_overlap: bool,
    /// Report path stem; writes `<out>.txt` and `<out>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CfoReportArgs {
    #[arg(long)]
    force: bool,
    #[arg(long)]
    dataset: PathBuf,
    /// Path stem; writes `<out>_series.csv` and `<out>_sessions.csv`.
    #[arg(long, default_value = "cfo")]
    out: PathBuf,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn refuse_existing(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = args.common.config()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let source = SyntheticSource::plan(cfg.radio.params()?, cfg.profiles()?, cfg.capture, cfg.seed)?;
    let bytes = write_dataset(&args.out, &source, args.common.force)?;
    let m = source.manifest();
    println!(
        "wrote {}: {} devices, {} sessions, {} packets, {} bytes",
        args.out.display(),
        m.profiles.len(),
        m.schedule.sessions,
        m.records.len(),
        bytes
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.config()?;
    if let Some(seed) = args.seed {
        cfg.optimizer.seed = seed;
    }
    refuse_existing(&[&args.out], args.common.force)?;
    let dataset = DatasetFile::open(&args.dataset)?;
    let kind = args.representation.unwrap_or(cfg.train.representation);
    let compensate = args.compensate.value().unwrap_or(cfg.train.compensate);
    let fe = FrontEnd::new(dataset.manifest().params, kind, compensate)?;
    let selection = cfg.train_selection();
    let (ckpt, report) = train_checkpoint(&dataset, fe, None, selection.clone(), &cfg.optimizer)?;
    for e in &report.epochs {
        print!(
            "epoch {:>3}  lr {:.2e}  train loss {:.4}",
            e.epoch, e.learning_rate, e.train_loss
        );
        if let (Some(l), Some(a)) = (e.val_loss, e.val_accuracy) {
            print!("  val loss {l:.4}  val accuracy {a:.4}");
        }
        println!();
    }
    ckpt.save(&args.out, args.common.force)?;
    println!(
        "wrote {}: {kind}, compensation {}, {} devices, trained on {selection} ({} packets, best epoch {})",
        args.out.display(),
        if compensate { "on" } else { "off" },
        ckpt.model.classes().len(),
        report.train_count + report.val_count,
        report.best_epoch
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.config()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = DatasetFile::open(&args.dataset)?;
    let mut opts = cfg.eval_options();
    // unspecified parts of the test selection follow the checkpoint's training selection
    let train_sel = &ckpt.train_selection;
    let sessions = args
        .test_sessions
        .or(cfg.eval.sessions.clone())
        .unwrap_or_else(|| train_sel.sessions.clone());
    let start = args.start.or(cfg.eval.start).unwrap_or(if sessions == train_sel.sessions {
        train_sel.start + train_sel.count.unwrap_or(0)
    } else {
        0
    });
    opts.selection = Selection::new(sessions, start, args.count.or(cfg.eval.count));
    if let Some(c) = args.classifier {
        opts.classifier = c;
    }
    if let Some(l) = args.lambda {
        opts.lambda = Some(l);
    }
    opts.compensate = args.compensate.value();
    opts.allow_overlap = args.allow_overlap;
    let outputs = args
        .out
        .as_ref()
        .map(|stem| (with_suffix(stem, ".txt"), with_suffix(stem, ".csv")));
    if let Some((txt, csv)) = &outputs {
        refuse_existing(&[txt, csv], args.common.force)?;
    }

    let report = evaluate(&ckpt, &dataset, &opts)?;
    let ts = timestamp();
    let text = report.to_text(ts);
    match outputs {
        Some((txt, csv)) => {
            write(&txt, &text)?;
            write(&csv, &report.to_csv(ts))?;
            println!(
                "{} accuracy {:.4} (cnn-only {:.4}, hybrid {:.4}) over {} packets; wrote {} and {}",
                report.classifier,
                report.accuracy(),
                report.cnn_accuracy(),
                report.hybrid_accuracy(),
                report.total,
                txt.display(),
                csv.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cfo(args: CfoReportArgs) -> Result<()> {
    let series = with_suffix(&args.out, "_series.csv");
    let sessions = with_suffix(&args.out, "_sessions.csv");
    refuse_existing(&[&series, &sessions], args.force)?;
    let dataset = DatasetFile::open(&args.dataset)?;
    let report = cfo_report(&dataset)?;
    write(&series, &report.series_csv())?;
    write(&sessions, &report.sessions_csv())?;
    print!("{}", report.summary());
    println!("wrote {} and {}", series.display(), sessions.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CfoReport(a) => cfo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
