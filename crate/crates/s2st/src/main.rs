//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use s2st::config::AppConfig;
use s2st::data::{generate_dataset, Dataset};
use s2st::error::{PipelineError, Result};
use s2st::eval::{evaluate_sweep_with_audio, with_thread_limit, write_reports, EvalMode, SweepOutputs};
use s2st::model::Model;
use s2st::ngram::NgramModel;
use s2st::scheduler::PromptMode;
use s2st::train;

#[derive(Parser)]
#[command(
    name = "s2st",
    version,
    about = "Simultaneous speech-to-speech translation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset under a directory.
    GenData(GenDataArgs),
    /// Run stage-1 or stage-2 training and write a checkpoint.
    Train(TrainArgs),
    /// Train the speech-unit n-gram and write it as an ARPA file.
    NgramTrain(NgramArgs),
    /// Sweep wait-k values over a test set and write reports.
    Eval(EvalArgs),
    /// Print the aggregate table from an eval output directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptModeArg {
    Cif,
    Stack16,
}

impl From<PromptModeArg> for PromptMode {
    fn from(m: PromptModeArg) -> Self {
        match m {
            PromptModeArg::Cif => PromptMode::Cif,
            PromptModeArg::Stack16 => PromptMode::Stack16,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Cif,
    Stack16,
    Offline,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> Self {
        match m {
            EvalModeArg::Cif => EvalMode::Cif,
            EvalModeArg::Stack16 => EvalMode::Stack16,
            EvalModeArg::Offline => EvalMode::Offline,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for manifest, frames, and metadata.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of utterances.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Overrides the dataset seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Utterance-stream selector: datasets sharing a seed but differing
    /// here form train/test splits of one task.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to start from; required for stage 2.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt extraction mode to train.
    #[arg(long, value_enum)]
    mode: Option<PromptModeArg>,
}

#[derive(Args)]
struct NgramArgs {
    /// Dataset directory providing unit sequences.
    #[arg(long)]
    data: PathBuf,
    /// ARPA file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.75)]
    discount: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Test dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated wait-k values (ignored by offline mode).
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value = "cif")]
    mode: EvalModeArg,
    /// ARPA unit LM for shallow fusion.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also synthesize waveforms into this directory.
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    /// Record wall-clock timings for computation-aware metrics.
    #[arg(long)]
    wall_clock: bool,
    #[arg(long)]
    l_max_ratio: Option<f64>,
    #[arg(long)]
    text_beam: Option<usize>,
    #[arg(long)]
    unit_beam: Option<usize>,
    #[arg(long)]
    lm_weight: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by eval.
    #[arg(long)]
    dir: PathBuf,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = AppConfig::load_optional(a.config.as_deref())?;
    let mut spec = cfg.data;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(s) = a.split_seed {
        spec.split_seed = s;
    }
    let ds = generate_dataset(&spec, a.n, &a.out)?;
    let frames: usize = ds
        .utterances
        .iter()
        .map(|u| ds.load_frames(u).map(|f| f.rows()).unwrap_or(0))
        .sum();
    println!(
        "wrote {} utterances ({} frames) to {}",
        ds.utterances.len(),
        frames,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = AppConfig::load_optional(a.config.as_deref())?;
    let mut tc = cfg.train;
    tc.stage = a.stage;
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.batch {
        tc.batch = v;
    }
    if let Some(v) = a.gamma {
        tc.gamma = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(m) = a.mode {
        tc.mode = m.into();
    }

    let ds = Dataset::load(&a.data)?;
    let mut model = match &a.init {
        Some(p) => Model::load(p)?.0,
        None => {
            if a.stage == 2 {
                return Err(PipelineError::Config(
                    "stage 2 needs --init with a stage-1 checkpoint".to_string(),
                ));
            }
            Model::new(cfg.model.clone(), cfg.model_seed)?
        }
    };
    let stats = train::train(&mut model, &ds, &tc)?;
    let mode_name = match tc.mode {
        PromptMode::Cif => "cif",
        PromptMode::Stack16 => "stack16",
    };
    model.save(
        &a.out,
        json!({
            "stage": tc.stage,
            "mode": mode_name,
            "steps": tc.steps,
            "first_loss": stats.first(),
            "final_loss": stats.last(),
        }),
    )?;
    println!(
        "stage {} ({mode_name}): loss {:.4} -> {:.4} over {} steps; checkpoint {}",
        tc.stage,
        stats.first(),
        stats.last(),
        stats.losses.len(),
        a.out.display()
    );
    Ok(())
}

fn ngram_train(a: NgramArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let vocab: Vec<usize> = (0..ds.meta.spec.unit_vocab).collect();
    let seqs: Vec<Vec<usize>> = ds.utterances.iter().map(|u| u.units.clone()).collect();
    let lm = NgramModel::train(a.order, a.discount, &vocab, &seqs)?;
    lm.save_arpa(&a.out)?;
    println!(
        "order-{} unit LM on {} sequences, train perplexity {:.3}; wrote {}",
        a.order,
        seqs.len(),
        lm.perplexity(&seqs),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = AppConfig::load_optional(a.config.as_deref())?;
    let (model, _) = Model::load(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    let lm = match &a.lm {
        Some(p) => Some(NgramModel::load_arpa(p)?),
        None => None,
    };
    let mut base = cfg.session.resolve(model.cfg.chunk_frames);
    if let Some(v) = a.l_max_ratio {
        base.l_max_ratio = v;
    }
    if let Some(v) = a.text_beam {
        base.text_beam = v;
    }
    if let Some(v) = a.unit_beam {
        base.unit_beam = v;
    }
    if let Some(v) = a.lm_weight {
        base.lm_weight = v;
    }
    base.capture_wall_clock |= a.wall_clock;

    let mode: EvalMode = a.mode.into();
    let outs = with_thread_limit(|| {
        evaluate_sweep_with_audio(
            &model,
            &ds,
            lm.as_ref(),
            &a.k,
            mode,
            &base,
            a.wav_dir.as_deref(),
        )
    })??;
    write_reports(&outs, &a.out)?;
    print_aggregates(&outs);
    println!("reports in {}", a.out.display());
    Ok(())
}

fn print_aggregates(outs: &SweepOutputs) {
    let mode = match outs.mode {
        EvalMode::Cif => "cif",
        EvalMode::Stack16 => "stack16",
        EvalMode::Offline => "offline",
    };
    println!("mode: {mode} ({} sessions)", outs.rows.len());
    println!(
        "{:>4} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "k", "BLEU", "uBLEU", "AL", "LAAL", "ATD", "Start", "End"
    );
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.1}"),
        None => "-".to_string(),
    };
    for a in &outs.aggregates {
        println!(
            "{:>4} {:>8.2} {:>8.2} {:>9} {:>9} {:>9} {:>9} {:>8}",
            a.k,
            a.corpus_bleu,
            a.corpus_unit_bleu,
            fmt(a.mean_al),
            fmt(a.mean_laal),
            fmt(a.mean_atd),
            fmt(a.mean_start_offset),
            fmt(a.mean_end_offset),
        );
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let path = a.dir.join("aggregate.json");
    let outs: SweepOutputs = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    print_aggregates(&outs);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::NgramTrain(a) => ngram_train(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Report(a) => report(a),
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 1,
        PipelineError::Data(_) | PipelineError::Io(_) | PipelineError::Json(_)
        | PipelineError::Csv(_) => 2,
        PipelineError::Numeric(_) | PipelineError::Tensor(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
