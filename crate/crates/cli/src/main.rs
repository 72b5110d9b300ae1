//! `driftcal` command-line front-end.
//!
//! Exit codes: 0 on success, 2 for configuration or validation errors, 3 for
//! failures while computing. Every error is reported as one line on stderr:
//! `error[config]: ...` or `error[runtime]: ...`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftcal_core::harness::{self, PrepareOptions, PrepareSource, ReportFormat, RunConfig};
use driftcal_core::shift::{Pattern, SplitOptions, SynthSpec, DEFAULT_KEEP_NUM, DEFAULT_KEEP_STR};
use driftcal_core::Error;

const THREADS_ENV: &str = "DRIFTCAL_THREADS";

#[derive(Parser)]
#[command(
    name = "driftcal",
    version,
    about = "Calibration and uncertainty studies under distribution shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build shifted splits from a corpus file or the synthetic generator.
    Prepare(PrepareArgs),
    /// Train, calibrate, score and evaluate as described by a run config.
    Run(RunArgs),
    /// Turn a run directory into plot-ready tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Corpus TSV: id, timestamp, project, author, space-separated tokens.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    corpus: Option<PathBuf>,
    /// Generate a synthetic drift corpus, optionally from a JSON spec file.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    synth: Option<String>,
    /// timeline, project, author, paradigm or synthetic.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Timeline window starts t1,t2,t3,t4.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    boundaries: Option<Vec<i64>>,
    /// Projects sent to the OOD split, comma-separated.
    #[arg(long, value_delimiter = ',')]
    ood_projects: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_KEEP_STR)]
    keep_str: usize,
    #[arg(long, default_value_t = DEFAULT_KEEP_NUM)]
    keep_num: usize,
    /// Skip training the encoder used for the cosine column.
    #[arg(long)]
    skip_cosine: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding eval_report.json and overhead.json.
    #[arg(long = "in")]
    input: PathBuf,
    /// json or csv.
    #[arg(long, default_value = "json")]
    format: String,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn prepare(args: PrepareArgs) -> driftcal_core::Result<()> {
    let source = match (&args.corpus, &args.synth) {
        (Some(path), _) => PrepareSource::Corpus(path.clone()),
        (None, Some(spec)) if spec.is_empty() => PrepareSource::Synth(SynthSpec::default()),
        (None, Some(spec)) => {
            let path = PathBuf::from(spec);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            PrepareSource::Synth(serde_json::from_str(&text)?)
        }
        (None, None) => unreachable!("clap requires --corpus or --synth"),
    };
    let mut opts = PrepareOptions::new(source, &args.out);
    opts.pattern = args.pattern.as_deref().map(str::parse::<Pattern>).transpose()?;
    opts.split = SplitOptions {
        boundaries: args.boundaries.map(|b| [b[0], b[1], b[2], b[3]]),
        ood_projects: args.ood_projects,
    };
    opts.keep_str = args.keep_str;
    opts.keep_num = args.keep_num;
    opts.cosine = !args.skip_cosine;
    let (corpus, report) = harness::prepare(&opts)?;
    for w in &corpus.warnings {
        eprintln!("warning[{}]: {}", w.kind, w.message);
    }
    for row in &report.rows {
        println!("{}\t{} snippets\tkl {:.4}", row.split, row.snippet_count, row.kl);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(args: RunArgs) -> driftcal_core::Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let out = harness::execute(&config)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    for r in &out.overhead.rows {
        let mult = r.multiplier.map_or_else(|| "-".to_string(), |m| format!("{m:.1}x"));
        println!("{}\ttotal {:.3}s\t{mult}", r.method, r.total_s);
    }
    println!("wrote {}", config.output_dir.display());
    Ok(())
}

fn report(args: ReportArgs) -> driftcal_core::Result<()> {
    let format: ReportFormat = args.format.parse()?;
    for path in harness::consolidate(&args.input, format, args.out.as_deref())? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn one_line(msg: impl ToString) -> String {
    msg.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error[config]: {}", one_line(msg));
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_validation() => {
            eprintln!("error[config]: {}", one_line(e));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error[runtime]: {}", one_line(e));
            ExitCode::from(3)
        }
    }
}
