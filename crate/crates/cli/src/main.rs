use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sea_cli::{CliError, Simulation};
use sea_core::crossval::CorrelationMode;
use sea_core::engine::Variant;

#[derive(Parser)]
#[command(name = "sea", version, about = "Search a knowledge base for questions a model answers wrongly")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert corpus records to the internal corpus file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 200)]
        min_para_len: usize,
        /// Corpus file (`.jsonl`) or directory to write `corpus.jsonl` into.
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed document abstracts and build the index named in the config.
    Index {
        #[arg(long)]
        config: PathBuf,
    },
    /// Start a run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop cleanly once this many steps are committed.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Continue an interrupted run.
    Resume {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run every variant for several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no_prune,random_select")]
        variants: Vec<String>,
        #[arg(long)]
        seeds: u64,
    },
    /// Ask each testee the questions of each provider run's subset.
    Crossval {
        #[arg(long = "provider-run", required = true)]
        provider_runs: Vec<String>,
        #[arg(long = "testee-config", required = true)]
        testee_configs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long, value_enum, default_value = "per-question")]
        statistic: Statistic,
        #[arg(long, default_value = "crossval.json")]
        out: PathBuf,
    },
    /// Rebuild report.json from a run's artifacts.
    Report {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Write the analysis bundle of a run.
    Export {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long, required = true)]
        for_analysis: bool,
        /// Defaults to `<run>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with a planted error region and search it.
    Simulate {
        #[arg(long)]
        landscape: PathBuf,
        #[arg(long, default_value = "sim")]
        out: PathBuf,
        #[arg(long)]
        stop_after: Option<u64>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Statistic {
    PerQuestion,
    PerParagraph,
}

fn print_outcome(o: &sea_cli::RunOutcome) {
    println!("{}: {:?} after {} steps", o.dir.display(), o.status, o.steps);
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { input, min_para_len, out } => {
            let (path, s) = sea_cli::ingest(&input, min_para_len, &out)?;
            println!(
                "{}: {} documents, {} paragraphs ({} documents and {} paragraphs rejected, {} malformed records)",
                path.display(),
                s.docs,
                s.paragraphs,
                s.rejected_docs,
                s.rejected_paragraphs,
                s.malformed_records
            );
        }
        Command::Index { config } => {
            let cfg = sea_cli::load_config(&config)?;
            let sha = sea_cli::build_index(&cfg)?;
            println!("{}: {sha}", cfg.run.index.display());
        }
        Command::Run { config, stop_after } => {
            let cfg = sea_cli::load_config(&config)?;
            print_outcome(&sea_cli::run(&cfg, stop_after)?);
        }
        Command::Resume { run, runs_dir, stop_after } => {
            print_outcome(&sea_cli::resume(&sea_cli::resolve_run(&run, &runs_dir), stop_after)?);
        }
        Command::Ablate { config, variants, seeds } => {
            let cfg = sea_cli::load_config(&config)?;
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v).ok_or_else(|| CliError::Config(format!("unknown variant {v:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            for o in sea_cli::ablate(&cfg, &variants, seeds)? {
                print_outcome(&o);
            }
        }
        Command::Crossval { provider_runs, testee_configs, runs_dir, statistic, out } => {
            let dirs: Vec<PathBuf> = provider_runs.iter().map(|r| sea_cli::resolve_run(r, &runs_dir)).collect();
            let statistic = match statistic {
                Statistic::PerQuestion => CorrelationMode::PerQuestion,
                Statistic::PerParagraph => CorrelationMode::PerParagraph,
            };
            let report = sea_cli::crossval(&dirs, &testee_configs, statistic)?;
            sea_cli::write_crossval(&report, &out)?;
            for c in &report.cells {
                println!(
                    "testee {} on {}: {} questions, accuracy {:?}, correlation {:?}{}",
                    c.testee,
                    c.provider,
                    c.n_questions,
                    c.accuracy,
                    c.correlation,
                    c.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default()
                );
            }
        }
        Command::Report { run, runs_dir } => {
            let r = sea_cli::report(&sea_cli::resolve_run(&run, &runs_dir))?;
            println!(
                "{} [{}] {:?}: {} steps, {} paragraphs, T_S {:?}, {} sources, consumed {}",
                r.run_id, r.variant, r.status, r.totals.steps, r.totals.paragraphs, r.totals.t_s, r.totals.sources_total, r.totals.consumed
            );
        }
        Command::Export { run, runs_dir, out, .. } => {
            let dir = sea_cli::resolve_run(&run, &runs_dir);
            let out = out.unwrap_or_else(|| dir.join("analysis"));
            let s = sea_cli::export(&dir, &out)?;
            let partial = if s.partial { " (partial)" } else { "" };
            println!("{}: {} source rows{partial}", s.dir.display(), s.rows);
        }
        Command::Simulate { landscape, out, stop_after } => {
            let sim = Simulation::load(&landscape)?;
            print_outcome(&sea_cli::simulate(&sim, &out, stop_after)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
