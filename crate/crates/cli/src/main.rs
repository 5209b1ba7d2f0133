use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tact::harness::{self, Grid, RunConfig};
use tact::theory::{verify_implications, MRule};
use tact::{Domain, Model, Prng, ScmConfig};

#[derive(Parser)]
#[command(name = "tact", version, about = "Causal-trimming test-time adaptation on a synthetic benchmark")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Export samples from the structural causal model as JSONL.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Omit the latent causal and non-causal factors.
        #[arg(long)]
        no_hidden: bool,
        #[arg(long, value_enum, default_value = "test")]
        domain: DomainArg,
        /// Defaults to `test_size` (or `train.train_size` for the train domain).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the ERM model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream the test set through the configured mode.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to adapt; trained from the config when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a grid over (n, m, batch_size) and seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run the four ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Monte Carlo check of the trimming propositions.
    Verify {
        #[arg(long)]
        props: bool,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Representation dimension; a range `lo..hi` (inclusive) is also accepted.
        #[arg(long, default_value = "8")]
        d: String,
        /// Number of trimmed directions; uniform over 1..d when omitted.
        #[arg(long)]
        m: Option<usize>,
    },
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = match RunConfig::from_json(&text) {
        Ok(cfg) => cfg,
        Err(run_err) => match serde_json::from_str::<ScmConfig>(&text) {
            Ok(scm) => RunConfig { scm, ..RunConfig::reference() },
            Err(_) => return Err(run_err).with_context(|| format!("parsing {}", path.display())),
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn parse_d(s: &str) -> Result<(usize, usize)> {
    let range = match s.split_once("..") {
        Some((lo, hi)) => (lo.trim().parse()?, hi.trim().parse()?),
        None => {
            let d = s.trim().parse()?;
            (d, d)
        }
    };
    anyhow::ensure!(range.0 >= 2 && range.0 <= range.1, "invalid --d {s}");
    Ok(range)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, out, no_hidden, domain, count } => {
            let cfg = read_config(&config, cli.seed)?;
            let (domain, default_count) = match domain {
                DomainArg::Train => (Domain::Train, cfg.train.train_size),
                DomainArg::Test => (Domain::Test, cfg.test_size),
            };
            let samples = harness::generate(&cfg, domain, count.unwrap_or(default_count))?;
            write(&out, &harness::samples_jsonl(&samples, !no_hidden)?)?;
        }
        Command::Train { config, out } => {
            let cfg = read_config(&config, cli.seed)?;
            let scm = cfg.validate()?;
            let model = harness::train_model(&cfg, &scm)?;
            write(&out, &model.to_json()?)?;
        }
        Command::Adapt { config, model, report, trace } => {
            let cfg = read_config(&config, cli.seed)?;
            let rep = match model {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    harness::run_with_model(&cfg, &Model::from_json(&text)?)?
                }
                None => harness::run_adaptation(&cfg)?,
            };
            write(&report, &serde_json::to_string_pretty(&rep)?)?;
            if let Some(t) = trace {
                write(&t, &rep.trace_jsonl()?)?;
            }
            eprintln!(
                "accuracy {:.4}  macro_f1 {:.4}  worst_group {:.4}",
                rep.metrics.accuracy, rep.metrics.macro_f1, rep.metrics.worst_group_accuracy
            );
        }
        Command::Sweep { config, grid, out, seeds } => {
            let cfg = read_config(&config, cli.seed)?;
            let text = fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid: Grid = serde_json::from_str(&text).with_context(|| format!("parsing {}", grid.display()))?;
            let table = harness::sweep(&grid, &cfg, &seeds)?;
            write(&out, &table.to_csv())?;
        }
        Command::Ablate { config, out, seeds } => {
            let cfg = read_config(&config, cli.seed)?;
            let table = harness::ablate(&cfg, &seeds)?;
            write(&out, &table.to_csv())?;
        }
        Command::Verify { props, count, out, d, m } => {
            anyhow::ensure!(props, "verify currently supports only --props");
            let d_range = parse_d(&d)?;
            let rule = m.map_or(MRule::Uniform, MRule::Fixed);
            let mut rng = Prng::new(cli.seed.unwrap_or(0));
            let summary = verify_implications(count, d_range, rule, &mut rng)?;
            let json = serde_json::to_string_pretty(&summary)?;
            match out {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
            let violations = summary.total_violations();
            if violations > 0 {
                eprintln!("{violations} violation(s)");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
