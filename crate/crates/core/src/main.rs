use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use popusense::checkpoint::load_checkpoint;
use popusense::config::RunConfig;
use popusense::evalkit::{self, merge_reports, read_report, render_table, write_report};
use popusense::synthdata::{self, Label};
use popusense::{train, Error, Result};

/// Synthetic anomaly benchmark: data generation, training, evaluation and reporting.
///
/// Exit codes: 0 success, 1 I/O or data error, 2 configuration error, 3 training diverged.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the [data] section.
    GenData {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and write its checkpoint.
    Train {
        /// Run configuration (TOML). POPUSENSE_SEED_OVERRIDE replaces train.seed.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch statistics CSV [default: <out>.stats.csv].
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Score the test split with a checkpoint and write a JSON report.
    Eval {
        /// Checkpoint written by train.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge JSON reports into the configuration x anomaly-type table.
    Report {
        /// One or more JSON reports written by eval.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Text table path.
        #[arg(long)]
        out: PathBuf,
        /// Merged JSON report [default: <out> with a .json extension].
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a configuration file with every key at its default.
    DefaultConfig,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env_override()?;
    cfg.validate()?;
    Ok(cfg)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let manifest = synthdata::build_dataset(&cfg.data, &out)?;
            let count = |split: synthdata::Split, label: Label| {
                manifest.iter().filter(|r| r.split == split && r.label == label).count()
            };
            println!(
                "{}: {} images (train {}, val {}, test {} normal + {} anomalous), config {}",
                out.display(),
                manifest.len(),
                count(synthdata::Split::Train, Label::Normal),
                count(synthdata::Split::Val, Label::Normal),
                count(synthdata::Split::Test, Label::Normal),
                count(synthdata::Split::Test, Label::Anomalous),
                cfg.config_hash()
            );
        }
        Command::Train { config, data, out, stats } => {
            let cfg = load_config(&config)?;
            let st = train::fit(&cfg, &data, &out)?;
            let stats_path = stats.unwrap_or_else(|| with_extension(&out, ".stats.csv"));
            write(&stats_path, &st.to_csv())?;
            match (st.initial_val_loss, st.val_loss.last()) {
                (Some(a), Some(b)) => println!("{}: val loss {a:.6} -> {b:.6}", out.display()),
                _ => println!("{}: initialization only", out.display()),
            }
        }
        Command::Eval { ckpt, data, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let report = evalkit::evaluate_checkpoint(&ck, &data)?;
            write_report(&out, &report)?;
            print!("{}", render_table(&report));
        }
        Command::Report { inputs, out, json } => {
            let reports = inputs.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
            let merged = merge_reports(&reports)?;
            let table = render_table(&merged);
            write(&out, &table)?;
            write_report(&json.unwrap_or_else(|| out.with_extension("json")), &merged)?;
            print!("{table}");
        }
        Command::DefaultConfig => print!("{}", RunConfig::default_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
