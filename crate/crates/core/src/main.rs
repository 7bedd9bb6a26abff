use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use psrnn::cli::{self, load_config, load_data, load_hmm};
use psrnn::config::RunConfig;
use psrnn::modelfile;
use psrnn::par::Exec;
use psrnn::{PsrnnError, Result};

#[derive(Parser)]
#[command(name = "psrnn", version, about = "Predictive state recurrent neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run every data-parallel loop on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage regression (or random) initialization.
    Init {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        random_init: bool,
        /// HMM spec JSON to compare against the exact filter.
        #[arg(long)]
        hmm: Option<PathBuf>,
    },
    /// BPTT refinement; writes the model and a learning-curve CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the output path with a `.curves.csv` extension.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Also refine a random initialization and emit its curves.
        #[arg(long)]
        random_init: bool,
    },
    /// CP-factorize every layer; one output file per rank.
    Factorize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ranks; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        rank: Vec<usize>,
    },
    /// Metrics JSON for a model on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        hmm: Option<PathBuf>,
    },
    /// Sample a random HMM corpus into a directory.
    SynthHmm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the BPTT gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PsrnnError::io(path, e))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn rank_path(out: &Path, rank: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = out
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.r{rank}{ext}"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Init {
            common,
            data,
            out,
            layers,
            random_init,
            hmm,
        } => {
            let mut cfg = common.load()?;
            if let Some(l) = layers {
                cfg.model.layers = l;
            }
            cfg.model.random_init |= random_init;
            cfg.validate()?;
            let hmm = hmm.as_deref().map(load_hmm).transpose()?;
            let data = load_data(&data, &cfg)?;
            let (model, report) = cli::cmd_init(&cfg, &data, hmm.as_ref(), common.exec())?;
            modelfile::save(&model, &out)?;
            print_json(&report)?;
        }
        Command::Train {
            common,
            data,
            model,
            out,
            curves,
            random_init,
        } => {
            let cfg = common.load()?;
            let data = load_data(&data, &cfg)?;
            let model = modelfile::load(&model)?;
            let res = cli::cmd_train(&cfg, &model, &data, random_init, common.exec())?;
            modelfile::save(&res.model, &out)?;
            write(
                &curves.unwrap_or_else(|| out.with_extension("curves.csv")),
                res.curves_csv(),
            )?;
            print_json(&res.report)?;
        }
        Command::Factorize {
            common,
            data,
            model,
            out,
            rank,
        } => {
            let cfg = common.load()?;
            let ranks = if rank.is_empty() {
                cfg.factorize.ranks.clone()
            } else {
                rank
            };
            if ranks.is_empty() || ranks.contains(&0) {
                return Err(PsrnnError::Config("ranks must be positive".into()));
            }
            let data = load_data(&data, &cfg)?;
            let model = modelfile::load(&model)?;
            let mut reports = Vec::new();
            for &r in &ranks {
                let (f, rep) = cli::cmd_factorize(&cfg, &model, &data, r, common.exec())?;
                let path = if ranks.len() == 1 {
                    out.clone()
                } else {
                    rank_path(&out, r)
                };
                modelfile::save(&f, &path)?;
                reports.push(rep);
            }
            print_json(&reports)?;
        }
        Command::Eval {
            common,
            data,
            model,
            hmm,
        } => {
            let cfg = common.load()?;
            let hmm = hmm.as_deref().map(load_hmm).transpose()?;
            let data = load_data(&data, &cfg)?;
            let model = modelfile::load(&model)?;
            print_json(&cli::cmd_eval(&model, &data, hmm.as_ref(), common.exec())?)?;
        }
        Command::SynthHmm { common, out } => {
            let cfg = common.load()?;
            let (data, hmm) = cli::cmd_synth(&cfg)?;
            fs::create_dir_all(&out).map_err(|e| PsrnnError::io(&out, e))?;
            write(&out.join("corpus.json"), data.to_json()?)?;
            write(&out.join("hmm.json"), serde_json::to_string_pretty(&hmm)?)?;
        }
        Command::Gradcheck { common, model } => {
            let cfg = common.load()?;
            let model = modelfile::load(&model)?;
            let rep = cli::cmd_gradcheck(&model, cfg.seed)?;
            print_json(&rep)?;
            if !rep.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Config { common } => {
            println!("{}", common.load()?.to_json_pretty()?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
