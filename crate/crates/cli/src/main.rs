use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use langdet::bank::load_frozen;
use langdet::detector::Ablation;
use langdet::harness::{
    eval_by_variation, make_data, plot_bank, plot_bank_training, run_ablation, run_gradcheck, run_training, RunConfig,
};

#[derive(Parser)]
#[command(name = "langdet", version, about = "Language-guided aerial detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `reasoner=on|off,relation=on|off`
    #[arg(long)]
    ablation: Option<Ablation>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if let Some(a) = self.ablation {
            config.ablation = a;
        }
        config.validate()?;
        let out = config.out.clone();
        Ok((config, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes metrics.csv, checkpoints and summary.json.
    Train(Common),
    /// Train the four reasoner/relation combinations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Per-subset AP of a trained run directory.
    EvalByVariation {
        #[arg(long)]
        run: PathBuf,
        /// Split manifest; the run's own eval split is regenerated when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck,
    /// PCA scatter of a bank file, or of the extended bank before and after prompt training.
    PlotBank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Write the train and eval splits as PPM images plus manifests.
    MakeData(Common),
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let (config, out) = common.resolve()?;
            let outcome = run_training(&config, &out)?;
            let s = &outcome.summary;
            println!(
                "{}: AP {} -> {} ({} epochs, {} parameters)",
                s.ablation,
                langdet::harness::fmt_opt(s.initial_ap, 2),
                langdet::harness::fmt_opt(s.final_ap, 2),
                s.epochs,
                s.parameter_count
            );
            Ok(true)
        }
        Command::Ablate { common, seeds } => {
            let (config, out) = common.resolve()?;
            let table = run_ablation(&config, &seeds, &out)?;
            print!("{}", table.to_markdown());
            let mut ok = true;
            for (name, passed) in table.directional_checks() {
                println!("{} {name}", if passed { "PASS" } else { "FAIL" });
                ok &= passed;
            }
            Ok(ok)
        }
        Command::EvalByVariation { run, manifest, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let report = eval_by_variation(&run, manifest.as_deref(), &out)?;
            print!("{}", report.to_csv());
            Ok(true)
        }
        Command::Gradcheck => {
            let entries = run_gradcheck()?;
            for e in &entries {
                println!("{}", e.line());
            }
            Ok(entries.iter().all(|e| e.passed))
        }
        Command::PlotBank { common, bank } => {
            let (config, out) = common.resolve()?;
            match bank {
                Some(path) => {
                    let bank = load_frozen(&path)?;
                    let stem = out.join(path.file_stem().unwrap_or_default());
                    let coords = plot_bank(&bank, &stem, "representation bank")?;
                    println!("wrote {} points to {}.svg", coords.len(), stem.display());
                }
                None => {
                    let (pre, _) = plot_bank_training(&config, &out)?;
                    println!("wrote {} points to {}/bank_pre.svg and bank_post.svg", pre.len(), out.display());
                }
            }
            Ok(true)
        }
        Command::MakeData(common) => {
            let (config, out) = common.resolve()?;
            let (train, eval) = make_data(&config, &out)?;
            println!("wrote {} train and {} eval samples to {}", train.samples.len(), eval.samples.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
