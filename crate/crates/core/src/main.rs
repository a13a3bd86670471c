use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plume::config::ExperimentConfig;
use plume::pipeline;
use plume::train::CHECKPOINT_FILE;

#[derive(Parser)]
#[command(name = "plume", version, about = "Emission field reconstruction and source attribution from sparse sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Train with the Gaussian negative log-likelihood.
    #[arg(long, overrides_with = "no_nll")]
    nll: bool,
    /// Train with plain squared error instead.
    #[arg(long = "no-nll", overrides_with = "nll")]
    no_nll: bool,
    /// Checkpoint to resume from or evaluate (defaults to `<out>/checkpoint.json`).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario dataset.
    Generate(Common),
    /// Train a model on the training split.
    Train(Common),
    /// Evaluate a checkpoint on the held-out split.
    Eval(Common),
    /// Evaluate over a range of sensor counts.
    SweepSensors(Common),
    /// Evaluate binned by number of sources.
    SweepSources(Common),
    /// Render figures for one scenario.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Scenario index.
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        /// Second checkpoint for the absolute-error comparison.
        #[arg(long, value_name = "PATH")]
        compare: Option<PathBuf>,
        /// Grid row(s) for slice plots, overriding the configuration.
        #[arg(long = "slice-row")]
        slice_rows: Vec<usize>,
    },
}

impl Common {
    fn resolve(&self) -> plume::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.nll {
            cfg.loss.nll = true;
        } else if self.no_nll {
            cfg.loss.nll = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }
}

fn run(cli: Cli) -> plume::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.resolve()?;
            let stats = pipeline::cmd_generate(&cfg, &c.out)?;
            println!("generated {} scenarios ({} already present)", stats.written, stats.skipped);
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let ckpt = pipeline::cmd_train(&cfg, &c.out, c.checkpoint.as_deref())?;
            if let Some(last) = ckpt.history.last() {
                println!("trained {} epochs, final loss {:.5}", ckpt.epoch, last.loss);
            }
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let r = pipeline::cmd_eval(&cfg, &c.out, &c.checkpoint())?;
            println!(
                "rmse {:.4}  precision {:.3}  recall {:.3}  rel-loc mse {}  source-mag mse {}  pi coverage {:.3}",
                r.recon_rmse,
                r.precision,
                r.recall,
                fmt_opt(r.rel_loc_mse),
                fmt_opt(r.source_mag_mse),
                r.pi_coverage_95
            );
        }
        Command::SweepSensors(c) => {
            let cfg = c.resolve()?;
            print_sweep(&pipeline::cmd_sweep_sensors(&cfg, &c.out, &c.checkpoint())?);
        }
        Command::SweepSources(c) => {
            let cfg = c.resolve()?;
            print_sweep(&pipeline::cmd_sweep_sources(&cfg, &c.out, &c.checkpoint())?);
        }
        Command::Plot {
            common,
            scenario,
            compare,
            slice_rows,
        } => {
            let mut cfg = common.resolve()?;
            if !slice_rows.is_empty() {
                cfg.plot.slice_rows = slice_rows;
            }
            for path in pipeline::cmd_plot(&cfg, &common.out, &common.checkpoint(), scenario, compare.as_deref())? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4e}"))
}

fn print_sweep(s: &pipeline::SweepResult) {
    for (v, r) in s.values.iter().zip(&s.reports) {
        match r {
            Some(r) => println!(
                "{} {v:>4}: rmse {:.4}  precision {:.3}  recall {:.3}  source-mag mse {}",
                s.axis,
                r.recon_rmse,
                r.precision,
                r.recall,
                fmt_opt(r.source_mag_mse)
            ),
            None => println!("{} {v:>4}: no scenarios", s.axis),
        }
    }
    if let Some(t) = s.rmse_trend {
        println!("rmse spearman rho {:.3} (p = {:.3})", t.rho, t.p_value);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
