use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use condmeta::environments::write_csv_env;
use condmeta::harness::{emit_outputs, environment_tasks, final_error, run_experiment, MethodKind};
use condmeta::oracle::{cluster_gap_lower_bound, cluster_gap_monte_carlo, cluster_unconditional_variance, gap_report};
use condmeta::{Error, ExperimentConfig, FeatureMap, Result};

#[derive(Parser)]
#[command(name = "condmeta", version, about = "Conditional meta-learning of biased regularization and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the validation protocol and write learning curves.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print oracle diagnostics for a synthetic environment.
    Gap {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic environment to CSV.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config file and print its normalized form.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, output_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.run.output_dir = dir;
            }
            condmeta::harness::output::prepare_output_dir(&cfg.run.output_dir)?;
            let result = run_experiment(&cfg)?;
            let paths = emit_outputs(&cfg, &result, &cfg.run.output_dir)?;
            let mut out = std::io::stdout().lock();
            for m in &cfg.methods {
                if let Some(e) = final_error(&result.curves, &m.name) {
                    let _ = writeln!(out, "{:<20} final test error {e:.6}", m.name);
                }
            }
            for w in &result.warnings {
                let _ = writeln!(out, "warning: {w}");
            }
            for p in paths {
                let _ = writeln!(out, "wrote {}", p.display());
            }
            Ok(())
        }
        Command::Gap { config } => gap(&ExperimentConfig::load(&config)?),
        Command::Gen { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            if !cfg.environment.is_synthetic() {
                return Err(Error::Config("gen needs a synthetic environment".into()));
            }
            let seed = seed.unwrap_or(cfg.run.seeds[0]);
            let tasks = environment_tasks(&cfg.environment, seed)?;
            let file = std::fs::File::create(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            write_csv_env(std::io::BufWriter::new(file), &tasks)?;
            println!("wrote {} tasks to {}", tasks.len(), out.display());
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn gap(cfg: &ExperimentConfig) -> Result<()> {
    if !cfg.environment.is_synthetic() {
        return Err(Error::Config("gap needs a synthetic environment with known targets".into()));
    }
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "seed,feature,tasks,var_itl,var_uncond,var_best_linear,gap_uncond_vs_linear,gap_uncond_vs_linear_se"
    );
    for &seed in &cfg.run.seeds {
        let tasks = environment_tasks(&cfg.environment, seed)?;
        let d = tasks[0].d();
        let side_dim = match tasks[0].side() {
            condmeta::SideInfo::Scalar(_) => 1,
            _ => d,
        };
        let mut maps = vec![FeatureMap::zero()];
        for m in cfg.methods.iter().filter(|m| m.kind == MethodKind::Conditional) {
            maps.push(m.feature_map(d, side_dim, seed)?);
        }
        for map in &maps {
            let r = gap_report(&tasks, map)?;
            let _ = writeln!(
                out,
                "{seed},{},{},{},{},{},{},{}",
                r.feature, r.tasks, r.var_itl, r.var_uncond, r.var_best_linear, r.gap_uncond_vs_linear, r.gap_uncond_vs_linear_se
            );
        }
        if let Some(spec) = cfg.environment.cluster_spec(seed)? {
            let mc = cluster_gap_monte_carlo(&spec, &tasks)?;
            let _ = writeln!(
                out,
                "# seed {seed}: closed-form Var(w_rho)^2 = {}, gap lower bound (n = {}) = {}, posterior-mean gap = {} +- {}",
                cluster_unconditional_variance(&spec)?,
                spec.n_tot,
                cluster_gap_lower_bound(&spec, spec.n_tot),
                mc.mean,
                mc.std_error
            );
        }
    }
    Ok(())
}
