//! `bnspike` command-line front end: simulate, verify, plot, sweep,
//! gen-data and constants over TOML run configs.
//!
//! Exit status: 0 on success, 1 when a verification scoreboard has a failing
//! clause, 2 on usage, config or runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bnspike::config::{OutputFormat, Overrides, RunConfig};
use bnspike::dynamics::Mode;
use bnspike::harness::{
    constants_report, gen_data, simulate, sweep, threads_from_env, verify_config, verify_rows,
    write_simulation,
};
use bnspike::io::load_trajectory;
use bnspike::model::LossKind;
use bnspike::plot::{render, PlotOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bnspike",
    version,
    about = "Loss-spike dynamics of a batch-normalised linear model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json.
    #[arg(long)]
    format: Option<OutputFormat>,
    /// square or logistic.
    #[arg(long)]
    loss: Option<LossKind>,
    /// vector or recurrence.
    #[arg(long)]
    mode: Option<Mode>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            format: self.format,
            loss: self.loss,
            mode: self.mode,
        })?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory and write it with a spike summary.
    Simulate(Common),
    /// Run (or replay) a trajectory and check every applicable clause.
    Verify {
        /// Replay a stored trajectory instead of simulating.
        #[arg(long, conflicts_with = "config")]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        format: Option<OutputFormat>,
        /// Loss of the run; for replays defaults to square.
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Render the three-panel SVG for a stored trajectory.
    Plot {
        #[arg(long)]
        trajectory: PathBuf,
        /// Output directory; defaults to the trajectory's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log_risk: bool,
    },
    /// Run every cell of the config's grid.
    Sweep(Common),
    /// Write the configured dataset.
    GenData(Common),
    /// Print spectrum, reference and theorem constants as JSON.
    Constants(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Ok(false) means a scoreboard failed.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Simulate(c) => {
            let cfg = c.load()?;
            let sim = simulate(&cfg)?;
            let path = write_simulation(&sim, &cfg.output.dir, cfg.output.format)?;
            let ev = sim.trajectory.events;
            println!(
                "wrote {} ({} records); t1 {} t2 {} spike_ratio {:.6}",
                path.display(),
                sim.rows.len(),
                opt(ev.t1),
                opt(ev.t2),
                sim.summary.spike_ratio
            );
            Ok(true)
        }
        Command::Verify {
            trajectory,
            config,
            seed,
            out,
            format,
            loss,
            mode,
        } => match (trajectory, config) {
            (Some(path), None) => {
                let rows = load_trajectory(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let board = verify_rows(&rows, loss.unwrap_or(LossKind::Square), None)?;
                print!("{}", board.table());
                if let Some(dir) = out {
                    write(&dir.join("scoreboard.json"), board.to_json().as_bytes())?;
                }
                Ok(!board.failed())
            }
            (None, Some(config)) => {
                let cfg = Common {
                    config,
                    seed,
                    out,
                    format,
                    loss,
                    mode,
                }
                .load()?;
                let (sim, board) = verify_config(&cfg)?;
                write_simulation(&sim, &cfg.output.dir, cfg.output.format)?;
                write(
                    &cfg.output.dir.join("scoreboard.json"),
                    board.to_json().as_bytes(),
                )?;
                print!("{}", board.table());
                Ok(!board.failed())
            }
            _ => bail!("verify needs exactly one of --config or --trajectory"),
        },
        Command::Plot {
            trajectory,
            out,
            log_risk,
        } => {
            let rows = load_trajectory(&trajectory)
                .with_context(|| format!("reading {}", trajectory.display()))?;
            let plot = render(
                &rows,
                &PlotOptions {
                    log_risk,
                    edge_tol: 0.0,
                },
            )?;
            let dir = out.unwrap_or_else(|| {
                trajectory
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_default()
            });
            write(&dir.join("plot.svg"), plot.svg.as_bytes())?;
            write(&dir.join("plot_data.csv"), plot.data_csv.as_bytes())?;
            println!(
                "wrote {} ({} rising spans)",
                dir.join("plot.svg").display(),
                plot.rising_spans.len()
            );
            Ok(true)
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let summary = sweep(&cfg, &cfg.output.dir, threads_from_env()?)?;
            println!(
                "{} cells, {} errors, {} with failing clauses; summary in {}",
                summary.cell_count,
                summary.errors,
                summary.failed_cells,
                cfg.output.dir.join("sweep_summary.json").display()
            );
            for (id, t) in &summary.clauses {
                println!(
                    "{id:<32} holds {:>5}  fails {:>5}  n/a {:>5}",
                    t.holds, t.fails, t.not_applicable
                );
            }
            Ok(true)
        }
        Command::GenData(c) => {
            let cfg = c.load()?;
            let path = gen_data(&cfg, &cfg.output.dir)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Constants(c) => {
            let cfg = c.load()?;
            println!(
                "{}",
                serde_json::to_string_pretty(&constants_report(&cfg)?)?
            );
            Ok(true)
        }
    }
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
