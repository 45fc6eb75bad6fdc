use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use photon_server::Format;
use photon_server_cli::{commands, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "spserver", version, about = "Simulate and qualify a single-atom single-photon server")]
struct Cli {
    /// TOML config with dotted keys (`sim.p_gen = 0.09`); defaults if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; run i uses seed + i.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of runs to simulate.
    #[arg(long, global = true)]
    runs: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stream format written by `simulate`: ptag or csv.
    #[arg(long, global = true, value_parser = parse_format)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate runs into stream, truth and manifest files.
    Simulate,
    /// Correlate streams: per-run and merged histograms and visibility.
    Analyze {
        /// Stream files or directories.
        #[arg(required = true)]
        streams: Vec<PathBuf>,
    },
    /// Replay streams through the qualification machine.
    Qualify {
        #[arg(required = true)]
        streams: Vec<PathBuf>,
    },
    /// Solve one trigger pulse of the cavity model.
    Qed {
        /// Fit the coupling scale to this emission probability.
        #[arg(long)]
        fit: Option<f64>,
    },
    /// Aggregate manifests into report.json.
    Report {
        /// Manifest files or directories containing manifest.json.
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse()
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = cli.runs {
        cfg.n_runs = runs;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(format) = cli.format {
        cfg.format = format;
    }
    if let Command::Qed { fit: Some(target) } = cli.command {
        cfg.solver.fit_target = Some(target);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Simulate => {
            let m = commands::simulate(&cfg)?;
            println!("simulated {} runs, {} clicks -> {}", m.runs.len(), m.n_clicks, cfg.out.display());
        }
        Command::Analyze { streams } => {
            let m = commands::analyze(&cfg, streams)?;
            match m.summary.visibility {
                Some(v) => {
                    println!("{} runs, merged visibility {:.4} ± {:.4}", m.summary.n_runs, v.visibility, v.stderr)
                }
                None => println!("{} runs, merged visibility undefined", m.summary.n_runs),
            }
        }
        Command::Qualify { streams } => {
            let s = commands::qualify(&cfg, streams)?.summary;
            println!(
                "{} runs, {} reached qualifying, {} passed the selection rule, {} served {:.1} s",
                s.n_runs, s.reached_qualifying, s.selection_passed, s.qualified, s.serving_s_total
            );
            if let Some(v) = s.visibility {
                println!("qualified visibility {:.4} ± {:.4}", v.visibility, v.stderr);
            }
        }
        Command::Qed { .. } => {
            let m = commands::qed(&cfg)?;
            println!("emission probability {:.6}, trace drift {:.2e}", m.emission_probability, m.max_trace_drift);
            if let Some(fit) = m.fit {
                println!("coupling scale {:.6} gives {:.6}", fit.coupling_scale, fit.emission_probability);
            }
        }
        Command::Report { manifests } => {
            let r = commands::report(manifests, &cfg.out)?;
            println!("report over {} manifests -> {}", r.sources.len(), cfg.out.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spserver: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
