use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mira_cli::config::ExperimentConfig;
use mira_cli::experiment;
use mira_cli::verify::{self, GradCheckOptions, OracleOptions};
use mira_cli::CliError;
use mira_core::graph::{check_weights, parse_matrix_text, TaskGraph};

#[derive(Debug, Parser)]
#[command(
    name = "mira",
    version,
    about = "Federated multi-task LoRA fine-tuning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured strategy and write reports.
    Run {
        config: PathBuf,
        /// Override `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the backward pass.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Flip the sign of grad_A to confirm the check can fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Aggregation and Laplacian property suite against dense oracles.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run contraction trials at this multiple of the safe step bound.
        #[arg(long)]
        step_factor: Option<f64>,
    },
    /// Check a weight-matrix file against the graph invariants.
    ValidateGraph { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MIRA_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => run(config, out),
        Command::GradCheck {
            seeds,
            inject_fault,
        } => {
            let report = verify::grad_check(&GradCheckOptions {
                seeds,
                inject_fault,
            });
            println!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                let w = report.worst().expect("four combos");
                eprintln!(
                    "gradient check failed: {}/{} layer {} seed {} rel err {:.3e}",
                    w.activation, w.head, w.worst_layer, w.worst_seed, w.max_rel_err
                );
                ExitCode::from(1)
            }
        }
        Command::OracleCheck { seed, step_factor } => {
            let report = verify::oracle_check(&OracleOptions {
                seed,
                contraction_step_factor: step_factor,
            });
            print!("{report}");
            match report.first_failure() {
                None => ExitCode::SUCCESS,
                Some(p) => {
                    eprintln!("oracle check failed: {}", p.name);
                    ExitCode::from(1)
                }
            }
        }
        Command::ValidateGraph { path } => validate_graph(path),
    }
}

fn run(config: PathBuf, out: Option<PathBuf>) -> ExitCode {
    let result = ExperimentConfig::load(&config, std::env::vars()).and_then(|mut cfg| {
        if let Some(dir) = out {
            cfg.output.dir = dir;
        }
        experiment::run_experiment(&cfg).map(|s| (cfg, s))
    });
    match result {
        Ok((cfg, summary)) => {
            for s in &summary.strategies {
                println!(
                    "{:<10} final mean test {:.6}  train {:.6}  J {:.6}",
                    s.name, s.final_mean_test_loss, s.final_mean_train_loss, s.final_j
                );
            }
            println!("reports written to {}", cfg.output.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}

fn validate_graph(path: PathBuf) -> ExitCode {
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return fail(&CliError::Io(format!("{}: {e}", path.display()))),
    };
    let rows = match parse_matrix_text(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let problems = check_weights(&rows);
    if !problems.is_empty() {
        for p in &problems {
            println!("FAIL {p}");
        }
        return ExitCode::from(1);
    }
    let graph = TaskGraph::new(&rows).expect("checked above");
    println!(
        "ok   {} clients, symmetric, nonnegative, zero diagonal",
        graph.num_clients()
    );
    println!("     max degree {}", graph.max_degree());
    match graph.safe_step_bound() {
        Ok(b) => println!("     safe step bound eta*lambda <= {b}"),
        Err(e) => println!("warn {e}"),
    }
    let comps = graph.connected_components();
    if comps > 1 {
        println!("warn graph is disconnected: {comps} components");
    }
    let isolated = graph.isolated_clients();
    if !isolated.is_empty() {
        println!("warn isolated clients: {isolated:?}");
    }
    ExitCode::SUCCESS
}
