use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpm_cli::experiments::{self as ex, Method, TermMethod};
use dpm_cli::{resolve, CliResult};

#[derive(Parser)]
#[command(name = "dpm", version, about = "Popularity solver, MIS estimators and NUCLR training benches")]
struct Cli {
    /// JSON file whose keys override the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample paired data from the 2-D world.
    GenData(ex::GenDataArgs),
    /// Fit popularity weights on a dataset.
    SolvePopularity(ex::SolveArgs),
    /// Generalization error of GCL, exact MLE and the fitted popularity.
    GenErrorSweep(ex::SweepArgs),
    /// Approximation error term of several popularity choices.
    ErrorTermSweep(ex::SweepArgs),
    /// Variance of the partition-function estimators.
    VarianceStudy(ex::VarianceArgs),
    /// Train a linear-cosine model with NUCLR.
    TrainNuclr(ex::TrainArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => {
            let a = resolve(a, cfg)?;
            let s = ex::gen_data(&a)?;
            println!("wrote {} pairs to {}", s.len(), a.output_dir.display());
        }
        Command::SolvePopularity(a) => {
            let a = resolve(a, cfg)?;
            let (_, r) = ex::solve(&a)?;
            println!(
                "n={} iterations={} grad_norm={:.3e} residual={:.3e}",
                r.n, r.iterations, r.grad_norm, r.fixed_point_residual
            );
            if let Some(p) = r.pearson_vs_true {
                println!("pearson vs true popularity: {p:.4}");
            }
        }
        Command::GenErrorSweep(a) => {
            let a = resolve(a, cfg)?;
            let rows = ex::gen_error_sweep(&a)?;
            let means = ex::means_by(&rows, |r| (r.method, r.n), |r| r.abs_gen_error);
            println!("{:>6} {:>12} {:>12} {:>12}", "n", "gcl", "mle_exact", "ours");
            for &n in &a.n_list {
                let m = |k| means[&(k, n)];
                println!("{n:>6} {:>12.5} {:>12.5} {:>12.5}", m(Method::Gcl), m(Method::MleExact), m(Method::Ours));
            }
            flag_unconverged(rows.iter().filter(|r| !r.converged).count())?;
        }
        Command::ErrorTermSweep(a) => {
            let a = resolve(a, cfg)?;
            let rows = ex::error_term_sweep(&a)?;
            println!("{:>6} {:>12} {:>12} {:>12}", "n", "exact", "ours", "uniform");
            for &n in &a.n_list {
                let mean = |k: TermMethod| {
                    let v: Vec<f64> = rows.iter().filter(|r| r.n == n && r.method == k).map(|r| r.error_term).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                println!(
                    "{n:>6} {:>12.3e} {:>12.5} {:>12.5}",
                    mean(TermMethod::Exact),
                    mean(TermMethod::Ours),
                    mean(TermMethod::Uniform)
                );
            }
            flag_unconverged(rows.iter().filter(|r| !r.converged).count())?;
        }
        Command::VarianceStudy(a) => {
            let a = resolve(a, cfg)?;
            for r in ex::variance_study(&a)? {
                println!(
                    "{:>10} n={:<4} m={:<4} mean={:.5} var={:.3e} exact={:.5}",
                    r.scheme.label(),
                    r.n,
                    r.m,
                    r.mean,
                    r.variance,
                    r.exact
                );
            }
        }
        Command::TrainNuclr(a) => {
            let a = resolve(a, cfg)?;
            let rep = ex::train_nuclr(&a)?;
            if let Some(m) = rep.metrics.last() {
                println!(
                    "epoch {} phi={:.5} psi={:.5} recall@1={:.4} (chance {:.4})",
                    m.epoch,
                    m.phi_full,
                    m.psi_full,
                    m.recall_at_1,
                    1.0 / rep.n_eval.max(1) as f64
                );
            }
        }
    }
    Ok(())
}

fn flag_unconverged(count: usize) -> CliResult<()> {
    if count > 0 {
        return Err(dpm_cli::CliError::NonConvergence(format!("{count} rows flagged converged=false")));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
