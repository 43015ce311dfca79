use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hjbfem::control::{select_lambda, SampleGrid};
use hjbfem::effective::{solve_effective, solve_eps_problem, EffectiveSolution};
use hjbfem::experiments::{
    json_lines, mode_name, run_exp1_h, run_exp1_sigma, run_exp2, sidecar, with_suffix, write_file,
    write_record, ExperimentConfig, ExperimentKind, CSV_COLUMNS,
};
use hjbfem::homogenization::{solve_cell, ExactHamiltonian};
use hjbfem::{Error, Result};

/// Periodic HJB cell problems, effective Hamiltonians and two-scale solves.
///
/// Every command accepts a flat `key = value` config file and `--set`
/// overrides; it writes `<output>.csv` and a `<output>.json` sidecar with the
/// resolved configuration. The exit status is 0 iff every solve converged;
/// otherwise a JSON failure list goes to stderr (status 2). Errors give
/// status 1.
#[derive(Parser)]
#[command(version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the Cordes condition on a sample grid (`samples` per axis).
    CheckCordes(Common),
    /// Solve one cell problem (`n`, `sigma`, `r`, `p`, `s`).
    CellSolve(Common),
    /// Closed-form effective Hamiltonian of a benchmark family at `r`.
    Hbar(Common),
    /// Relative H error against the cell mesh size (`ns`, `sigma`).
    #[command(after_help = CSV_COLUMNS)]
    ConvergenceH(Common),
    /// Relative H error against `sigma` (`sigmas`, `n`).
    #[command(after_help = CSV_COLUMNS)]
    ConvergenceSigma(Common),
    /// Two-scale least-squares solve (`omega_n`, `cell_n`, `sigma`, `modes`).
    EffectiveSolve(Common),
    /// Least-squares solve of the oscillatory problem (`eps`, `omega_n`).
    EpsSolve(Common),
    /// Effective solves against an oscillatory reference (`omega_ns`,
    /// `reference_n`, `eps`, `modes`).
    #[command(after_help = CSV_COLUMNS)]
    Exp2(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set ns=4,8,16`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output path prefix (default: the experiment name).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Worker threads (0: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let text = self
            .config
            .as_ref()
            .map(std::fs::read_to_string)
            .transpose()?;
        let mut sets: Vec<String> = self.overrides.clone();
        if let Some(o) = &self.output {
            sets.push(format!("output={}", o.display()));
        }
        if let Some(t) = self.threads {
            sets.push(format!("threads={t}"));
        }
        ExperimentConfig::resolve(kind, text.as_deref(), sets.iter().map(String::as_str))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(failures) if failures.is_empty() => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{}", json!({ "failures": failures }));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<Vec<String>> {
    let (kind, common) = match &command {
        Command::CheckCordes(c) => (ExperimentKind::CheckCordes, c),
        Command::CellSolve(c) => (ExperimentKind::CellSolve, c),
        Command::Hbar(c) => (ExperimentKind::Hbar, c),
        Command::ConvergenceH(c) => (ExperimentKind::Exp1H, c),
        Command::ConvergenceSigma(c) => (ExperimentKind::Exp1Sigma, c),
        Command::EffectiveSolve(c) => (ExperimentKind::EffectiveSolve, c),
        Command::EpsSolve(c) => (ExperimentKind::EpsSolve, c),
        Command::Exp2(c) => (ExperimentKind::Exp2, c),
    };
    let cfg = common.resolve(kind)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match kind {
        ExperimentKind::CheckCordes => check_cordes(&cfg),
        ExperimentKind::CellSolve => cell_solve(&cfg),
        ExperimentKind::Hbar => hbar(&cfg),
        ExperimentKind::Exp1H | ExperimentKind::Exp1Sigma => {
            let (rec, cert) = match kind {
                ExperimentKind::Exp1H => run_exp1_h(&cfg)?,
                _ => run_exp1_sigma(&cfg)?,
            };
            write_record(&cfg, &rec, &cert)?;
            print!("{}", rec.to_csv());
            Ok(rec.failures)
        }
        ExperimentKind::EffectiveSolve | ExperimentKind::EpsSolve => macro_solve(&cfg),
        ExperimentKind::Exp2 => {
            let out = run_exp2(&cfg)?;
            write_record(&cfg, &out.record, &out.certificate)?;
            let mut traces = Vec::new();
            for s in &out.solves {
                for r in &s.solution.trace {
                    traces.push(json!({ "n": s.n, "mode": mode_name(s.mode), "record": r }));
                }
            }
            write_file(
                &with_suffix(&cfg.output_prefix(), ".trace.jsonl"),
                json_lines(&traces)?.as_bytes(),
            )?;
            print!("{}", out.record.to_csv());
            Ok(out.record.failures)
        }
    }
}

fn check_cordes(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let t = Instant::now();
    let cert = select_lambda(&cfg.family()?, &SampleGrid::new(cfg.samples))?;
    let secs = t.elapsed().as_secs_f64();
    let csv = format!(
        "lambda,delta,margin,zeta1,zeta2\n{:e},{:e},{:e},{:e},{:e}\n",
        cert.lambda, cert.delta, cert.margin, cert.zeta1, cert.zeta2
    );
    let prefix = cfg.output_prefix();
    write_file(&with_suffix(&prefix, ".csv"), csv.as_bytes())?;
    let side = sidecar(cfg, Some(&cert), json!({ "seconds": secs }));
    write_file(
        &with_suffix(&prefix, ".json"),
        &serde_json::to_vec_pretty(&side)?,
    )?;
    print!("{csv}");
    Ok(Vec::new())
}

fn cell_solve(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let family = cfg.family()?;
    let cert = cfg.certificate()?;
    let spec = cfg.cell_spec(cfg.sigma)?;
    let prefix = cfg.output_prefix();
    let sample = match solve_cell(&family, &cert, &spec, cfg.n, cfg.tol, cfg.max_iter) {
        Ok(s) => s,
        Err(e @ Error::NoConvergence { .. }) => return Ok(vec![format!("cell_solve: {e}")]),
        Err(e) => return Err(e),
    };
    let mut csv = Vec::new();
    sample.state.u.write_csv(&mut csv)?;
    write_file(&with_suffix(&prefix, ".csv"), &csv)?;
    let trace: Vec<_> = sample
        .state
        .residual_history
        .iter()
        .enumerate()
        .map(|(i, r)| json!({ "iteration": i, "residual": r }))
        .collect();
    write_file(
        &with_suffix(&prefix, ".trace.jsonl"),
        json_lines(&trace)?.as_bytes(),
    )?;
    let summary = json!({
        "h_sigma_h": sample.value,
        "estimator": sample.estimator,
        "cell_certificate": sample.certificate,
        "solver": sample.state.diagnostics(),
    });
    write_file(
        &with_suffix(&prefix, ".json"),
        &serde_json::to_vec_pretty(&sidecar(cfg, Some(&cert), summary))?,
    )?;
    println!(
        "H = {:.12e}  eta = {:.3e}  iterations = {}",
        sample.value, sample.estimator.eta, sample.state.iterations
    );
    Ok(Vec::new())
}

fn hbar(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let h = ExactHamiltonian::new(&cfg.family()?)?;
    let r = cfg.r_matrix();
    let value = h.value(&r);
    let csv = format!(
        "r11,r12,r21,r22,h\n{},{},{},{},{value:e}\n",
        cfg.r[0], cfg.r[1], cfg.r[2], cfg.r[3]
    );
    let prefix = cfg.output_prefix();
    write_file(&with_suffix(&prefix, ".csv"), csv.as_bytes())?;
    let summary = json!({ "h": value, "harmonic_means": h.harmonic_means() });
    write_file(
        &with_suffix(&prefix, ".json"),
        &serde_json::to_vec_pretty(&sidecar(cfg, None, summary))?,
    )?;
    print!("{csv}");
    Ok(Vec::new())
}

fn macro_solve(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let family = cfg.family()?;
    let (solution, cert): (EffectiveSolution, _) = match cfg.experiment {
        ExperimentKind::EpsSolve => (
            solve_eps_problem(cfg.eps, cfg.omega_n, &family, &cfg.optimizer())?,
            None,
        ),
        _ => {
            let mode = cfg.modes[0];
            (
                solve_effective(&cfg.two_scale(cfg.omega_n, mode), &family)?,
                Some(cfg.certificate()?),
            )
        }
    };
    let prefix = cfg.output_prefix();
    let mut csv = Vec::new();
    solution.u.write_csv(&mut csv)?;
    write_file(&with_suffix(&prefix, ".csv"), &csv)?;
    let mut csv = Vec::new();
    solution.htilde.write_csv(&mut csv)?;
    write_file(&with_suffix(&prefix, ".htilde.csv"), &csv)?;
    write_file(
        &with_suffix(&prefix, ".trace.jsonl"),
        json_lines(&solution.trace)?.as_bytes(),
    )?;
    let summary = json!({
        "objective": solution.objective,
        "gradient_norm": solution.gradient_norm,
        "evaluations": solution.evaluations,
        "iterations": solution.iterations,
        "converged": solution.converged,
    });
    write_file(
        &with_suffix(&prefix, ".json"),
        &serde_json::to_vec_pretty(&sidecar(cfg, cert.as_ref(), summary.clone()))?,
    )?;
    println!("{summary}");
    Ok(if solution.converged {
        Vec::new()
    } else {
        vec![format!(
            "{}: optimizer budget exhausted",
            cfg.experiment.name()
        )]
    })
}
