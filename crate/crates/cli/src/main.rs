use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gplift_core::control::fit_interface_constants;
use gplift_core::simlab::{
    eta_experiment, read_interface, run_case, run_matrix, validate, write_case, write_comparison, write_figures, Case,
    EtaProfile, ScenarioConfig,
};
use gplift_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gplift", version, about = "Cooperative payload transport simulation lab")]
struct Cli {
    /// Scenario file (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Controller configuration for `run`.
    #[arg(long, global = true, default_value = "C3")]
    case: Case,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Simulated time in seconds.
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Integration step in seconds.
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one case and write its metrics, interface log and summary.
    Run,
    /// Simulate C1, C2 and C3 and write the comparison and figure data.
    Matrix,
    /// Compare payload motion with and without internal forces.
    Eta,
    /// Run the numerical invariant suite.
    Validate,
    /// Fit the interface envelope constants to an `interface.csv` log.
    FitInterface { path: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(h) = cli.horizon {
        cfg.integrator.horizon = h;
        cfg.gp.update_times.retain(|t| *t < h);
    }
    if let Some(dt) = cli.dt {
        cfg.integrator.dt = dt;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn case_dir(out: &Path, case: Case) -> PathBuf {
    out.join(case.name())
}

fn execute(cli: &Cli) -> Result<bool> {
    if let Command::FitInterface { path } = &cli.command {
        let fit = fit_interface_constants(&read_interface(path)?)?;
        println!("alpha={}", fit.alpha);
        println!("gamma={}", fit.gamma);
        println!("theta={}", fit.theta);
        for (j, k) in fit.kappa.iter().enumerate() {
            println!("kappa_{}={k}", j + 1);
        }
        println!("coverage={}", fit.coverage);
        println!("violations={}", fit.violations);
        println!("samples={}", fit.samples);
        return Ok(true);
    }
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Run => {
            let start = Instant::now();
            let res = run_case(&cfg, cli.case)?;
            let dir = case_dir(&cli.out, cli.case);
            write_case(&dir, &res)?;
            log::info!("{} finished in {:.1} s", cli.case, start.elapsed().as_secs_f64());
            print!("{}", res.summary);
            println!("output={}", dir.display());
        }
        Command::Matrix => {
            let m = run_matrix(&cfg)?;
            for r in &m.results {
                write_case(&case_dir(&cli.out, r.case), r)?;
            }
            let mut eta_cfg = cfg.clone();
            eta_cfg.internal_force.profile = EtaProfile::Sine;
            let eta = eta_experiment(&eta_cfg, cfg.integrator.horizon.min(10.0))?;
            write_comparison(&cli.out, &m.results)?;
            write_figures(&cli.out, &m.results, Some(&eta))?;
            print!("{}", fs::read_to_string(cli.out.join("comparison.txt")).map_err(|e| Error::Io {
                path: cli.out.join("comparison.txt"),
                source: e,
            })?);
        }
        Command::Eta => {
            let mut c = cfg.clone();
            c.internal_force.profile = EtaProfile::Sine;
            let rep = eta_experiment(&c, cfg.integrator.horizon.min(10.0))?;
            println!("pose_divergence={}", rep.pose_divergence);
            println!("max_wrench_residual={}", rep.max_wrench_residual);
            println!("max_lambda_shift={}", rep.max_lambda_shift);
            println!("shift_ratio_min={}", rep.shift_ratio.0);
            println!("shift_ratio_max={}", rep.shift_ratio.1);
        }
        Command::Validate => {
            let checks = validate::run_suite(&cfg)?;
            let mut ok = true;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(ok);
        }
        Command::FitInterface { .. } => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_solver_failure() { 2 } else { 1 })
        }
    }
}
