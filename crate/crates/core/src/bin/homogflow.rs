use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use homogflow::harness::{self, emit_report, ExperimentConfig, Metric, Study};
use homogflow::{Error, Execution};

#[derive(Parser)]
#[command(name = "homogflow", version, about = "Averaging-homogenization studies for slow-fast two-continuum flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the cell problems and write effective tensors and correctors
    Cell(Common),
    /// One oscillating run at the first epsilon of the ladder
    Simulate(Common),
    /// The averaged deterministic system
    Average(Common),
    /// Mixing, window-average and splitting diagnostics
    Ergodic(Common),
    /// Replica convergence study over the epsilon ladder
    Converge(Common),
    /// Parse the config and check the coefficient families
    Validate(Common),
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load(c: &Common) -> Result<(Study, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(Failure::Config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.jobs == Some(0) {
        return Err(Failure::Config(Error::Config("--jobs must be >= 1".into())));
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let study = Study::new(cfg).map_err(Failure::Config)?;
    Ok((study, out))
}

fn verdict(name: &str, ok: bool) -> bool {
    println!("{name}: {}", if ok { "pass" } else { "FAIL" });
    ok
}

fn run(command: &Command) -> Result<bool, Failure> {
    let (common, kind) = match command {
        Command::Cell(c) => (c, "cell"),
        Command::Simulate(c) => (c, "simulate"),
        Command::Average(c) => (c, "average"),
        Command::Ergodic(c) => (c, "ergodic"),
        Command::Converge(c) => (c, "converge"),
        Command::Validate(c) => (c, "validate"),
    };
    let (study, out) = load(common)?;
    let exec = Execution::default();
    let out: &Path = &out;
    homogflow::par::with_jobs(common.jobs, || -> Result<bool, Failure> {
        match kind {
            "cell" => {
                let res = harness::run_cell(&study, exec, out)?;
                for (i, c) in res.cells.iter().enumerate() {
                    println!("A{} effective: {:?}", i + 1, c.effective);
                }
                Ok(true)
            }
            "simulate" => {
                let ok = harness::run_simulate(&study, out)?;
                Ok(verdict("a priori caps", ok))
            }
            "average" => {
                let traj = harness::run_average(&study, exec, out)?;
                println!("averaged run: {} steps", traj.diagnostics.steps);
                Ok(true)
            }
            "ergodic" => {
                let res = harness::run_ergodic(&study, exec, true)?;
                harness::emit_ergodic(&res, out)?;
                println!("mixing rate {:.4} (fitted c {:.4})", res.mixing.rate, res.mixing.fitted_constant);
                for &f in &res.delta_factors {
                    println!("window medians at delta = {f} sqrt(eps): {:?}", res.window_medians(f));
                }
                let mut ok = verdict("mixing rate in [0.8, 1.2]", res.rate_ok());
                ok &= verdict("window medians strictly decreasing", res.windows_decreasing());
                if let Some(s) = &res.splitting {
                    ok &= verdict("splitting identity to 1e-12", s.max_defect() <= 1e-12);
                    for m in Metric::SPLITTING {
                        println!("median {}: {:?}", m.name(), s.medians(m));
                    }
                }
                Ok(ok)
            }
            "converge" => {
                let rep = harness::run_convergence(&study, exec, true)?;
                let files = emit_report(&rep, out, study.config.study.svg)?;
                for m in Metric::ERRORS {
                    println!("median {}: {:?}", m.name(), rep.medians(m));
                }
                for f in files {
                    println!("wrote {}", f.display());
                }
                Ok(verdict("medians nonincreasing", rep.medians_nonincreasing()))
            }
            _ => {
                let rep = harness::run_validate(&study).map_err(Failure::Config)?;
                for v in &rep.violations {
                    println!("violation: {v}");
                }
                println!(
                    "samples {}, sup|alpha| {:.6} <= {:.6}, Lipschitz quotient {:.6} <= {:.6}",
                    rep.samples, rep.alpha_sup, rep.alpha_bound, rep.alpha_lip_quotient, rep.alpha_lip
                );
                Ok(verdict("coefficient validation", rep.passed()))
            }
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
