mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::{FileConfig, RunConfig};
use std::path::PathBuf;
use whiskers::cohomology::FreeChoicePolicy;
use whiskers::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "whiskers", version, about = "Whiskers of parabolic invariant tori")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the invariance equation for a map model.
    SolveMap(SolveArgs),
    /// Solve the invariance equation for a vector-field model.
    SolveFlow(SolveArgs),
    /// Fit residual orders of a stored solution and check the sector bound.
    Verify(VerifyArgs),
    /// Iterate a map or integrate a field from a given or on-manifold state.
    Iterate(IterateArgs),
    /// Restricted problem escape demo along the computed whisker.
    RestrictedDemo(DemoArgs),
    /// Coefficient `b` of the reduced normal form of a map with `m = 0`.
    Conjugate(ConjugateArgs),
    /// Smallest Diophantine quotient of a frequency vector.
    ScanDiophantine(ScanArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model definition file (JSON).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Built-in model: benchmark, conjugacy, toy-flow or toy-map.
    #[arg(long)]
    fixture: Option<String>,
    /// Order `j` of the solution.
    #[arg(long)]
    order: Option<usize>,
    /// Fourier truncation order.
    #[arg(long)]
    order_cap: Option<u32>,
    /// Artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    divisor_floor: Option<f64>,
    #[arg(long)]
    order_tolerance: Option<f64>,
    #[arg(long)]
    slope_slack: Option<f64>,
    #[arg(long)]
    sector_beta: Option<f64>,
    #[arg(long)]
    sector_rho: Option<f64>,
    /// Value of the free averaged `x^N` coefficient of `K_x`.
    #[arg(long)]
    kbar_x_n: Option<f64>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Write the solution after every order.
    #[arg(long)]
    checkpoint: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Solution file written by a solve command.
    #[arg(long)]
    solution: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IterateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of map steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Final time for fields.
    #[arg(long)]
    horizon: Option<f64>,
    /// Start on the computed manifold at this `x`.
    #[arg(long)]
    x0: Option<f64>,
    /// Angles of the starting point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta0: Option<Vec<f64>>,
    /// Explicit starting state `[x, y.., θ..]`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    state: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[command(flatten)]
    common: Common,
    /// Primary system file; defaults to a unit mass at the origin.
    #[arg(long)]
    primaries: Option<PathBuf>,
    #[arg(long)]
    x0: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args, Debug)]
struct ConjugateArgs {
    #[command(flatten)]
    common: Common,
    /// Normal form coefficient used by the conjugacy fixture.
    #[arg(long, allow_hyphen_values = true)]
    b0: Option<f64>,
    /// Seed of the random change of variables in the conjugacy fixture.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    omega: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    nu: Option<Vec<f64>>,
    #[arg(long)]
    tau: Option<f64>,
    /// Largest `|k|` scanned.
    #[arg(long)]
    depth: Option<u32>,
}

fn resolve(common: &Common) -> Result<(FileConfig, RunConfig)> {
    let file = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut choices = file.choices.clone().unwrap_or_else(FreeChoicePolicy::default);
    if let Some(v) = common.kbar_x_n {
        choices.kbar_x_n = v;
    }
    let mut sector = file.sector.clone().unwrap_or_default();
    if let Some(b) = common.sector_beta {
        sector.beta = b;
    }
    if let Some(r) = common.sector_rho {
        sector.rho = r;
    }
    let defaults = whiskers::EngineOptions::default();
    let fixture = common.fixture.clone().or(file.fixture.clone());
    let model = if fixture.is_some() && common.model.is_none() {
        None
    } else {
        common.model.clone().or(file.model.clone())
    };
    let cfg = RunConfig {
        model,
        fixture,
        solution: file.solution.clone(),
        order: common.order.or(file.order).unwrap_or(5),
        order_cap: common.order_cap.or(file.order_cap),
        scan_depth: file.scan_depth.unwrap_or(50),
        out: common.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("whiskers-out")),
        checkpoint: file.checkpoint.unwrap_or(false),
        divisor_floor: common
            .divisor_floor
            .or(file.tolerances.divisor_floor)
            .unwrap_or(defaults.divisor_floor),
        order_tolerance: common
            .order_tolerance
            .or(file.tolerances.order_tolerance)
            .unwrap_or(defaults.order_tolerance),
        slope_slack: common.slope_slack.or(file.tolerances.slope_slack).unwrap_or(0.1),
        sector,
        choices,
        prescribed_x: config::parse_prescribed(&file.prescribed_x)?,
        sweep: file.sweep.clone(),
        iterate: file.iterate.clone(),
        demo: file.demo.clone(),
        fixture_params: file.fixture_params.clone(),
        scan: file.scan.clone(),
    };
    Ok((file, cfg))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::SolveMap(a) => {
            let (_, mut cfg) = resolve(&a.common)?;
            cfg.checkpoint |= a.checkpoint;
            cfg.validate()?;
            commands::solve(&cfg, whiskers::model::DynamicsKind::Map)
        }
        Command::SolveFlow(a) => {
            let (_, mut cfg) = resolve(&a.common)?;
            cfg.checkpoint |= a.checkpoint;
            cfg.validate()?;
            commands::solve(&cfg, whiskers::model::DynamicsKind::Flow)
        }
        Command::Verify(a) => {
            let (_, mut cfg) = resolve(&a.common)?;
            if a.solution.is_some() {
                cfg.solution = a.solution;
            }
            cfg.validate()?;
            commands::verify(&cfg)
        }
        Command::Iterate(a) => {
            let (_, mut cfg) = resolve(&a.common)?;
            let it = &mut cfg.iterate;
            it.steps = a.steps.or(it.steps);
            it.horizon = a.horizon.or(it.horizon);
            it.x0 = a.x0.or(it.x0);
            it.theta0 = a.theta0.or(it.theta0.take());
            it.state = a.state.or(it.state.take());
            cfg.validate()?;
            commands::iterate(&cfg)
        }
        Command::RestrictedDemo(a) => {
            let (file, mut cfg) = resolve(&a.common)?;
            if file.order.is_none() && a.common.order.is_none() {
                cfg.order = 6;
            }
            cfg.demo.primaries = a.primaries.or(cfg.demo.primaries.take());
            cfg.demo.x0 = a.x0.or(cfg.demo.x0);
            cfg.demo.horizon = a.horizon.or(cfg.demo.horizon);
            cfg.validate()?;
            commands::restricted_demo(&cfg)
        }
        Command::Conjugate(a) => {
            let (file, mut cfg) = resolve(&a.common)?;
            if file.order.is_none() && a.common.order.is_none() {
                cfg.order = 2;
            }
            cfg.fixture_params.b0 = a.b0.or(cfg.fixture_params.b0);
            cfg.fixture_params.seed = a.seed.or(cfg.fixture_params.seed);
            cfg.validate()?;
            commands::conjugate(&cfg)
        }
        Command::ScanDiophantine(a) => {
            let (_, mut cfg) = resolve(&a.common)?;
            cfg.scan.omega = a.omega.or(cfg.scan.omega.take());
            cfg.scan.nu = a.nu.or(cfg.scan.nu.take());
            cfg.scan.tau = a.tau.or(cfg.scan.tau);
            if let Some(d) = a.depth {
                cfg.scan_depth = d;
            }
            cfg.validate()?;
            commands::scan(&cfg)
        }
    }
}

/// One JSON object on stderr describing a failure.
pub fn report_failure(kind: &str, code: i32, message: &str) {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            let err = Error::Invalid(e.to_string().trim().to_string());
            report_failure("Usage", err.exit_code(), &e.to_string());
            std::process::exit(err.exit_code());
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            report_failure(e.kind(), e.exit_code(), &e.to_string());
            std::process::exit(e.exit_code());
        }
    }
}
