use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pointbirth::cli::{parse_config, run_experiment, Experiment, RunConfig, RunError, SolveMethod};

#[derive(Parser)]
#[command(
    name = "pointbirth",
    version,
    about = "Point-potential heat kernels, log-Laplace solvers and superprocess Monte Carlo"
)]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides sim.seed and verify.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory (overrides outputs.dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// worker threads; falls back to POINTBIRTH_THREADS
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Picard,
    Trotter,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate P^alpha and its parts
    Kernel,
    /// Apply the flow S^alpha_t to the test function
    Flow,
    /// Solve the log-Laplace equation
    Solve {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Trotter level
        #[arg(long)]
        n: Option<usize>,
    },
    /// Monte Carlo of the branching particle scheme
    Simulate,
    /// Run the acceptance checks
    Verify,
}

fn load(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
        cfg.verify.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.outputs.dir = out.clone();
    }
    if let Command::Solve { method, n } = cli.command {
        if let Some(m) = method {
            cfg.solve.method = match m {
                MethodArg::Picard => SolveMethod::Picard,
                MethodArg::Trotter => SolveMethod::Trotter,
            };
        }
        if n.is_some() {
            cfg.solve.n = n;
        }
    }
    Ok(cfg)
}

fn threads(cli: &Cli) -> Result<Option<usize>, RunError> {
    if cli.threads.is_some() {
        return Ok(cli.threads);
    }
    match std::env::var("POINTBIRTH_THREADS") {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                RunError::Io(format!("POINTBIRTH_THREADS: `{v}` is not a thread count"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: &Cli) -> Result<i32, RunError> {
    if let Some(k) = threads(cli)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| RunError::Io(format!("thread pool: {e}")))?;
    }
    let experiment = match cli.command {
        Command::Kernel => Experiment::Kernel,
        Command::Flow => Experiment::Flow,
        Command::Solve { .. } => Experiment::Solve,
        Command::Simulate => Experiment::Simulate,
        Command::Verify => Experiment::Verify,
    };
    let cfg = load(cli)?;
    let report = run_experiment(&cfg, experiment)?;
    for line in &report.lines {
        println!("{line}");
    }
    println!(
        "wrote {} and {}",
        report.csv.display(),
        report.summary.display()
    );
    Ok(report.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let doc = e.to_json();
            eprintln!("{doc}");
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            if fs::create_dir_all(&dir).is_ok() {
                let _ = fs::write(dir.join("error.json"), format!("{doc}\n"));
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
