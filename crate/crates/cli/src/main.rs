use std::path::PathBuf;
use std::process::ExitCode;

use chiptrap_cli::commands::{self, Context};
use chiptrap_cli::config::GridChoice;
use chiptrap_cli::criteria::{self, Suite};
use chiptrap_cli::{load_config, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chiptrap", version, about = "Segmented two-layer RF microtrap simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; the bundled baseline preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed; overrides `rng_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = GridChoice::Default)]
    grid: GridChoice,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve (or load cached) electrode bases.
    Solve,
    /// Secular frequencies, Mathieu parameters, axes and depth.
    Analyze,
    /// Tickle spectroscopy scan.
    Tickle,
    /// Transport waveform and transport heating.
    Shuttle,
    /// Heating-rate model, synthetic experiment and fit.
    Heat,
    /// RF circuit quality factor, dissipation and breakdown margins.
    Circuit,
    /// Miniaturization scaling sweep.
    Scaling,
    /// Run every reproduction criterion and print the table.
    Reproduce,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Compute(e.to_string()))?;
    }
    let ctx = Context::new(cfg, cli.out.as_deref(), cli.seed, cli.grid)?;
    match cli.command {
        Command::Solve => commands::solve(&ctx),
        Command::Analyze => commands::analyze(&ctx),
        Command::Tickle => commands::tickle(&ctx),
        Command::Shuttle => commands::shuttle(&ctx),
        Command::Heat => commands::heat(&ctx),
        Command::Circuit => commands::circuit(&ctx),
        Command::Scaling => commands::scaling(&ctx),
        Command::Reproduce => reproduce(ctx),
    }
}

fn reproduce(ctx: Context) -> Result<String, CliError> {
    let suite = Suite::new(ctx);
    let mut rows = Vec::new();
    for id in criteria::ALL {
        let o = suite.run(id);
        println!("{o}");
        rows.push(o);
    }
    suite.ctx.sink.csv("reproduce.csv", |w| {
        use std::io::Write;
        writeln!(w, "criterion,title,pass,detail")?;
        for o in &rows {
            writeln!(w, "{},{},{},\"{}\"", o.id, o.title, o.pass, o.detail.replace('"', "'"))?;
        }
        Ok(())
    })?;
    let failed: Vec<String> = rows.iter().filter(|o| !o.pass).map(|o| o.id.to_string()).collect();
    if failed.is_empty() {
        Ok(format!("all {} criteria pass", rows.len()))
    } else {
        Err(CliError::Compute(format!("failed criteria: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
