//! `trailnav` command-line tool.
//!
//! Exit codes: 0 on success, 1 when `--check` is given and a check fails,
//! 2 on configuration or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use trailnav::config::{load_config, PerceptionKind, RunConfig};
use trailnav::experiments::{apply_overrides, run_experiment, Artifacts, Overrides, Subcommand};
use trailnav::Error;

#[derive(Parser, Debug)]
#[command(name = "trailnav", version, about = "Trail-following simulator and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand, Debug)]
enum Command {
    /// Single closed-loop episode.
    Run(Common),
    /// Three-disturbance recovery comparison across perception variants.
    Disturbance(Common),
    /// Autonomy percentage on a trail, per perception variant.
    Autonomy(Common),
    /// Running metric distance estimate from a synthetic odometry stream.
    ScaleDemo(Common),
    /// Two-stage classifier training on the synthetic task.
    Train(Common),
    /// Finite-difference check of the loss gradient.
    Gradcheck(Common),
    /// Print the effective configuration as TOML.
    Config(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit non-zero if any acceptance check fails.
    #[arg(long)]
    check: bool,
    /// Built-in trail: straight100, zigzag250, long1k.
    #[arg(long)]
    scenario: Option<String>,
    /// oracle6, vo_only or model.
    #[arg(long)]
    perception: Option<String>,
    /// Label noise (simulation) or position noise in meters (scale-demo).
    #[arg(long)]
    noise: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    let (cmd, args) = match command {
        Command::Run(a) => (Some(Subcommand::Run), a),
        Command::Disturbance(a) => (Some(Subcommand::Disturbance), a),
        Command::Autonomy(a) => (Some(Subcommand::Autonomy), a),
        Command::ScaleDemo(a) => (Some(Subcommand::ScaleDemo), a),
        Command::Train(a) => (Some(Subcommand::Train), a),
        Command::Gradcheck(a) => (Some(Subcommand::Gradcheck), a),
        Command::Config(a) => (None, a),
    };
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    let overrides = Overrides {
        seed: args.seed,
        scenario: args.scenario.clone(),
        perception: args.perception.as_deref().map(str::parse::<PerceptionKind>).transpose()?,
        noise: args.noise,
    };
    let Some(cmd) = cmd else {
        apply_overrides(Subcommand::Run, &mut cfg, &overrides)?;
        print!("{}", cfg.to_toml());
        return Ok(ExitCode::SUCCESS);
    };
    apply_overrides(cmd, &mut cfg, &overrides)?;
    let artifacts = run_experiment(cmd, &cfg)?;
    write_outputs(&cfg.out, cmd, &cfg, &artifacts)?;
    for c in &artifacts.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if args.check && !artifacts.all_passed() {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_outputs(dir: &Path, cmd: Subcommand, cfg: &RunConfig, artifacts: &Artifacts) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, bytes) in &artifacts.files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        println!("wrote {}", path.display());
    }
    let path = dir.join(format!("{}.config.toml", cmd.name()));
    std::fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    // wall-clock time lives only in this sidecar
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "subcommand": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "finished_unix_time": unix,
        "files": artifacts.files.keys().collect::<Vec<_>>(),
        "all_checks_passed": artifacts.all_passed(),
    });
    let path = dir.join(format!("{}.meta.json", cmd.name()));
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("json") + "\n").map_err(io_err(&path))?;
    Ok(())
}
