use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deep_mpc::bounds::estimate_bounds;
use deep_mpc::config::RunConfig;
use deep_mpc::controller::{Mode, StepRecord};
use deep_mpc::experiment::{records_file, run_experiment, CONFIG_FILE};
use deep_mpc::io::{read_records, read_trajectory_log};
use deep_mpc::metrics::{check_comparable, compare};

/// Deep MPC experiments on the skid-steer model.
#[derive(Parser)]
#[command(name = "deepmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the reference and run the controllers, writing CSV, JSON and SVG artifacts.
    Run(RunArgs),
    /// Compare two step logs (run directories or CSV files).
    Compare(CompareArgs),
    /// Estimate disturbance and authority bounds from logged trajectories.
    Bounds(BoundsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Deep,
    Tube,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Deep => vec![Mode::Deep],
            ModeArg::Tube => vec![Mode::Tube],
            ModeArg::Both => vec![Mode::Deep, Mode::Tube],
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory. Defaults to a seed-named directory under the output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output root used when `--out` is absent.
    #[arg(long, env = "DEEPMPC_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the learning-control authority `u_max_a`.
    #[arg(long = "umax-a")]
    umax_a: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    /// Which log to take from a run directory.
    #[arg(long, value_enum, default_value = "deep")]
    mode: ModeArg,
    /// Also write the comparison JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    /// CSV logs with columns x, y, theta, v, omega, u_l, u_r.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Plant parameters are taken from this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Safety factor applied to the estimated authority.
    #[arg(long, default_value_t = 1.1)]
    margin: f64,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(a) = args.umax_a {
        cfg.u_max_a = a;
        cfg.estimate_authority = false;
    }
    cfg.validate()?;
    let out = args
        .out
        .unwrap_or_else(|| args.out_root.join(format!("seed{}_umaxa{}", cfg.seed, cfg.u_max_a)));
    let summary = run_experiment(&cfg, &out, &args.mode.modes())?;
    println!("artifacts: {}", out.display());
    println!("u_max_a = {} (column bound {})", summary.u_max_a, summary.projection_bound);
    for (mode, m) in &summary.runs {
        println!(
            "{mode}: cost {:.6}, clip fraction {:.3}, mean |u~| first/last 20: {} / {}",
            m.cumulative_cost,
            m.clip_fraction,
            opt(m.mean_u_tilde_first),
            opt(m.mean_u_tilde_last)
        );
    }
    if let Some(c) = &summary.comparison {
        println!("deep vs tube RMS gap: {:?}", c.rms_gap);
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Step log and, when present, the config echo next to it.
fn load_run(path: &Path, mode: Mode) -> Result<(Vec<StepRecord>, Option<RunConfig>)> {
    let (csv, dir) = if path.is_dir() {
        (path.join(records_file(mode)), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let file = File::open(&csv).with_context(|| format!("opening {}", csv.display()))?;
    let records = read_records(BufReader::new(file)).with_context(|| format!("reading {}", csv.display()))?;
    let echo = dir.join(CONFIG_FILE);
    let cfg = if echo.is_file() { Some(RunConfig::load(&echo)?) } else { None };
    Ok((records, cfg))
}

fn compare_cmd(args: CompareArgs) -> Result<()> {
    let mode = match args.mode {
        ModeArg::Deep | ModeArg::Both => Mode::Deep,
        ModeArg::Tube => Mode::Tube,
    };
    let (ra, ca) = load_run(&args.a, mode)?;
    let (rb, cb) = load_run(&args.b, mode)?;
    if let (Some(ca), Some(cb)) = (&ca, &cb) {
        check_comparable(ca, cb)?;
    }
    let q = ca.or(cb).unwrap_or_default().q;
    let cmp = compare(&ra, &rb, &q)?;
    let json = serde_json::to_string_pretty(&cmp)?;
    println!("{json}");
    if let Some(out) = args.out {
        std::fs::write(&out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn bounds_cmd(args: BoundsArgs) -> Result<()> {
    if !(args.margin >= 1.0) {
        bail!("margin must be at least 1, got {}", args.margin);
    }
    let cfg = load_config(args.config.as_deref())?;
    let logs = args
        .logs
        .iter()
        .map(|p| {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_trajectory_log(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let est = estimate_bounds(&logs, &cfg.plant())?;
    let out = serde_json::json!({
        "w_max": est.w_max,
        "u_max_a": est.u_max_a,
        "margin": args.margin,
        "u_max_a_with_margin": est.with_margin(args.margin).u_max_a,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Bounds(a) => bounds_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
