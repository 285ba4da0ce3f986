use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use qho_kam::kam::KamState;
use qho_kam_cli::config::RunConfig;
use qho_kam_cli::pipeline::{self, Problem, Report, StoredReduction, RESULT_FILE};
use std::path::{Path, PathBuf};

/// Reduction of a quasi-periodically forced harmonic oscillator to constant coefficients.
#[derive(Parser)]
#[command(name = "qho-kam", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Continue the iteration from a saved state.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble Q and report its key decay.
    Assemble,
    /// Screen a grid of frequencies against the first Melnikov condition.
    Screen {
        /// Total grid points on [0, 2π)^n.
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Run the iteration and save the normal form and transformation.
    Reduce,
    /// Compare the reduced flow with direct integration.
    Verify,
    /// Every stage in sequence with one combined summary.
    Certify,
    /// Print the summaries found in the output directory.
    Report,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config is required for this command");
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.dir.as_ref().map(PathBuf::from)))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if let Command::Report = cli.command {
        return report(&out_dir(&cli, None)?);
    }
    let cfg = load_config(&cli)?;
    let out = out_dir(&cli, Some(&cfg))?;
    let problem = Problem::build(&cfg)?;
    let resume = cli.resume.as_deref().map(KamState::load).transpose()?;

    let report = match cli.command {
        Command::Assemble => {
            let mut r = Report::new("assemble", &problem);
            pipeline::write_json(&out.join("q.json"), &problem.q0)?;
            r.assemble = Some(pipeline::assemble(&problem));
            r
        }
        Command::Screen { grid } => {
            let mut r = Report::new("screen", &problem);
            let points = grid.or(problem.config.screen.points).expect("resolved");
            let (summary, rows) = pipeline::screen(&problem, points);
            pipeline::write_screen_csv(&out.join("screen.csv"), &rows, problem.config.torus_dim())?;
            r.screen = Some(summary);
            r
        }
        Command::Reduce => {
            let mut r = Report::new("reduce", &problem);
            r.reduce = Some(reduce_stage(&problem, resume, &out)?.1);
            r
        }
        Command::Verify => {
            let mut r = Report::new("verify", &problem);
            let result = match resume {
                Some(_) => reduce_stage(&problem, resume, &out)?.0,
                None => stored_or_reduce(&problem, &out)?,
            };
            r.verify = Some(verify_stage(&problem, &result, &out)?);
            r
        }
        Command::Certify => {
            let mut r = Report::new("certify", &problem);
            r.assemble = Some(pipeline::assemble(&problem));
            let points = problem.config.screen.points.expect("resolved");
            let (summary, rows) = pipeline::screen(&problem, points);
            pipeline::write_screen_csv(&out.join("screen.csv"), &rows, problem.config.torus_dim())?;
            r.screen = Some(summary);
            let (result, summary) = reduce_stage(&problem, resume, &out)?;
            r.reduce = Some(summary);
            r.verify = Some(verify_stage(&problem, &result, &out)?);
            r
        }
        Command::Report => unreachable!("handled above"),
    };
    let name = format!("{}.json", report.command);
    pipeline::write_json(&out.join(&name), &report)?;
    print!("{}", report.render());
    Ok(())
}

fn reduce_stage(p: &Problem, resume: Option<KamState>, out: &Path) -> Result<(qho_kam::kam::KamResult, pipeline::ReduceSummary)> {
    let ckpt = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let (result, summary) = pipeline::reduce(p, resume, Some(ckpt))?;
    pipeline::write_rows(&out.join("history.csv"), &summary.history)?;
    pipeline::write_json(
        &out.join(RESULT_FILE),
        &StoredReduction {
            config: p.config.clone(),
            result: result.clone(),
        },
    )?;
    Ok((result, summary))
}

/// Reuses a saved reduction when it was produced by the same configuration.
fn stored_or_reduce(p: &Problem, out: &Path) -> Result<qho_kam::kam::KamResult> {
    let path = out.join(RESULT_FILE);
    if path.exists() {
        let stored: StoredReduction = pipeline::read_json(&path)?;
        if stored.config == p.config {
            return Ok(stored.result);
        }
        log::info!("{} was produced by a different configuration; recomputing", path.display());
    }
    Ok(reduce_stage(p, None, out)?.0)
}

fn verify_stage(p: &Problem, result: &qho_kam::kam::KamResult, out: &Path) -> Result<pipeline::VerifySummary> {
    let v = pipeline::verify(p, result)?;
    pipeline::write_rows(&out.join("trajectory.csv"), &v.trajectory)?;
    let mut w = csv::Writer::from_path(out.join("quasi_energies.csv"))?;
    w.write_record(["quasi_energy"])?;
    for e in &v.quasi_energies {
        w.write_record([e.to_string()])?;
    }
    w.flush()?;
    Ok(v.summary)
}

fn report(out: &Path) -> Result<()> {
    let mut found = false;
    for name in ["assemble", "screen", "reduce", "verify", "certify"] {
        let path = out.join(format!("{name}.json"));
        if path.exists() {
            let r: Report = pipeline::read_json(&path)?;
            print!("{}", r.render());
            found = true;
        }
    }
    if !found {
        bail!("no summaries in {}", out.display());
    }
    Ok(())
}
