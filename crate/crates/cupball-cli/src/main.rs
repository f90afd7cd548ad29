//! Command-line front end for the cup-and-ball pipeline.
//!
//! Every subcommand reads one JSON run configuration, writes its artifacts
//! into the output directory and nowhere else, and derives all randomness
//! from the configured master seed, so a rerun with `--no-timestamp`
//! reproduces every output byte for byte.
//!
//! Exit codes: `0` success, `1` configuration or I/O problems, `2` solver
//! non-convergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cupball::config::RunConfig;
use cupball::noise::{fit_confidence_support, sample_noise, ConfidenceSupport};
use cupball::report::write_charts;
use cupball::sets::Box2;
use cupball::sim::{
    derive_seed, learn_and_tighten, run_rollout, run_sweep, write_records_csv, SweepSummary,
};
use cupball::swingup::{solve_swingup, verify_terminal, SwingupSolution};

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;

#[derive(Parser)]
#[command(
    name = "cupball",
    version,
    about = "Swing-up planning, learned-noise catching control and Monte-Carlo sweeps"
)]
struct Cli {
    /// Run configuration JSON document.
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,
    /// Output directory; all artifacts are written below it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the experiment master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit timestamps from artifacts so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the offline swing-up problem; write the force profile and a
    /// manifest with the terminal residual.
    PlanSwingup,
    /// Sample sensor noise and fit the confidence-calibrated support box.
    CalibrateNoise(SampleArgs),
    /// Learn a noise support and build the tightened constraint sets.
    LearnSupport(SampleArgs),
    /// Run one closed-loop catch trial under a freshly learned support.
    Rollout(SampleArgs),
    /// Run the full learning sweep; write per-trial records and the summary.
    Sweep,
    /// Render a sweep summary into SVG charts.
    Report(ReportArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Calibration sample count for the noise-support fit.
    #[arg(long, default_value_t = 400)]
    samples: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Summary JSON produced by `sweep`; defaults to OUT/summary.json.
    #[arg(long)]
    summary: Option<PathBuf>,
}

/// On-disk wrapper for `summary.json`: an optional timestamp ahead of the
/// sweep summary fields. Without the timestamp the document is exactly the
/// bare summary, so both forms read back here.
#[derive(Serialize, Deserialize)]
struct SummaryDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    #[serde(flatten)]
    summary: SweepSummary,
}

#[derive(Serialize)]
struct PlanManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    converged: bool,
    cost: f64,
    terminal_residual: f64,
    bound_violation: f64,
    kkt_residual: f64,
    horizon: usize,
    dt: f64,
    release_state: [f64; 6],
    /// Seconds until the predicted ball-cup gap vanishes after release.
    gap_vanish_s: Option<f64>,
    forces_file: String,
    states_file: String,
}

#[derive(Serialize)]
struct CalibrationDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    seed: u64,
    fit: ConfidenceSupport,
}

#[derive(Serialize)]
struct SupportDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    seed: u64,
    samples: usize,
    epsilon_requested: f64,
    /// Budget after any escalation needed to make the tightening feasible.
    epsilon_used: f64,
    support: Box2,
    sets: cupball::controller::TightenedSets,
}

#[derive(Serialize)]
struct RolloutDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    samples: usize,
    fit_seed: u64,
    rollout_seed: u64,
    epsilon_used: f64,
    support: Box2,
    e0: [f64; 2],
    outcome: cupball::controller::TrialOutcome,
    category: String,
    hit_center: bool,
    impact_step: Option<usize>,
    impact_rel_vz: Option<f64>,
    catch: bool,
    final_e: [f64; 2],
    trace: Option<cupball::controller::Trace>,
}

#[derive(Serialize)]
struct ReportManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    source: String,
    charts: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::from(EXIT_OK);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let mut cfg = RunConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    match &cli.cmd {
        Cmd::PlanSwingup => cmd_plan_swingup(cli, &cfg),
        Cmd::CalibrateNoise(args) => cmd_calibrate_noise(cli, &cfg, args),
        Cmd::LearnSupport(args) => cmd_learn_support(cli, &cfg, args),
        Cmd::Rollout(args) => cmd_rollout(cli, &cfg, args),
        Cmd::Sweep => cmd_sweep(cli, &cfg),
        Cmd::Report(args) => cmd_report(cli, args),
    }
}

fn timestamp(cli: &Cli) -> Option<String> {
    if cli.no_timestamp {
        return None;
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Some(secs.to_string())
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_plan_swingup(cli: &Cli, cfg: &RunConfig) -> Result<u8> {
    let sol = solve_swingup(&cfg.swingup, &cfg.solver).context("setting up the swing-up solve")?;
    write_force_csv(&cli.out.join("swingup_forces.csv"), cfg, &sol)?;
    write_state_csv(&cli.out.join("swingup_states.csv"), cfg, &sol)?;
    let x_n = sol.x_traj.last().expect("trajectory has a terminal state");
    let (_, gap_vanish_s) = verify_terminal(&cfg.swingup.params, x_n, 1.0);
    let manifest = PlanManifest {
        generated_at: timestamp(cli),
        converged: sol.converged,
        cost: sol.cost,
        terminal_residual: sol.terminal_residual,
        bound_violation: sol.bound_violation,
        kkt_residual: sol.kkt_residual,
        horizon: cfg.swingup.horizon,
        dt: cfg.swingup.dt,
        release_state: [x_n[0], x_n[1], x_n[2], x_n[3], x_n[4], x_n[5]],
        gap_vanish_s,
        forces_file: "swingup_forces.csv".into(),
        states_file: "swingup_states.csv".into(),
    };
    write_json(&cli.out.join("swingup_manifest.json"), &manifest)?;
    println!(
        "swing-up: converged={} terminal_residual={:.3e} gap_vanish_s={:?}",
        sol.converged, sol.terminal_residual, gap_vanish_s
    );
    if sol.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("swing-up solver did not converge (kkt residual {:.3e})", sol.kkt_residual);
        Ok(EXIT_SOLVER)
    }
}

fn write_force_csv(path: &Path, cfg: &RunConfig, sol: &SwingupSolution) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "time_s", "f_x", "f_z"])?;
    for (k, f) in sol.f_star.iter().enumerate() {
        w.write_record([
            k.to_string(),
            format!("{:.17e}", k as f64 * cfg.swingup.dt),
            format!("{:.17e}", f.x),
            format!("{:.17e}", f.y),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_state_csv(path: &Path, cfg: &RunConfig, sol: &SwingupSolution) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "time_s", "p_x", "p_z", "phi", "v_x", "v_z", "phi_dot"])?;
    for (k, x) in sol.x_traj.iter().enumerate() {
        let mut row = vec![k.to_string(), format!("{:.17e}", k as f64 * cfg.swingup.dt)];
        row.extend((0..6).map(|i| format!("{:.17e}", x[i])));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_calibrate_noise(cli: &Cli, cfg: &RunConfig, args: &SampleArgs) -> Result<u8> {
    let seed = derive_seed(cfg.experiment.seed, 1, 0);
    let samples = sample_noise(&cfg.experiment.true_noise, seed, args.samples);
    let fit = fit_confidence_support(&samples, cfg.experiment.epsilon)
        .context("fitting the noise support")?;
    let doc = CalibrationDoc { generated_at: timestamp(cli), seed, fit };
    write_json(&cli.out.join("noise_support.json"), &doc)?;
    println!(
        "calibrated noise support from {} samples at epsilon {}: x [{:.5}, {:.5}], z [{:.5}, {:.5}]",
        args.samples,
        cfg.experiment.epsilon,
        doc.fit.support.lo.x,
        doc.fit.support.hi.x,
        doc.fit.support.lo.y,
        doc.fit.support.hi.y,
    );
    Ok(EXIT_OK)
}

fn cmd_learn_support(cli: &Cli, cfg: &RunConfig, args: &SampleArgs) -> Result<u8> {
    let seed = derive_seed(cfg.experiment.seed, 1, 0);
    let (_, ts, epsilon_used, support) =
        learn_and_tighten(&cfg.experiment, &cfg.controller, args.samples, seed)
            .context("learning the noise support")?;
    let feasible = !ts.empty;
    let doc = SupportDoc {
        generated_at: timestamp(cli),
        seed,
        samples: args.samples,
        epsilon_requested: cfg.experiment.epsilon,
        epsilon_used,
        support,
        sets: ts,
    };
    write_json(&cli.out.join("learned_support.json"), &doc)?;
    println!(
        "learned support from {} samples: epsilon_used={} tightened_sets_feasible={}",
        args.samples, epsilon_used, feasible
    );
    Ok(EXIT_OK)
}

fn cmd_rollout(cli: &Cli, cfg: &RunConfig, args: &SampleArgs) -> Result<u8> {
    let fit_seed = derive_seed(cfg.experiment.seed, 1, 0);
    let rollout_seed = derive_seed(cfg.experiment.seed, 2, 0);
    let (tuned, ts, epsilon_used, support) =
        learn_and_tighten(&cfg.experiment, &cfg.controller, args.samples, fit_seed)
            .context("learning the noise support")?;
    let mut experiment = cfg.experiment.clone();
    experiment.keep_traces = true;
    let record = run_rollout(&experiment, &tuned, &ts, args.samples, rollout_seed);
    let doc = RolloutDoc {
        generated_at: timestamp(cli),
        samples: args.samples,
        fit_seed,
        rollout_seed,
        epsilon_used,
        support,
        e0: [record.e0.x, record.e0.y],
        outcome: record.outcome,
        category: record.category().label().to_string(),
        hit_center: record.hit_center,
        impact_step: record.impact_step,
        impact_rel_vz: record.impact_rel_vz,
        catch: record.catch,
        final_e: [record.final_e.x, record.final_e.y],
        trace: record.trace,
    };
    write_json(&cli.out.join("rollout.json"), &doc)?;
    println!(
        "rollout: category={} impact_step={:?} impact_rel_vz={:?}",
        doc.category, doc.impact_step, doc.impact_rel_vz
    );
    Ok(EXIT_OK)
}

fn cmd_sweep(cli: &Cli, cfg: &RunConfig) -> Result<u8> {
    let out = run_sweep(&cfg.experiment, &cfg.controller).context("running the sweep")?;
    write_records_csv(&cli.out.join("records.csv"), &out.records)
        .context("writing records.csv")?;
    let doc = SummaryDoc { generated_at: timestamp(cli), summary: out.summary };
    write_json(&cli.out.join("summary.json"), &doc)?;
    for s in &doc.summary.per_n {
        println!(
            "n={:5} epsilon_used={:.3} catch={:5.1}% hit_center={:5.1}% failures={:4.1}% mean_impact_vz={}",
            s.n,
            s.epsilon_used,
            s.catch_pct,
            s.hit_center_pct,
            s.trial_failure_pct,
            s.mean_impact_vz.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    println!(
        "spearman rho={:.3} p={:.4} over {} sample counts",
        doc.summary.spearman_rho,
        doc.summary.spearman_p,
        doc.summary.per_n.len()
    );
    Ok(EXIT_OK)
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<u8> {
    let path = args.summary.clone().unwrap_or_else(|| cli.out.join("summary.json"));
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading summary {}", path.display()))?;
    let doc: SummaryDoc = serde_json::from_str(&text)
        .with_context(|| format!("parsing summary {}", path.display()))?;
    let paths = write_charts(&cli.out, &doc.summary).context("writing charts")?;
    let manifest = ReportManifest {
        generated_at: timestamp(cli),
        source: path.display().to_string(),
        charts: paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
    };
    write_json(&cli.out.join("report_manifest.json"), &manifest)?;
    println!("wrote {} charts to {}", paths.len(), cli.out.display());
    Ok(EXIT_OK)
}
