use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use wdn_dae::config::Config;
use wdn_dae::dae::{consistent_init, equilibrium_solve, simulate};
use wdn_dae::inp::{parse_inp, validate, NetworkDescription};
use wdn_dae::linearization::{spectrum_csv, stability_margin, weights_csv};
use wdn_dae::margins::{
    controllability_ranking, demand_levels, demand_sweep, global_roughness_direction, margin_report,
    rank_parameters, ranking_csv, schedule_points, screen_linearization, sweep_csv, sweep_points,
    OperatingPoint,
};
use wdn_dae::network::{build_model, HydraulicModel};
use wdn_dae::quasi_steady::{
    compare_trajectories, extended_period_sim, junction_head_columns, solve_wfp, CompareOptions,
};
use wdn_dae::schedule::{Inputs, ScheduleInput};
use wdn_dae::smoothing::smooth_controls;
use wdn_dae::trajectory::TrajectoryTable;
use wdn_dae::Error;

#[derive(Parser)]
#[command(name = "wdn-dae", version, about = "Hydraulic DAE analysis of water distribution networks")]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for sweeps, rankings and margins.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Network {
    /// EPANET input file.
    #[arg(long)]
    inp: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate an input file; writes model.json and diagnostics.jsonl.
    Parse(Network),
    /// DAE trajectory under the file's patterns and controls; writes trajectory.csv and run.json.
    Simulate {
        #[command(flatten)]
        net: Network,
        #[arg(long)]
        hours: Option<f64>,
        /// Integration step in seconds.
        #[arg(long)]
        dt: Option<f64>,
        /// Smoothing width for control switches in seconds (0 keeps them hard).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Steady equilibrium and quasi-steady run; writes equilibrium.json and steady.csv.
    Steady {
        #[command(flatten)]
        net: Network,
        #[arg(long)]
        hours: Option<f64>,
        /// Quasi-steady step in seconds.
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Linearization at the initial equilibrium; writes linear.json, weights.csv and spectrum.csv.
    Linearize(Network),
    /// Full margin report; writes margins.json.
    Margins(Network),
    /// Screens a global roughness perturbation; writes screening.json.
    Screen {
        #[command(flatten)]
        net: Network,
        /// Relative roughness perturbation.
        #[arg(long)]
        delta: f64,
        /// Relative matrix-error tolerance.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Parameter rankings; writes ranking.csv and ranking.json.
    Rank(Network),
    /// Margins across demand levels or schedule times; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        net: Network,
        /// Sample the demand schedule every dt_m hours instead of scaling demands.
        #[arg(long)]
        schedule: bool,
    },
    /// Compares two trajectory CSVs; writes error.csv, band.csv and summary.json.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Network whose junction heads and links classify the columns.
        #[arg(long)]
        inp: Option<PathBuf>,
        /// Restrict the comparison to these columns.
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
    },
}

#[derive(Debug)]
enum Failure {
    Domain(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(path) => {
            let text = read(path)?;
            Config::from_toml_str(&text)?
        }
        None => Config::default(),
    };
    let workers = cli.workers.or(cfg.workers);
    if workers == Some(0) {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    fs::create_dir_all(&cli.out).map_err(|e| io_failure(&cli.out, e))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::Domain(e.to_string()))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &Config) -> Outcome {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Parse(n) => parse(out, cfg, &n.inp),
        Command::Simulate { net, hours, dt, tau } => simulate_cmd(out, cfg, &net.inp, *hours, *dt, *tau),
        Command::Steady { net, hours, dt } => steady(out, cfg, &net.inp, *hours, *dt),
        Command::Linearize(n) => linearize_cmd(out, cfg, &n.inp),
        Command::Margins(n) => {
            let (_, _, op) = operating_point(cfg, &n.inp)?;
            let report = margin_report(&op, &cfg.margin_settings())?;
            write_json(out, "margins.json", &to_value(&report))
        }
        Command::Screen { net, delta, eps } => screen(out, cfg, &net.inp, *delta, *eps),
        Command::Rank(n) => rank(out, cfg, &n.inp),
        Command::Sweep { net, schedule } => sweep(out, cfg, &net.inp, *schedule),
        Command::Compare { a, b, inp, columns } => compare(out, cfg, a, b, inp.as_deref(), columns.clone()),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Domain(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn write(dir: &Path, name: &str, text: &str) -> Outcome {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_failure(&path, e))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

/// Pretty JSON with sorted keys and a trailing newline.
fn write_json(dir: &Path, name: &str, v: &Value) -> Outcome {
    let mut text = serde_json::to_string_pretty(v).expect("value serializes");
    text.push('\n');
    write(dir, name, &text)
}

fn load(cfg: &Config, inp: &Path) -> Result<(NetworkDescription, HydraulicModel), Failure> {
    let net = parse_inp(&read(inp)?)?;
    let model = build_model(&net, &cfg.model_options())?;
    Ok((net, model))
}

fn positive(flag: &str, v: f64) -> Outcome {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag} must be positive, got {v}")))
    }
}

fn operating_point(cfg: &Config, inp: &Path) -> Result<(NetworkDescription, HydraulicModel, OperatingPoint), Failure> {
    let (net, model) = load(cfg, inp)?;
    let schedule = ScheduleInput::from_network(&model, &net, 0.0)?;
    let op = OperatingPoint::new(
        &model,
        &schedule.controls(0.0),
        &schedule.demands(0.0),
        &cfg.solver_settings(),
    )?;
    Ok((net, model, op))
}

fn parse(out: &Path, cfg: &Config, inp: &Path) -> Outcome {
    let (net, model) = load(cfg, inp)?;
    let diagnostics: String = validate(&net).iter().map(|d| d.to_json_line() + "\n").collect();
    write(out, "diagnostics.jsonl", &diagnostics)?;
    write_json(out, "model.json", &model.summary())
}

fn simulate_cmd(out: &Path, cfg: &Config, inp: &Path, hours: Option<f64>, dt: Option<f64>, tau: Option<f64>) -> Outcome {
    let hours = hours.unwrap_or(cfg.simulation.horizon_hours);
    let dt = dt.unwrap_or(cfg.simulation.dt_s);
    positive("--hours", hours)?;
    positive("--dt", dt)?;
    if let Some(t) = tau {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Failure::Usage(format!("--tau must be non-negative, got {t}")));
        }
    }
    let (net, model) = load(cfg, inp)?;
    let settings = cfg.solver_settings();
    let horizon = hours * 3600.0;
    let schedule = ScheduleInput::from_network(&model, &net, horizon)?;
    let smooth = smooth_controls(&schedule, tau.unwrap_or(0.0))?;
    let (u0, d0) = (smooth.controls(0.0), smooth.demands(0.0));
    let start = solve_wfp(&model, &model.tank_init_head, &u0, &d0, None, &settings)?;
    let x0 = consistent_init(&model, &start.state, &u0, &d0, &settings)?;
    let traj = simulate(&model, &x0, &smooth, horizon, dt, &settings)?;
    write(out, "trajectory.csv", &traj.to_table().to_csv_string())?;
    let mut meta = traj.metadata(&settings);
    meta["dt_s"] = json!(dt);
    meta["horizon_s"] = json!(horizon);
    meta["tau_s"] = json!(smooth.tau_s);
    meta["warnings"] = json!(validate(&net).iter().map(|d| d.message.clone()).collect::<Vec<_>>());
    write_json(out, "run.json", &meta)
}

fn steady(out: &Path, cfg: &Config, inp: &Path, hours: Option<f64>, dt: Option<f64>) -> Outcome {
    let hours = hours.unwrap_or(cfg.simulation.horizon_hours);
    let dt = dt.unwrap_or(cfg.switching.dt_epanet_s);
    positive("--hours", hours)?;
    positive("--dt", dt)?;
    let (net, model) = load(cfg, inp)?;
    let settings = cfg.solver_settings();
    let horizon = hours * 3600.0;
    let schedule = ScheduleInput::from_network(&model, &net, horizon)?;
    let (u0, d0) = (schedule.controls(0.0), schedule.demands(0.0));
    let eq = equilibrium_solve(&model, &u0, &d0, None, &settings)?;
    let names = wdn_dae::dae::Trajectory::column_names(
        &model.link_ids().map(str::to_string).collect::<Vec<_>>(),
        &model.node_ids,
    );
    let state: serde_json::Map<String, Value> =
        names.into_iter().zip(eq.state.flat()).map(|(k, v)| (k, json!(v))).collect();
    write_json(
        out,
        "equilibrium.json",
        &json!({"state": state, "residual": eq.residual, "iterations": eq.iterations}),
    )?;
    let eps = extended_period_sim(&model, &schedule, &model.tank_init_head, 0.0, horizon, dt, &settings)?;
    write(out, "steady.csv", &eps.to_table().to_csv_string())
}

fn linearize_cmd(out: &Path, cfg: &Config, inp: &Path) -> Outcome {
    let (_, _, op) = operating_point(cfg, inp)?;
    let st = stability_margin(&op.red);
    write(out, "weights.csv", &weights_csv(&op.lin))?;
    write(out, "spectrum.csv", &spectrum_csv(&st.spectrum))?;
    let floored: Vec<&str> = op
        .lin
        .link_ids
        .iter()
        .zip(&op.lin.floored)
        .filter(|(_, &f)| f)
        .map(|(id, _)| id.as_str())
        .collect();
    write_json(
        out,
        "linear.json",
        &json!({
            "n_states": op.lin.n_states(),
            "n_reduced": op.red.n_states(),
            "inputs": op.lin.input_names,
            "alpha_s": st.alpha_s,
            "floored_links": floored,
            "e_h": rows(&op.lin.e_h),
            "a_h": rows(&op.lin.a_h),
        }),
    )
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn screen(out: &Path, cfg: &Config, inp: &Path, delta: f64, eps: Option<f64>) -> Outcome {
    let eps = eps.unwrap_or(cfg.screening.eps_lin);
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Failure::Usage(format!("--eps must lie in (0, 1), got {eps}")));
    }
    if !delta.is_finite() {
        return Err(Failure::Usage(format!("--delta must be finite, got {delta}")));
    }
    let (_, model, op) = operating_point(cfg, inp)?;
    let r0 = cfg.screening.r0.unwrap_or(f64::INFINITY);
    let direction = global_roughness_direction(&model);
    let s = screen_linearization(&op, &direction, delta, eps, r0, &cfg.margin_settings())?;
    let mut v = to_value(&s);
    v["delta"] = json!(delta);
    write_json(out, "screening.json", &v)
}

fn rank(out: &Path, cfg: &Config, inp: &Path) -> Outcome {
    let (_, _, op) = operating_point(cfg, inp)?;
    let deltas = vec![cfg.ranking.delta_theta; op.n_params()];
    let rows = rank_parameters(&op, &deltas, &cfg.margin_settings())?;
    write(out, "ranking.csv", &ranking_csv(&rows))?;
    let k = cfg.ranking.top_k;
    let names = |v: &[wdn_dae::margins::ParameterRow]| v.iter().take(k).map(|r| r.name.clone()).collect::<Vec<_>>();
    write_json(
        out,
        "ranking.json",
        &json!({
            "stability": names(&rows),
            "controllability": names(&controllability_ranking(&rows)),
            "delta_theta": cfg.ranking.delta_theta,
        }),
    )
}

fn sweep(out: &Path, cfg: &Config, inp: &Path, by_schedule: bool) -> Outcome {
    let (net, model) = load(cfg, inp)?;
    let settings = cfg.solver_settings();
    let ms = cfg.margin_settings();
    let dc = &cfg.demand;
    let horizon = dc.horizon_hours * 3600.0;
    let schedule = ScheduleInput::from_network(&model, &net, horizon)?;
    let rows = if by_schedule {
        let points = schedule_points(&schedule, horizon, dc.dt_m_hours * 3600.0)?;
        sweep_points(&model, &points, &settings, &ms)
    } else {
        let levels = demand_levels(dc.range[0], dc.range[1], dc.samples);
        demand_sweep(&model, &schedule.controls(0.0), &schedule.demands(0.0), &levels, &settings, &ms)
    };
    write(out, "sweep.csv", &sweep_csv(&rows))
}

fn compare(
    out: &Path,
    cfg: &Config,
    a: &Path,
    b: &Path,
    inp: Option<&Path>,
    columns: Option<Vec<String>>,
) -> Outcome {
    let ta = TrajectoryTable::parse_csv(&read(a)?)?;
    let tb = TrajectoryTable::parse_csv(&read(b)?)?;
    let junction_heads = match inp {
        Some(p) => Some(junction_head_columns(&load(cfg, p)?.1)),
        None => None,
    };
    let opts = CompareOptions {
        state_subset: columns,
        junction_heads,
        supported: None,
    };
    let r = compare_trajectories(&ta, &tb, &opts)?;
    write(out, "error.csv", &r.error_csv())?;
    write(out, "band.csv", &r.band_csv())?;
    let mut summary = r.summary();
    summary["within_thresholds"] = json!(
        r.max_pj_error_m <= cfg.compare.max_pj_error_m && r.max_q_error_m3s <= cfg.compare.max_q_error_m3s
    );
    write_json(out, "summary.json", &summary)
}
