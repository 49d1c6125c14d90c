//! Quasi-steady reference solver: algebraic water-flow solves with tank heads as
//! boundary values, extended-period simulation with explicit tank updates, and
//! trajectory error reports.

use serde::Serialize;

use crate::dae::{flat_start, node_demand, HydraulicState, SolverSettings, Trajectory};
use crate::error::{Error, Result};
use crate::network::{ControlState, HydraulicModel, NodeKind};
use crate::schedule::{Demands, Inputs};
use crate::solver::{inf_norm, NodalSystem};
use crate::trajectory::TrajectoryTable;

#[derive(Debug, Clone, PartialEq)]
pub struct WfpSolution {
    /// Full state with the given tank heads and the model's reservoir heads.
    pub state: HydraulicState,
    pub iterations: usize,
    /// ∞-norm over link energy rows and junction balance rows.
    pub residual: f64,
    /// ‖N_J q + d^J‖_∞.
    pub junction_balance: f64,
}

/// Link rows Nᵀp − η and junction rows N_J q + d^J of the steady equations.
fn wfp_residual(model: &HydraulicModel, x: &HydraulicState, u: &ControlState, d: &Demands) -> (f64, f64) {
    let p = x.heads();
    let mut links = 0.0f64;
    let mut balance = d.junction.clone();
    for (e, l) in model.links.iter().enumerate() {
        let eta = model.link_law(e, x.q[e], u.link(e)).eta;
        links = links.max((p[l.from] - p[l.to] - eta).abs());
        if l.from < model.n_junctions {
            balance[l.from] += x.q[e];
        }
        if l.to < model.n_junctions {
            balance[l.to] -= x.q[e];
        }
    }
    let b = inf_norm(&balance);
    (links.max(b), b)
}

/// Steady flows and junction heads with the tank heads held fixed.
pub fn solve_wfp(
    model: &HydraulicModel,
    tank_heads: &[f64],
    u: &ControlState,
    d: &Demands,
    guess: Option<&HydraulicState>,
    settings: &SolverSettings,
) -> Result<WfpSolution> {
    if tank_heads.len() != model.n_tanks {
        return Err(Error::InvalidArgument(format!(
            "expected {} tank heads, got {}",
            model.n_tanks,
            tank_heads.len()
        )));
    }
    let start = guess.cloned().unwrap_or_else(|| flat_start(model));
    let nj = model.n_junctions;
    let mut p0 = start.heads();
    p0[nj..nj + model.n_tanks].copy_from_slice(tank_heads);
    p0[nj + model.n_tanks..].copy_from_slice(&model.reservoir_head);
    let out = NodalSystem::wfp(model, u, node_demand(model, d)).solve(&start.q, &p0, &settings.newton)?;
    let state = HydraulicState::from_heads(model, start.time, out.q, &out.p);
    let (residual, junction_balance) = wfp_residual(model, &state, u, d);
    if residual > settings.equilibrium_tol {
        return Err(Error::NewtonDivergence {
            iterations: out.iterations,
            residual,
            time: None,
        });
    }
    Ok(WfpSolution {
        state,
        iterations: out.iterations,
        residual,
        junction_balance,
    })
}

/// Net tank inflow rate ṗ^A = (A^A)⁻¹(−N_A q − d^A) at fixed flows.
pub fn tank_rates(model: &HydraulicModel, q: &[f64], d: &Demands) -> Vec<f64> {
    let nj = model.n_junctions;
    let mut net: Vec<f64> = d.tank.iter().map(|v| -v).collect();
    for (e, l) in model.links.iter().enumerate() {
        if model.node_kind(l.from) == NodeKind::Tank {
            net[l.from - nj] -= q[e];
        }
        if model.node_kind(l.to) == NodeKind::Tank {
            net[l.to - nj] += q[e];
        }
    }
    net.iter().zip(&model.tank_area).map(|(n, a)| n / a).collect()
}

/// Consecutive WFP solves every `dt` seconds from `t0`, with tank heads advanced by
/// forward Euler between solves. Inputs are sampled at each solve time without smoothing.
///
/// A failed solve is reported as `NewtonDivergence` carrying the time of that step.
pub fn extended_period_sim(
    model: &HydraulicModel,
    inputs: &dyn Inputs,
    initial_tank_heads: &[f64],
    t0: f64,
    horizon: f64,
    dt: f64,
    settings: &SolverSettings,
) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} and step {dt} must be finite, step positive"
        )));
    }
    let n = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let mut traj = Trajectory {
        link_ids: model.link_ids().map(str::to_string).collect(),
        node_ids: model.node_ids.clone(),
        states: Vec::with_capacity(n + 1),
        residuals: Vec::with_capacity(n + 1),
        iterations: Vec::with_capacity(n + 1),
        y_jumps: Vec::new(),
    };
    let mut p_a = initial_tank_heads.to_vec();
    let mut guess: Option<HydraulicState> = None;
    for k in 0..=n {
        let t = (t0 + k as f64 * dt).min(t0 + horizon);
        let (u, d) = (inputs.controls(t), inputs.demands(t));
        let sol = solve_wfp(model, &p_a, &u, &d, guess.as_ref(), settings).map_err(|e| match e {
            Error::NewtonDivergence {
                iterations,
                residual,
                ..
            } => Error::NewtonDivergence {
                iterations,
                residual,
                time: Some(t),
            },
            other => other,
        })?;
        let mut state = sol.state;
        state.time = t;
        if k < n {
            let h = (t0 + (k + 1) as f64 * dt).min(t0 + horizon) - t;
            for (p, r) in p_a.iter_mut().zip(tank_rates(model, &state.q, &d)) {
                *p += h * r;
            }
        }
        traj.residuals.push(sol.residual);
        traj.iterations.push(sol.iterations);
        guess = Some(state.clone());
        traj.states.push(state);
    }
    Ok(traj)
}

/// Columns `p_<id>` of the junction heads.
pub fn junction_head_columns(model: &HydraulicModel) -> Vec<String> {
    model.node_ids[..model.n_junctions].iter().map(|id| format!("p_{id}")).collect()
}

/// Link support predicate: a link counts at time t when its open fraction is positive
/// under every one of `inputs`.
pub fn open_in_all<'a>(
    model: &'a HydraulicModel,
    inputs: Vec<&'a dyn Inputs>,
) -> impl Fn(f64, &str) -> bool + 'a {
    move |t, id| {
        let Some(e) = model.link(id) else { return true };
        inputs.iter().all(|i| i.controls(t).open[e] > 0.0)
    }
}

pub const SUPPORTED_LINKS: &str = "links open in both trajectories at the compared instant";

#[derive(Default)]
pub struct CompareOptions<'a> {
    /// Columns to compare; all shared columns when `None`.
    pub state_subset: Option<Vec<String>>,
    /// Columns counted as junction heads; every shared `p_` column when `None`.
    pub junction_heads: Option<Vec<String>>,
    /// Whether link `id` is supported at time t; every link when `None`.
    pub supported: Option<&'a dyn Fn(f64, &str) -> bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub columns: Vec<String>,
    pub times: Vec<f64>,
    /// ‖e(t)‖₂ / n_x.
    pub l2_norm: Vec<f64>,
    /// ‖e(t)‖_∞ / n_x.
    pub linf_norm: Vec<f64>,
    pub rel_median: Vec<f64>,
    pub rel_p10: Vec<f64>,
    pub rel_p90: Vec<f64>,
    /// Largest absolute error of each column over time.
    pub component_max: Vec<f64>,
    pub max_pj_error_m: f64,
    pub max_pj_error_time: Option<f64>,
    pub max_q_error_m3s: f64,
    pub max_q_error_time: Option<f64>,
    /// Time of the largest ‖e(t)‖_∞.
    pub max_error_time: f64,
    /// Link-time samples left out of the flow maximum.
    pub unsupported_samples: usize,
}

/// Linear-interpolation percentile of sorted data, `p` in [0, 1].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Errors e = a − b on a's sample times inside the common span, with `b` resampled
/// by linear interpolation.
///
/// Relative errors divide by max(|b_i(t)|, 1e-3 max_t |b_i|), floored at 1e-12.
pub fn compare_trajectories(a: &TrajectoryTable, b: &TrajectoryTable, opts: &CompareOptions) -> Result<ErrorReport> {
    let (Some(&a0), Some(&a1), Some(&b0), Some(&b1)) =
        (a.times.first(), a.times.last(), b.times.first(), b.times.last())
    else {
        return Err(Error::GridMismatch);
    };
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    let tol = 1e-9 * (hi.abs().max(lo.abs()).max(1.0));
    let rows: Vec<usize> = (0..a.len())
        .filter(|&k| a.times[k] >= lo - tol && a.times[k] <= hi + tol)
        .collect();
    if lo > hi + tol || rows.is_empty() {
        return Err(Error::GridMismatch);
    }
    let names: Vec<String> = match &opts.state_subset {
        Some(s) => s.clone(),
        None => a.columns.iter().filter(|c| b.column(c).is_some()).cloned().collect(),
    };
    let mut idx = Vec::with_capacity(names.len());
    for n in &names {
        match (a.column(n), b.column(n)) {
            (Some(i), Some(j)) => idx.push((i, j)),
            _ => return Err(Error::InvalidArgument(format!("column `{n}` is not in both trajectories"))),
        }
    }
    if idx.is_empty() {
        return Err(Error::InvalidArgument("no shared state columns".into()));
    }
    let nx = idx.len() as f64;
    let is_pj: Vec<bool> = names
        .iter()
        .map(|n| match &opts.junction_heads {
            Some(j) => j.contains(n),
            None => n.starts_with("p_"),
        })
        .collect();
    let link_id: Vec<Option<&str>> = names.iter().map(|n| n.strip_prefix("q_")).collect();

    let times: Vec<f64> = rows.iter().map(|&k| a.times[k].clamp(lo, hi)).collect();
    let mut err = Vec::with_capacity(rows.len());
    let mut refs = Vec::with_capacity(rows.len());
    for (&k, &t) in rows.iter().zip(&times) {
        let rb = b.interpolate(t).ok_or(Error::GridMismatch)?;
        err.push(idx.iter().map(|&(i, j)| a.rows[k][i] - rb[j]).collect::<Vec<f64>>());
        refs.push(idx.iter().map(|&(_, j)| rb[j]).collect::<Vec<f64>>());
    }
    let floor: Vec<f64> = (0..idx.len())
        .map(|c| (1e-3 * refs.iter().map(|r| r[c].abs()).fold(0.0, f64::max)).max(1e-12))
        .collect();

    let mut report = ErrorReport {
        columns: names.clone(),
        times: times.clone(),
        l2_norm: Vec::new(),
        linf_norm: Vec::new(),
        rel_median: Vec::new(),
        rel_p10: Vec::new(),
        rel_p90: Vec::new(),
        component_max: vec![0.0; idx.len()],
        max_pj_error_m: 0.0,
        max_pj_error_time: None,
        max_q_error_m3s: 0.0,
        max_q_error_time: None,
        max_error_time: times[0],
        unsupported_samples: 0,
    };
    let mut worst = -1.0;
    for (s, e) in err.iter().enumerate() {
        let t = times[s];
        let l2 = e.iter().map(|v| v * v).sum::<f64>().sqrt() / nx;
        let linf = inf_norm(e) / nx;
        if linf > worst {
            worst = linf;
            report.max_error_time = t;
        }
        report.l2_norm.push(l2);
        report.linf_norm.push(linf);
        let mut rel: Vec<f64> = e
            .iter()
            .zip(&refs[s])
            .zip(&floor)
            .map(|((v, r), f)| v.abs() / r.abs().max(*f))
            .collect();
        rel.sort_by(f64::total_cmp);
        report.rel_median.push(percentile(&rel, 0.5));
        report.rel_p10.push(percentile(&rel, 0.1));
        report.rel_p90.push(percentile(&rel, 0.9));
        for (c, v) in e.iter().enumerate() {
            let v = v.abs();
            report.component_max[c] = report.component_max[c].max(v);
            if is_pj[c] && (report.max_pj_error_time.is_none() || v > report.max_pj_error_m) {
                report.max_pj_error_m = v;
                report.max_pj_error_time = Some(t);
            }
            if let Some(id) = link_id[c] {
                if opts.supported.is_some_and(|f| !f(t, id)) {
                    report.unsupported_samples += 1;
                } else if report.max_q_error_time.is_none() || v > report.max_q_error_m3s {
                    report.max_q_error_m3s = v;
                    report.max_q_error_time = Some(t);
                }
            }
        }
    }
    Ok(report)
}

impl ErrorReport {
    /// `time,l2_norm,linf_norm`.
    pub fn error_csv(&self) -> String {
        let mut s = String::from("time,l2_norm,linf_norm\n");
        for ((t, a), b) in self.times.iter().zip(&self.l2_norm).zip(&self.linf_norm) {
            s.push_str(&format!("{t:?},{a:?},{b:?}\n"));
        }
        s
    }

    /// Per-time relative error distribution, `time,median,p10,p90`.
    pub fn band_csv(&self) -> String {
        let mut s = String::from("time,median,p10,p90\n");
        for k in 0..self.times.len() {
            s.push_str(&format!(
                "{:?},{:?},{:?},{:?}\n",
                self.times[k], self.rel_median[k], self.rel_p10[k], self.rel_p90[k]
            ));
        }
        s
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "max_pj_error_m": self.max_pj_error_m,
            "max_q_error_m3s": self.max_q_error_m3s,
            "max_pj_error_time": self.max_pj_error_time,
            "max_q_error_time": self.max_q_error_time,
            "max_error_time": self.max_error_time,
            "n_x": self.columns.len(),
            "samples": self.times.len(),
            "unsupported_samples": self.unsupported_samples,
            "supported_links": SUPPORTED_LINKS,
        })
    }
}
