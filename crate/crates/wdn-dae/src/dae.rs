//! The nonlinear hydraulic DAE: residuals, consistent initialization,
//! implicit-Euler integration, fixed-mode equilibria and switch kinks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{ControlState, HydraulicModel};
use crate::schedule::{Demands, Inputs};
use crate::solver::{inf_norm, l2_norm, NewtonSettings, NodalSystem};
use crate::trajectory::TrajectoryTable;

/// Rigid-water-column state: link flows and the three head blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HydraulicState {
    pub time: f64,
    pub q: Vec<f64>,
    pub p_j: Vec<f64>,
    pub p_a: Vec<f64>,
    pub p_r: Vec<f64>,
}

impl HydraulicState {
    /// Heads in node order (junctions, tanks, reservoirs).
    pub fn heads(&self) -> Vec<f64> {
        let mut p = self.p_j.clone();
        p.extend(&self.p_a);
        p.extend(&self.p_r);
        p
    }

    pub fn from_heads(model: &HydraulicModel, time: f64, q: Vec<f64>, p: &[f64]) -> HydraulicState {
        let (nj, na) = (model.n_junctions, model.n_tanks);
        HydraulicState {
            time,
            q,
            p_j: p[..nj].to_vec(),
            p_a: p[nj..nj + na].to_vec(),
            p_r: p[nj + na..].to_vec(),
        }
    }

    /// Differential coordinates z = (q, p_A).
    pub fn differential(&self) -> Vec<f64> {
        let mut z = self.q.clone();
        z.extend(&self.p_a);
        z
    }

    /// All coordinates in trajectory column order (flows, then heads).
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.extend(self.heads());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub newton: NewtonSettings,
    /// Required ∞-norm of (m, h) at an equilibrium.
    pub equilibrium_tol: f64,
    /// How many times a failed implicit-Euler step may be split in half.
    pub max_step_halvings: usize,
    /// Reciprocal condition below which the algebraic pivot counts as singular.
    pub regular_rcond: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            newton: NewtonSettings::default(),
            equilibrium_tol: 1e-9,
            max_step_halvings: 6,
            regular_rcond: 1e-12,
        }
    }
}

/// Withdrawals in node order, zero at reservoirs.
pub fn node_demand(model: &HydraulicModel, d: &Demands) -> Vec<f64> {
    let mut v = d.junction.clone();
    v.extend(&d.tank);
    v.resize(model.n_nodes(), 0.0);
    v
}

/// Flat-start guess: small positive flows, junctions at the mean anchor head.
pub fn flat_start(model: &HydraulicModel) -> HydraulicState {
    let anchors: Vec<f64> = model
        .reservoir_head
        .iter()
        .chain(&model.tank_init_head)
        .copied()
        .collect();
    let mean = if anchors.is_empty() {
        model.junction_elevation.iter().sum::<f64>() / model.n_junctions.max(1) as f64
    } else {
        anchors.iter().sum::<f64>() / anchors.len() as f64
    };
    HydraulicState {
        time: 0.0,
        q: vec![0.001; model.n_links()],
        p_j: vec![mean; model.n_junctions],
        p_a: model.tank_init_head.clone(),
        p_r: model.reservoir_head.clone(),
    }
}

/// m(x,u,d): γ∘(Nᵀp − η) on links, then (A^A)⁻¹(−N_A q − d^A) on tanks.
pub fn residual_differential(
    model: &HydraulicModel,
    x: &HydraulicState,
    u: &ControlState,
    d: &Demands,
) -> Vec<f64> {
    let p = x.heads();
    let nj = model.n_junctions;
    let mut out = vec![0.0; model.n_links() + model.n_tanks];
    let mut tank_net = d.tank.clone();
    for (e, l) in model.links.iter().enumerate() {
        let eta = model.link_law(e, x.q[e], u.link(e)).eta;
        out[e] = model.gamma[e] * (p[l.from] - p[l.to] - eta);
        if model.node_kind(l.from) == crate::network::NodeKind::Tank {
            tank_net[l.from - nj] += x.q[e];
        }
        if model.node_kind(l.to) == crate::network::NodeKind::Tank {
            tank_net[l.to - nj] -= x.q[e];
        }
    }
    for a in 0..model.n_tanks {
        out[model.n_links() + a] = -tank_net[a] / model.tank_area[a];
    }
    out
}

/// h(x,u,d): N_J q + d^J on junctions, then p^R − p̄^R.
pub fn residual_algebraic(
    model: &HydraulicModel,
    x: &HydraulicState,
    _u: &ControlState,
    d: &Demands,
) -> Vec<f64> {
    let nj = model.n_junctions;
    let mut out = d.junction.clone();
    for (e, l) in model.links.iter().enumerate() {
        if l.from < nj {
            out[l.from] += x.q[e];
        }
        if l.to < nj {
            out[l.to] -= x.q[e];
        }
    }
    out.extend(x.p_r.iter().zip(&model.reservoir_head).map(|(p, h)| p - h));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraicJacobian {
    /// ∂h/∂y over y = (p^J, p^R); the junction rows are identically zero.
    pub jacobian: DMatrix<f64>,
    /// N_J Γ N_Jᵀ over the active links: the pivot of the index-1 reduction.
    pub pivot: DMatrix<f64>,
    pub jacobian_rcond: f64,
    pub pivot_rcond: f64,
    pub regular: bool,
}

fn spd_rcond(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let ev = m.clone().symmetric_eigen().eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

fn junction_pivot(model: &HydraulicModel, active: impl Fn(usize) -> bool) -> DMatrix<f64> {
    let nj = model.n_junctions;
    let mut s = DMatrix::zeros(nj, nj);
    for (e, l) in model.links.iter().enumerate() {
        if !active(e) {
            continue;
        }
        let g = model.gamma[e];
        let ends = [(l.from, 1.0), (l.to, -1.0)];
        for &(i, si) in &ends {
            for &(j, sj) in &ends {
                if i < nj && j < nj {
                    s[(i, j)] += si * sj * g;
                }
            }
        }
    }
    s
}

/// Raw ∂_y h together with the reduced-system pivot used to decide regularity.
pub fn algebraic_jacobian(
    model: &HydraulicModel,
    _x: &HydraulicState,
    u: &ControlState,
    _d: &Demands,
    settings: &SolverSettings,
) -> AlgebraicJacobian {
    let (nj, nr) = (model.n_junctions, model.n_reservoirs);
    let mut jac = DMatrix::zeros(nj + nr, nj + nr);
    for r in 0..nr {
        jac[(nj + r, nj + r)] = 1.0;
    }
    let jacobian_rcond = if nj == 0 { 1.0 } else { 0.0 };
    let pivot = junction_pivot(model, |e| u.open[e] > 0.0);
    let pivot_rcond = spd_rcond(&pivot);
    AlgebraicJacobian {
        jacobian: jac,
        pivot,
        jacobian_rcond,
        pivot_rcond,
        regular: pivot_rcond > settings.regular_rcond,
    }
}

/// Completes a differential state (q, p^A) into a consistent state.
///
/// Flows are projected onto the junction balance in the Λ-weighted norm. Junction
/// heads then solve the differentiated balance N_J q̇ = 0, which is linear in p^J.
pub fn consistent_init(
    model: &HydraulicModel,
    z0: &HydraulicState,
    u: &ControlState,
    d: &Demands,
    settings: &SolverSettings,
) -> Result<HydraulicState> {
    let nj = model.n_junctions;
    let mut x = z0.clone();
    x.p_r = model.reservoir_head.clone();
    if nj == 0 {
        x.p_j.clear();
        return Ok(x);
    }
    let active_pivot = junction_pivot(model, |e| u.open[e] > 0.0);
    let rcond = spd_rcond(&active_pivot);
    if rcond <= settings.regular_rcond {
        return Err(Error::SingularAlgebraicJacobian { rcond });
    }
    let s = junction_pivot(model, |_| true);
    let chol = s
        .clone()
        .cholesky()
        .ok_or(Error::SingularAlgebraicJacobian { rcond: spd_rcond(&s) })?;
    let balance = DVector::from_vec(residual_algebraic(model, &x, u, d)[..nj].to_vec());
    let mu = chol.solve(&balance);
    for (e, l) in model.links.iter().enumerate() {
        let mut adj = 0.0;
        if l.from < nj {
            adj += mu[l.from];
        }
        if l.to < nj {
            adj -= mu[l.to];
        }
        x.q[e] -= model.gamma[e] * adj;
    }
    let mut p = x.heads();
    p[..nj].iter_mut().for_each(|v| *v = 0.0);
    let mut rhs = DVector::zeros(nj);
    for (e, l) in model.links.iter().enumerate() {
        let eta = model.link_law(e, x.q[e], u.link(e)).eta;
        // γ_e times the link's head imbalance with junction heads set to zero.
        let w = model.gamma[e] * (p[l.from] - p[l.to] - eta);
        if l.from < nj {
            rhs[l.from] -= w;
        }
        if l.to < nj {
            rhs[l.to] += w;
        }
    }
    x.p_j = chol.solve(&rhs).as_slice().to_vec();
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: HydraulicState,
    pub iterations: usize,
    pub residual: f64,
    pub substeps: usize,
}

fn ie_step_fixed(
    model: &HydraulicModel,
    x: &HydraulicState,
    u: &ControlState,
    d: &Demands,
    dt: f64,
    settings: &SolverSettings,
) -> Result<StepOutcome> {
    let nj = model.n_junctions;
    let mut sys = NodalSystem::steady(model, u, node_demand(model, d));
    sys.link_inertia = model.gamma.iter().map(|g| 1.0 / (g * dt)).collect();
    sys.q_ref = x.q.clone();
    let mut p0 = x.heads();
    for a in 0..model.n_tanks {
        sys.storage[nj + a] = model.tank_area[a] / dt;
        sys.p_ref[nj + a] = x.p_a[a];
    }
    let nja = nj + model.n_tanks;
    p0[nja..].copy_from_slice(&model.reservoir_head);
    let out = sys.solve(&x.q, &p0, &settings.newton)?;
    Ok(StepOutcome {
        state: HydraulicState::from_heads(model, x.time + dt, out.q, &out.p),
        iterations: out.iterations,
        residual: out.residual,
        substeps: 1,
    })
}

fn ie_step_split(
    model: &HydraulicModel,
    x: &HydraulicState,
    inputs: &dyn Inputs,
    dt: f64,
    settings: &SolverSettings,
    depth: usize,
) -> Result<StepOutcome> {
    let t1 = x.time + dt;
    match ie_step_fixed(model, x, &inputs.controls(t1), &inputs.demands(t1), dt, settings) {
        Ok(s) => Ok(s),
        Err(Error::NewtonDivergence { .. }) if depth < settings.max_step_halvings => {
            let a = ie_step_split(model, x, inputs, dt / 2.0, settings, depth + 1)?;
            let b = ie_step_split(model, &a.state, inputs, dt / 2.0, settings, depth + 1)?;
            Ok(StepOutcome {
                state: b.state,
                iterations: a.iterations + b.iterations,
                residual: a.residual.max(b.residual),
                substeps: a.substeps + b.substeps,
            })
        }
        Err(e) => Err(e),
    }
}

/// One implicit-Euler step from `x` to `x.time + dt`, inputs evaluated at the new time.
pub fn step_implicit_euler(
    model: &HydraulicModel,
    x: &HydraulicState,
    inputs: &dyn Inputs,
    dt: f64,
    settings: &SolverSettings,
) -> Result<StepOutcome> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
    }
    ie_step_split(model, x, inputs, dt, settings, 0).map_err(|e| match e {
        Error::NewtonDivergence {
            iterations,
            residual,
            ..
        } => Error::NewtonDivergence {
            iterations,
            residual,
            time: Some(x.time + dt),
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YJump {
    pub time: f64,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub link_ids: Vec<String>,
    pub node_ids: Vec<String>,
    pub states: Vec<HydraulicState>,
    /// Newton residual of each accepted step (zero for the initial state).
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    pub y_jumps: Vec<YJump>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.time).collect()
    }

    pub fn column_names(link_ids: &[String], node_ids: &[String]) -> Vec<String> {
        link_ids
            .iter()
            .map(|id| format!("q_{id}"))
            .chain(node_ids.iter().map(|id| format!("p_{id}")))
            .collect()
    }

    pub fn to_table(&self) -> TrajectoryTable {
        let mut t = TrajectoryTable::new(Self::column_names(&self.link_ids, &self.node_ids));
        for s in &self.states {
            t.push(s.time, s.flat());
        }
        t
    }

    pub fn metadata(&self, settings: &SolverSettings) -> serde_json::Value {
        serde_json::json!({
            "samples": self.states.len(),
            "newton_tol": settings.newton.tol,
            "newton_max_iter": settings.newton.max_iter,
            "max_step_residual": self.residuals.iter().cloned().fold(0.0, f64::max),
            "total_newton_iterations": self.iterations.iter().sum::<usize>(),
            "y_jumps": self.y_jumps,
        })
    }
}

/// Implicit-Euler trajectory over `[x0.time, x0.time + horizon]`; `x0` must be consistent.
pub fn simulate(
    model: &HydraulicModel,
    x0: &HydraulicState,
    inputs: &dyn Inputs,
    horizon: f64,
    dt: f64,
    settings: &SolverSettings,
) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} and step {dt} must be finite, step positive"
        )));
    }
    let t0 = x0.time;
    let n = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let switches = inputs.control_switches();
    let mut traj = Trajectory {
        link_ids: model.link_ids().map(str::to_string).collect(),
        node_ids: model.node_ids.clone(),
        states: vec![x0.clone()],
        residuals: vec![0.0],
        iterations: vec![0],
        y_jumps: Vec::new(),
    };
    let mut x = x0.clone();
    for k in 0..n {
        let t_next = (t0 + (k + 1) as f64 * dt).min(t0 + horizon);
        let h = t_next - x.time;
        for &ts in switches.iter().filter(|&&ts| ts > x.time && ts <= t_next) {
            let (u, d) = (inputs.controls(t_next), inputs.demands(t_next));
            if let Ok(y) = consistent_init(model, &x, &u, &d, settings) {
                let size = y
                    .p_j
                    .iter()
                    .zip(&x.p_j)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                traj.y_jumps.push(YJump { time: ts, size });
            }
        }
        let step = step_implicit_euler(model, &x, inputs, h, settings)?;
        x = step.state;
        x.time = t_next;
        traj.residuals.push(step.residual);
        traj.iterations.push(step.iterations);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub state: HydraulicState,
    pub iterations: usize,
    /// ∞-norm of (m, h) at the solution.
    pub residual: f64,
}

/// ∞-norm of the stacked DAE residuals (m, h).
pub fn dae_residual_norm(
    model: &HydraulicModel,
    x: &HydraulicState,
    u: &ControlState,
    d: &Demands,
) -> f64 {
    inf_norm(&residual_differential(model, x, u, d)).max(inf_norm(&residual_algebraic(model, x, u, d)))
}

/// Fixed-mode operating point with m = 0 and h = 0.
///
/// In a component without a reservoir, one tank head is held at its guess value
/// (tank heads are otherwise undetermined there).
pub fn equilibrium_solve(
    model: &HydraulicModel,
    u: &ControlState,
    d: &Demands,
    guess: Option<&HydraulicState>,
    settings: &SolverSettings,
) -> Result<Equilibrium> {
    let start = guess.cloned().unwrap_or_else(|| flat_start(model));
    let mut p0 = start.heads();
    let nja = model.n_junctions + model.n_tanks;
    p0[nja..].copy_from_slice(&model.reservoir_head);
    let sys = NodalSystem::steady(model, u, node_demand(model, d));
    let out = sys.solve(&start.q, &p0, &settings.newton)?;
    let state = HydraulicState::from_heads(model, start.time, out.q, &out.p);
    let residual = dae_residual_norm(model, &state, u, d);
    if residual > settings.equilibrium_tol {
        return Err(Error::NewtonDivergence {
            iterations: out.iterations,
            residual,
            time: None,
        });
    }
    Ok(Equilibrium {
        state,
        iterations: out.iterations,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchKink {
    pub left_rate: Vec<f64>,
    pub right_rate: Vec<f64>,
    pub kink_norm: f64,
    /// Largest single-sample change of z adjacent to the switch.
    pub step_change: f64,
}

/// One-sided difference quotients of z = (q, p^A) over `window` seconds either side of `t_s`.
pub fn detect_switch_kink(traj: &Trajectory, t_s: f64, window: f64) -> Result<SwitchKink> {
    let times = traj.times();
    let nearest = |t: f64| -> Option<usize> {
        let k = times.partition_point(|&s| s < t);
        [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&i| i < times.len())
            .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
    };
    let tol = 1e-6 * window.abs().max(1.0);
    let (Some(i0), Some(i1), Some(i2)) = (nearest(t_s - window), nearest(t_s), nearest(t_s + window))
    else {
        return Err(Error::InsufficientSamples("empty trajectory".into()));
    };
    if !(window > 0.0)
        || (times[i0] - (t_s - window)).abs() > tol
        || (times[i1] - t_s).abs() > tol
        || (times[i2] - (t_s + window)).abs() > tol
        || i0 == i1
        || i1 == i2
    {
        return Err(Error::InsufficientSamples(format!(
            "need samples at {} s, {} s and {} s",
            t_s - window,
            t_s,
            t_s + window
        )));
    }
    let z = |i: usize| traj.states[i].differential();
    let (z0, z1, z2) = (z(i0), z(i1), z(i2));
    let left: Vec<f64> = z1.iter().zip(&z0).map(|(a, b)| (a - b) / (times[i1] - times[i0])).collect();
    let right: Vec<f64> = z2.iter().zip(&z1).map(|(a, b)| (a - b) / (times[i2] - times[i1])).collect();
    let diff: Vec<f64> = right.iter().zip(&left).map(|(a, b)| a - b).collect();
    let near = |a: usize, b: usize| {
        let (za, zb) = (z(a), z(b));
        l2_norm(&za.iter().zip(&zb).map(|(x, y)| x - y).collect::<Vec<_>>())
    };
    let step_change = near(i1 - 1, i1).max(near(i1, i1 + 1));
    Ok(SwitchKink {
        left_rate: left,
        right_rate: right,
        kink_norm: l2_norm(&diff),
        step_change,
    })
}
