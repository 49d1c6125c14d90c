//! Graph-form linearization E_h Δẋ = A_h Δx + B_u Δu + B_d Δd around an operating
//! point, its weighted Laplacian and energy, and the reduced ODE on the
//! consistency set.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::dae::{dae_residual_norm, HydraulicState};
use crate::error::{Error, Result};
use crate::network::{ControlState, HydraulicModel, LinkKind};
use crate::schedule::Demands;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDaeModel {
    pub e_h: DMatrix<f64>,
    pub a_h: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub kappa: Vec<f64>,
    /// Links whose slope was raised to the floor.
    pub floored: Vec<bool>,
    /// Links with a nonzero open fraction.
    pub active: Vec<bool>,
    pub n_j: DMatrix<f64>,
    pub n_a: DMatrix<f64>,
    pub n_r: DMatrix<f64>,
    pub gamma: Vec<f64>,
    pub tank_area: Vec<f64>,
    pub input_names: Vec<String>,
    pub link_ids: Vec<String>,
    pub state: HydraulicState,
    pub controls: ControlState,
    pub demands: Demands,
}

impl LinearDaeModel {
    pub fn n_links(&self) -> usize {
        self.kappa.len()
    }

    pub fn n_junctions(&self) -> usize {
        self.n_j.nrows()
    }

    pub fn n_tanks(&self) -> usize {
        self.n_a.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.e_h.nrows()
    }

    /// Full incidence over (junctions, tanks, reservoirs).
    pub fn incidence(&self) -> DMatrix<f64> {
        let (nj, na, nr) = (self.n_j.nrows(), self.n_a.nrows(), self.n_r.nrows());
        let mut n = DMatrix::zeros(nj + na + nr, self.n_links());
        n.rows_mut(0, nj).copy_from(&self.n_j);
        n.rows_mut(nj, na).copy_from(&self.n_a);
        n.rows_mut(nj + na, nr).copy_from(&self.n_r);
        n
    }
}

/// E_h and A_h for given link slopes.
pub fn graph_matrices(model: &HydraulicModel, kappa: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nl, nj, na) = (model.n_links(), model.n_junctions, model.n_tanks);
    let n = nl + nj + na;
    let (n_j, n_a, _) = model.incidence_blocks();
    let mut e = DMatrix::zeros(n, n);
    let mut a = DMatrix::zeros(n, n);
    for l in 0..nl {
        e[(l, l)] = 1.0 / model.gamma[l];
        a[(l, l)] = -kappa[l];
    }
    for t in 0..na {
        e[(nl + nj + t, nl + nj + t)] = model.tank_area[t];
    }
    a.view_mut((0, nl), (nl, nj)).copy_from(&n_j.transpose());
    a.view_mut((0, nl + nj), (nl, na)).copy_from(&n_a.transpose());
    a.view_mut((nl, 0), (nj, nl)).copy_from(&n_j);
    a.view_mut((nl + nj, 0), (na, nl)).copy_from(&(-&n_a));
    (e, a)
}

/// Input names in B_u column order: pump speeds, then valve open fractions.
pub fn input_links(model: &HydraulicModel) -> Vec<(usize, &'static str)> {
    let mut out: Vec<(usize, &'static str)> = model
        .links
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LinkKind::Pump)
        .map(|(e, _)| (e, "speed"))
        .collect();
    out.extend(
        model
            .links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LinkKind::Valve)
            .map(|(e, _)| (e, "open")),
    );
    out
}

/// Linearizes the DAE at an equilibrium (residual ≤ `tol`).
pub fn linearize(
    model: &HydraulicModel,
    x: &HydraulicState,
    u: &ControlState,
    d: &Demands,
    tol: f64,
) -> Result<LinearDaeModel> {
    let residual = dae_residual_norm(model, x, u, d);
    if !(residual <= tol) {
        return Err(Error::NotAnEquilibrium { residual });
    }
    Ok(linearize_unchecked(model, x, u, d))
}

/// Linearization at any state, without the equilibrium check.
pub fn linearize_unchecked(
    model: &HydraulicModel,
    x: &HydraulicState,
    u: &ControlState,
    d: &Demands,
) -> LinearDaeModel {
    let nl = model.n_links();
    let floor = model.options.slope_floor;
    let laws: Vec<_> = (0..nl).map(|e| model.link_law(e, x.q[e], u.link(e))).collect();
    let kappa: Vec<f64> = laws.iter().map(|l| l.slope.max(floor)).collect();
    let floored = laws.iter().map(|l| l.slope < floor).collect();
    let (e_h, a_h) = graph_matrices(model, &kappa);
    let inputs = input_links(model);
    let mut b_u = DMatrix::zeros(e_h.nrows(), inputs.len());
    for (c, &(e, what)) in inputs.iter().enumerate() {
        b_u[(e, c)] = match what {
            "speed" => -laws[e].d_speed,
            _ => -laws[e].d_open,
        };
    }
    let (nj, na) = (model.n_junctions, model.n_tanks);
    let mut b_d = DMatrix::zeros(e_h.nrows(), nj + na);
    for j in 0..nj {
        b_d[(nl + j, j)] = 1.0;
    }
    for t in 0..na {
        b_d[(nl + nj + t, nj + t)] = -1.0;
    }
    let (n_j, n_a, n_r) = model.incidence_blocks();
    LinearDaeModel {
        e_h,
        a_h,
        b_u,
        b_d,
        kappa,
        floored,
        active: u.open.iter().map(|&o| o > 0.0).collect(),
        n_j,
        n_a,
        n_r,
        gamma: model.gamma.clone(),
        tank_area: model.tank_area.clone(),
        input_names: inputs
            .iter()
            .map(|&(e, what)| format!("{what}:{}", model.links[e].id))
            .collect(),
        link_ids: model.link_ids().map(str::to_string).collect(),
        state: x.clone(),
        controls: u.clone(),
        demands: d.clone(),
    }
}

/// L_w = N K⁻¹ Nᵀ over the active links.
pub fn weighted_laplacian(lin: &LinearDaeModel) -> DMatrix<f64> {
    let n = lin.incidence();
    let mut l = DMatrix::zeros(n.nrows(), n.nrows());
    for e in 0..lin.n_links() {
        if !lin.active[e] {
            continue;
        }
        let col = n.column(e);
        l += (col * col.transpose()) / lin.kappa[e];
    }
    l
}

/// Number of eigenvalues of a symmetric PSD matrix below `1e-8·max(1, λ_max)`.
pub fn zero_eigenvalue_count(l: &DMatrix<f64>) -> usize {
    let ev = l.clone().symmetric_eigen().eigenvalues;
    let max = ev.iter().cloned().fold(0.0, f64::max);
    let thr = 1e-8 * max.max(1.0);
    ev.iter().filter(|v| v.abs() < thr).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Energy {
    pub v: f64,
    pub v_dot: f64,
}

/// V = ½ Δxᵀ E_h Δx and its rate −Δqᵀ K Δq along consistent motion.
pub fn incremental_energy(lin: &LinearDaeModel, dx: &DVector<f64>) -> Energy {
    let v = 0.5 * dx.dot(&(&lin.e_h * dx));
    let v_dot = -(0..lin.n_links()).map(|e| lin.kappa[e] * dx[e] * dx[e]).sum::<f64>();
    Energy { v, v_dot }
}

/// Δq projected onto null(N_J); Δp_J from the differentiated junction balance.
pub fn project_consistent(lin: &LinearDaeModel, dx: &DVector<f64>) -> Result<DVector<f64>> {
    let (nl, nj) = (lin.n_links(), lin.n_junctions());
    let mut out = dx.clone();
    if nj == 0 {
        return Ok(out);
    }
    let nn = &lin.n_j * lin.n_j.transpose();
    let chol = nn.cholesky().ok_or(Error::SingularAlgebraicPivot { rcond: 0.0 })?;
    let dq = dx.rows(0, nl).into_owned();
    let dq = &dq - lin.n_j.transpose() * chol.solve(&(&lin.n_j * &dq));
    out.rows_mut(0, nl).copy_from(&dq);
    let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(&lin.gamma));
    let s = &lin.n_j * &gamma * lin.n_j.transpose();
    let s_chol = s.cholesky().ok_or(Error::SingularAlgebraicPivot { rcond: 0.0 })?;
    let k = DMatrix::from_diagonal(&DVector::from_column_slice(&lin.kappa));
    let dpa = dx.rows(nl + nj, lin.n_tanks()).into_owned();
    let drive = -(&k * &dq) + lin.n_a.transpose() * dpa;
    let dpj = s_chol.solve(&(-(&lin.n_j * &gamma * drive)));
    out.rows_mut(nl, nj).copy_from(&dpj);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedLinearModel {
    pub a_red: DMatrix<f64>,
    pub b_red: DMatrix<f64>,
    pub d_red: DMatrix<f64>,
    /// Orthonormal basis Z of null(N_J); Δq = Z ξ + W Δd_J.
    pub lift: DMatrix<f64>,
    /// Particular flow response W = −Γ N_Jᵀ S⁻¹ to junction demand.
    pub demand_lift: DMatrix<f64>,
    pub pivot_rcond: f64,
}

impl ReducedLinearModel {
    pub fn n_states(&self) -> usize {
        self.a_red.nrows()
    }
}

/// Orthonormal basis for the null space of `m`.
pub fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let g = m.transpose() * m;
    let eig = g.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let thr = 1e-10 * max.max(1e-300);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= thr).collect();
    let mut z = eig.eigenvectors.select_columns(cols.iter());
    // Sign convention for reproducibility: largest-magnitude entry of each column positive.
    for mut c in z.column_iter_mut() {
        let (imax, _) = c.iter().enumerate().fold((0, 0.0), |acc, (i, v)| {
            if v.abs() > acc.1 + 1e-12 {
                (i, v.abs())
            } else {
                acc
            }
        });
        if c[imax] < 0.0 {
            c.neg_mut();
        }
    }
    z
}

/// Eliminates the junction heads and constrained flows: reduced state (ξ, Δp_A).
pub fn reduce(lin: &LinearDaeModel) -> Result<ReducedLinearModel> {
    let (nl, nj, na) = (lin.n_links(), lin.n_junctions(), lin.n_tanks());
    let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(&lin.gamma));
    let lambda = DMatrix::from_diagonal(&DVector::from_iterator(nl, lin.gamma.iter().map(|g| 1.0 / g)));
    let k = DMatrix::from_diagonal(&DVector::from_column_slice(&lin.kappa));
    let (w, pivot_rcond) = if nj > 0 {
        let s = &lin.n_j * &gamma * lin.n_j.transpose();
        let ev = s.clone().symmetric_eigen().eigenvalues;
        let max = ev.iter().cloned().fold(0.0, f64::max);
        let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        let rcond = if max > 0.0 { min / max } else { 0.0 };
        if rcond <= 1e-14 {
            return Err(Error::SingularAlgebraicPivot { rcond });
        }
        let s_inv = s.cholesky().ok_or(Error::SingularAlgebraicPivot { rcond })?.inverse();
        (-(&gamma * lin.n_j.transpose() * s_inv), rcond)
    } else {
        (DMatrix::zeros(nl, 0), 1.0)
    };
    let z = null_space(&lin.n_j);
    let r = z.ncols();
    let m = z.transpose() * &lambda * &z;
    let m_inv = m.cholesky().map(|c| c.inverse()).ok_or(Error::SingularAlgebraicPivot { rcond: 0.0 })?;
    let area_inv = DMatrix::from_diagonal(&DVector::from_iterator(na, lin.tank_area.iter().map(|a| 1.0 / a)));
    let n = r + na;
    let mut a_red = DMatrix::zeros(n, n);
    a_red.view_mut((0, 0), (r, r)).copy_from(&(-(&m_inv * z.transpose() * &k * &z)));
    a_red.view_mut((0, r), (r, na)).copy_from(&(&m_inv * z.transpose() * lin.n_a.transpose()));
    a_red.view_mut((r, 0), (na, r)).copy_from(&(-(&area_inv * &lin.n_a * &z)));
    let b_q = lin.b_u.rows(0, nl);
    let mut b_red = DMatrix::zeros(n, lin.b_u.ncols());
    b_red.view_mut((0, 0), (r, lin.b_u.ncols())).copy_from(&(&m_inv * z.transpose() * b_q));
    let mut d_red = DMatrix::zeros(n, nj + na);
    d_red.view_mut((0, 0), (r, nj)).copy_from(&(-(&m_inv * z.transpose() * &k * &w)));
    d_red.view_mut((r, 0), (na, nj)).copy_from(&(-(&area_inv * &lin.n_a * &w)));
    d_red.view_mut((r, nj), (na, na)).copy_from(&(-&area_inv));
    Ok(ReducedLinearModel {
        a_red,
        b_red,
        d_red,
        lift: z,
        demand_lift: w,
        pivot_rcond,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityMargin {
    pub alpha_s: f64,
    pub spectrum: Vec<(f64, f64)>,
    pub stable: bool,
}

fn sorted_spectrum(ev: impl IntoIterator<Item = Complex<f64>>) -> Vec<Complex<f64>> {
    let mut v: Vec<Complex<f64>> = ev.into_iter().collect();
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    v
}

/// Eigenvalues of a real square matrix sorted by real part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    sorted_spectrum(a.complex_eigenvalues().iter().cloned())
}

/// α_s = −max Re λ over the spectrum of A_red.
pub fn stability_margin(red: &ReducedLinearModel) -> StabilityMargin {
    let spec = eigenvalues(&red.a_red);
    let max_re = spec.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let alpha_s = if spec.is_empty() { f64::INFINITY } else { -max_re };
    StabilityMargin {
        alpha_s,
        spectrum: spec.iter().map(|l| (l.re, l.im)).collect(),
        stable: alpha_s > 0.0,
    }
}

/// Finite eigenvalues of the pencil (A, E) by shift-and-invert about `sigma`.
///
/// Eigenvalues μ of (A − σE)⁻¹E map to λ = σ + 1/μ; μ ≈ 0 are the infinite modes.
pub fn finite_generalized_eigenvalues(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma: f64,
) -> Result<Vec<Complex<f64>>> {
    let shifted = a - e * sigma;
    let op = shifted.lu().solve(e).ok_or(Error::SingularStepMatrix)?;
    let mu = op.complex_eigenvalues();
    let scale = mu.iter().map(|m| m.norm()).fold(0.0, f64::max);
    // Nilpotent blocks at μ = 0 split to O(√ε) under rounding.
    Ok(sorted_spectrum(
        mu.iter()
            .filter(|m| m.norm() > 1e-5 * scale.max(1e-300))
            .map(|m| Complex::new(sigma, 0.0) + Complex::new(1.0, 0.0) / m),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub energy: Vec<f64>,
}

/// Implicit Euler (E − Δt A) Δx_{k+1} = E Δx_k for the unforced linear DAE.
pub fn simulate_linear(
    lin: &LinearDaeModel,
    dx0: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<LinearTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
    }
    let steps = (horizon / dt).round() as usize;
    let lu = (&lin.e_h - &lin.a_h * dt).lu();
    if lu.determinant() == 0.0 {
        return Err(Error::SingularStepMatrix);
    }
    let mut x = dx0.clone();
    let mut out = LinearTrajectory {
        times: vec![0.0],
        states: vec![x.clone()],
        energy: vec![incremental_energy(lin, &x).v],
    };
    for k in 1..=steps {
        x = lu.solve(&(&lin.e_h * &x)).ok_or(Error::SingularStepMatrix)?;
        out.times.push(k as f64 * dt);
        out.energy.push(incremental_energy(lin, &x).v);
        out.states.push(x.clone());
    }
    Ok(out)
}

/// Finite-difference dV/dt over one implicit-Euler step of length `h` from `dx`,
/// paired with −Δqᵀ K Δq at the step end.
pub fn energy_rate_check(lin: &LinearDaeModel, dx: &DVector<f64>, h: f64) -> Result<(f64, f64)> {
    let traj = simulate_linear(lin, dx, h, h)?;
    let fd = (traj.energy[1] - traj.energy[0]) / h;
    let exact = incremental_energy(lin, &traj.states[1]).v_dot;
    Ok((fd, exact))
}

/// `link_id,kappa,weight` rows of the Laplacian weights.
pub fn weights_csv(lin: &LinearDaeModel) -> String {
    let mut s = String::from("link_id,kappa,weight\n");
    for (id, k) in lin.link_ids.iter().zip(&lin.kappa) {
        s.push_str(&format!("{id},{k:?},{:?}\n", 1.0 / k));
    }
    s
}

/// `re,im` rows of a spectrum.
pub fn spectrum_csv(spectrum: &[(f64, f64)]) -> String {
    let mut s = String::from("re,im\n");
    for (re, im) in spectrum {
        s.push_str(&format!("{re:?},{im:?}\n"));
    }
    s
}
