//! Parameter sensitivity, linearization screening, robustness margins, parameter
//! ranking, PBH margin and finite-horizon pump authority.
//!
//! Parameters are the multiplicative factors θ on [`HydraulicModel::theta`], with
//! θ = 1 at the nominal model. All perturbation norms are taken in factor space.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dae::{equilibrium_solve, residual_algebraic, residual_differential, HydraulicState, SolverSettings};
use crate::error::{Error, Result};
use crate::linearization::{
    eigenvalues, linearize, reduce, stability_margin, LinearDaeModel, ReducedLinearModel,
};
use crate::network::{ControlState, HydraulicModel, ParamKind};
use crate::schedule::{Demands, Inputs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginSettings {
    /// Relative finite-difference step on the factors.
    pub h_theta: f64,
    /// Step of the second difference that estimates L_A.
    pub h_lipschitz: f64,
    /// Single-parameter perturbation |δθ_i| used by the ranking.
    pub delta_theta: f64,
    /// Kalman horizon; `None` uses the reduced state dimension.
    pub kalman_horizon: Option<usize>,
    pub robustness_samples: usize,
    pub robustness_scale: f64,
    pub seed: u64,
    pub eps_lin: f64,
    pub r0: f64,
    pub flow_scale: f64,
    pub head_scale: f64,
    /// Reachability step τ and horizon H in seconds.
    pub authority_step: f64,
    pub authority_horizon: f64,
}

impl Default for MarginSettings {
    fn default() -> Self {
        MarginSettings {
            h_theta: 1e-4,
            h_lipschitz: 1e-2,
            delta_theta: 0.05,
            kalman_horizon: None,
            robustness_samples: 20,
            robustness_scale: 0.05,
            seed: 7,
            eps_lin: 0.1,
            r0: f64::INFINITY,
            flow_scale: 1.0,
            head_scale: 10.0,
            authority_step: 300.0,
            authority_horizon: 7200.0,
        }
    }
}

/// Nominal equilibrium with its linearization and reduction.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub model: HydraulicModel,
    pub controls: ControlState,
    pub demands: Demands,
    pub equilibrium: HydraulicState,
    pub lin: LinearDaeModel,
    pub red: ReducedLinearModel,
    pub settings: SolverSettings,
}

impl OperatingPoint {
    pub fn new(
        model: &HydraulicModel,
        controls: &ControlState,
        demands: &Demands,
        settings: &SolverSettings,
    ) -> Result<OperatingPoint> {
        let eq = equilibrium_solve(model, controls, demands, None, settings)?;
        let lin = linearize(model, &eq.state, controls, demands, settings.equilibrium_tol)?;
        let red = reduce(&lin)?;
        Ok(OperatingPoint {
            model: model.clone(),
            controls: controls.clone(),
            demands: demands.clone(),
            equilibrium: eq.state,
            lin,
            red,
            settings: settings.clone(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.model.theta.len()
    }

    pub fn nominal_factors(&self) -> Vec<f64> {
        vec![1.0; self.n_params()]
    }

    /// Equilibrium of the model with the given factors, started from the nominal one.
    pub fn solve_at(&self, factors: &[f64]) -> Result<(HydraulicModel, HydraulicState)> {
        let m = self.model.with_factors(factors);
        let eq = equilibrium_solve(&m, &self.controls, &self.demands, Some(&self.equilibrium), &self.settings)?;
        Ok((m, eq.state))
    }

    pub fn linearize_at(&self, factors: &[f64]) -> Result<LinearDaeModel> {
        let (m, x) = self.solve_at(factors)?;
        linearize(&m, &x, &self.controls, &self.demands, self.settings.equilibrium_tol)
    }

    fn offset(&self, direction: &[f64], t: f64) -> Vec<f64> {
        direction.iter().map(|v| 1.0 + t * v).collect()
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

fn sorted_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Smallest singular value of a matrix with at least as many columns as rows; zero
/// when there are fewer columns than rows (the rows cannot be spanned).
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.ncols() < m.nrows() {
        return 0.0;
    }
    *sorted_singular_values(m).last().unwrap()
}

fn complex_sigma_min(m: &DMatrix<Complex<f64>>) -> f64 {
    if m.nrows() == 0 || m.ncols() < m.nrows() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// State vector (q, p_J, p_A).
pub fn state_vector(x: &HydraulicState) -> DVector<f64> {
    DVector::from_iterator(
        x.q.len() + x.p_j.len() + x.p_a.len(),
        x.q.iter().chain(&x.p_j).chain(&x.p_a).cloned(),
    )
}

/// Right-hand side f with E_h ẋ = f(x); its Jacobian in (q, p_J, p_A) is A_h.
pub fn graph_residual(model: &HydraulicModel, x: &HydraulicState, u: &ControlState, d: &Demands) -> DVector<f64> {
    let nl = model.n_links();
    let nj = model.n_junctions;
    let m = residual_differential(model, x, u, d);
    let h = residual_algebraic(model, x, u, d);
    let mut out = DVector::zeros(nl + nj + model.n_tanks);
    for e in 0..nl {
        out[e] = m[e] / model.gamma[e];
    }
    for j in 0..nj {
        out[nl + j] = h[j];
    }
    for a in 0..model.n_tanks {
        out[nl + nj + a] = m[nl + a] * model.tank_area[a];
    }
    out
}

/// S_θ = −J_x⁻¹ J_θ, with J_θ by central differences of the residual in each factor.
pub fn equilibrium_sensitivity(op: &OperatingPoint, h_theta: f64) -> Result<DMatrix<f64>> {
    let jx = &op.lin.a_h;
    let sv = sorted_singular_values(jx);
    let rcond = match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
        _ => 0.0,
    };
    if !(rcond > 1e-15) {
        return Err(Error::SingularJx);
    }
    let n = op.n_params();
    let cols: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut plus = op.nominal_factors();
            let mut minus = op.nominal_factors();
            plus[i] += h_theta;
            minus[i] -= h_theta;
            let rp = graph_residual(&op.model.with_factors(&plus), &op.equilibrium, &op.controls, &op.demands);
            let rm = graph_residual(&op.model.with_factors(&minus), &op.equilibrium, &op.controls, &op.demands);
            (rp - rm) / (2.0 * h_theta)
        })
        .collect();
    let j_theta = DMatrix::from_columns(&cols);
    let lu = jx.clone().lu();
    let s = lu.solve(&j_theta).ok_or(Error::SingularJx)?;
    Ok(-s)
}

/// x*(1 + Δθ) − x̄ on (q, p_J, p_A).
pub fn equilibrium_shift(op: &OperatingPoint, dtheta: &[f64]) -> Result<DVector<f64>> {
    let f: Vec<f64> = dtheta.iter().map(|d| 1.0 + d).collect();
    let (_, x) = op.solve_at(&f)?;
    Ok(state_vector(&x) - state_vector(&op.equilibrium))
}

/// ‖x*(1 + Δθ) − x̄ − S Δθ‖₂.
pub fn equilibrium_remainder(op: &OperatingPoint, s: &DMatrix<f64>, dtheta: &[f64]) -> Result<f64> {
    let shift = equilibrium_shift(op, dtheta)?;
    Ok((shift - s * DVector::from_column_slice(dtheta)).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSensitivity {
    /// Unit direction in factor space.
    pub direction: Vec<f64>,
    pub d_a_h: DMatrix<f64>,
    pub d_a_red: DMatrix<f64>,
    pub d_b_red: DMatrix<f64>,
    /// ‖∂²A_h/∂t²‖₂ from a second difference with step `h_lipschitz`.
    pub l_a: f64,
}

fn unit(direction: &[f64]) -> Result<Vec<f64>> {
    let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidArgument("perturbation direction must be nonzero".into()));
    }
    Ok(direction.iter().map(|v| v / n).collect())
}

/// Central-difference derivatives of A_h, A_red and B_red along a direction in factor space.
pub fn matrix_sensitivity(
    op: &OperatingPoint,
    direction: &[f64],
    h_theta: f64,
    h_lipschitz: f64,
) -> Result<MatrixSensitivity> {
    let v = unit(direction)?;
    let eval = |t: f64| -> Result<(LinearDaeModel, ReducedLinearModel)> {
        let lin = op.linearize_at(&op.offset(&v, t))?;
        let red = reduce(&lin)?;
        Ok((lin, red))
    };
    let ((lp, rp), (lm, rm)) = (eval(h_theta)?, eval(-h_theta)?);
    let ((lp2, _), (lm2, _)) = (eval(h_lipschitz)?, eval(-h_lipschitz)?);
    let two_h = 2.0 * h_theta;
    let second = (&lp2.a_h - &op.lin.a_h * 2.0 + &lm2.a_h) / (h_lipschitz * h_lipschitz);
    Ok(MatrixSensitivity {
        direction: v,
        d_a_h: (&lp.a_h - &lm.a_h) / two_h,
        d_a_red: (&rp.a_red - &rm.a_red) / two_h,
        d_b_red: (&rp.b_red - &rm.b_red) / two_h,
        l_a: spectral_norm(&second),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemainderRow {
    /// Step length t along the unit direction (= ‖Δθ‖).
    pub delta: f64,
    /// ‖A_h(θ̄ + tv) − A_h(θ̄)‖₂.
    pub true_shift: f64,
    /// ‖A_h(θ̄ + tv) − A_h(θ̄) − t ∂_v A_h‖₂.
    pub residual: f64,
    /// residual / true_shift.
    pub relative_residual: f64,
    /// residual / ‖A_h(θ̄)‖₂.
    pub residual_to_nominal: f64,
}

/// First-order prediction error of A_h at step `delta` along the sensitivity direction.
pub fn matrix_remainder(op: &OperatingPoint, sens: &MatrixSensitivity, delta: f64) -> Result<RemainderRow> {
    let lin = op.linearize_at(&op.offset(&sens.direction, delta))?;
    let shift = &lin.a_h - &op.lin.a_h;
    let true_shift = spectral_norm(&shift);
    let residual = spectral_norm(&(shift - &sens.d_a_h * delta));
    Ok(RemainderRow {
        delta,
        true_shift,
        residual,
        relative_residual: if true_shift > 0.0 { residual / true_shift } else { 0.0 },
        residual_to_nominal: residual / spectral_norm(&op.lin.a_h),
    })
}

/// r_lin = min{r₀, √(2 ε_lin ‖A_h‖ / L_A)}.
pub fn certified_radius(eps_lin: f64, norm_a_h: f64, l_a: f64, r0: f64) -> f64 {
    let r = if l_a > 0.0 {
        (2.0 * eps_lin * norm_a_h / l_a).sqrt()
    } else {
        f64::INFINITY
    };
    r.min(r0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Screening {
    pub accept: bool,
    pub r_lin: f64,
    pub delta_norm: f64,
    pub eps_lin: f64,
    pub norm_a_h: f64,
    pub l_a: f64,
    pub true_shift: f64,
    pub residual: f64,
    pub relative_residual: f64,
    pub residual_to_nominal: f64,
    /// ‖x*(θ̄ + Δθ) − x̄ − S_θ Δθ‖₂.
    pub equilibrium_residual: f64,
    pub recommendation: String,
}

/// Screens the perturbation Δθ = δ·`direction` against the certified radius.
pub fn screen_linearization(
    op: &OperatingPoint,
    direction: &[f64],
    delta: f64,
    eps_lin: f64,
    r0: f64,
    ms: &MarginSettings,
) -> Result<Screening> {
    if !(eps_lin > 0.0 && eps_lin < 1.0) {
        return Err(Error::InvalidArgument(format!("eps_lin {eps_lin} must lie in (0, 1)")));
    }
    let dtheta: Vec<f64> = direction.iter().map(|v| v * delta).collect();
    let delta_norm = dtheta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_a_h = spectral_norm(&op.lin.a_h);
    if delta_norm == 0.0 {
        return Ok(Screening {
            accept: true,
            r_lin: r0,
            delta_norm,
            eps_lin,
            norm_a_h,
            l_a: 0.0,
            true_shift: 0.0,
            residual: 0.0,
            relative_residual: 0.0,
            residual_to_nominal: 0.0,
            equilibrium_residual: 0.0,
            recommendation: "keep nominal linearization".into(),
        });
    }
    let s = equilibrium_sensitivity(op, ms.h_theta)?;
    let sens = matrix_sensitivity(op, direction, ms.h_theta, ms.h_lipschitz)?;
    let r_lin = certified_radius(eps_lin, norm_a_h, sens.l_a, r0);
    let row = matrix_remainder(op, &sens, delta_norm * delta.signum())?;
    let accept = delta_norm <= r_lin;
    Ok(Screening {
        accept,
        r_lin,
        delta_norm,
        eps_lin,
        norm_a_h,
        l_a: sens.l_a,
        true_shift: row.true_shift,
        residual: row.residual,
        relative_residual: row.relative_residual,
        residual_to_nominal: row.residual_to_nominal,
        equilibrium_residual: equilibrium_remainder(op, &s, &dtheta)?,
        recommendation: if accept {
            "keep nominal linearization".into()
        } else {
            "relinearize at the perturbed parameters".into()
        },
    })
}

/// Direction that scales every pipe roughness together.
pub fn global_roughness_direction(model: &HydraulicModel) -> Vec<f64> {
    model
        .theta
        .iter()
        .map(|p| if p.kind == ParamKind::Roughness { 1.0 } else { 0.0 })
        .collect()
}

/// K_N = [B, AB, …, A^{N−1}B].
pub fn kalman_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let m = b.ncols();
    let mut k = DMatrix::zeros(a.nrows(), m * n);
    let mut block = b.clone();
    for i in 0..n {
        k.view_mut((0, i * m), (a.nrows(), m)).copy_from(&block);
        block = a * block;
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanMargin {
    pub k: DMatrix<f64>,
    pub sigma_c: f64,
    pub horizon: usize,
}

pub fn kalman_margin(red: &ReducedLinearModel, horizon: Option<usize>) -> KalmanMargin {
    let n = horizon.unwrap_or(red.n_states()).max(1);
    let k = kalman_matrix(&red.a_red, &red.b_red, n);
    KalmanMargin {
        sigma_c: sigma_min(&k),
        k,
        horizon: n,
    }
}

/// κ(V) = ‖V‖‖V⁻¹‖ for unit-column eigenvectors; `None` when `a` is not
/// numerically diagonalizable.
pub fn eigenvector_condition(a: &DMatrix<f64>) -> Option<f64> {
    let n = a.nrows();
    if n == 0 {
        return Some(1.0);
    }
    let lambda = eigenvalues(a);
    let scale = spectral_norm(a).max(1e-300);
    let ac = a.map(|v| Complex::new(v, 0.0));
    let mut v = DMatrix::<Complex<f64>>::zeros(n, n);
    let mut col = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && (lambda[j] - lambda[i]).norm() <= 1e-8 * scale {
            j += 1;
        }
        let mult = j - i;
        let centre = lambda[i..j].iter().sum::<Complex<f64>>() / mult as f64;
        let shifted = &ac - DMatrix::<Complex<f64>>::identity(n, n) * centre;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
        if svd.singular_values[order[mult - 1]] > 1e-6 * scale {
            return None;
        }
        for &k in &order[..mult] {
            let row = v_t.row(k).adjoint();
            let norm = row.norm();
            v.set_column(col, &(row / Complex::new(norm, 0.0)));
            col += 1;
        }
        i = j;
    }
    let s = v.svd(false, false).singular_values;
    let (hi, lo) = (s.max(), s.iter().cloned().fold(f64::INFINITY, f64::min));
    if lo <= 1e-14 * hi {
        None
    } else {
        Some(hi / lo)
    }
}

/// Bauer-Fike check for A + ΔA: returns (max over μ of the distance to the nearest
/// eigenvalue of A, κ(V)‖ΔA‖₂).
pub fn bauer_fike(a: &DMatrix<f64>, da: &DMatrix<f64>) -> Option<(f64, f64)> {
    let kv = eigenvector_condition(a)?;
    let base = eigenvalues(a);
    let moved = eigenvalues(&(a + da));
    let dist = moved
        .iter()
        .map(|m| base.iter().map(|l| (m - l).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    Some((dist, kv * spectral_norm(da)))
}

/// |σ_min(K + ΔK) − σ_min(K)| and ‖ΔK‖₂.
pub fn sigma_min_perturbation(k: &DMatrix<f64>, dk: &DMatrix<f64>) -> (f64, f64) {
    ((sigma_min(&(k + dk)) - sigma_min(k)).abs(), spectral_norm(dk))
}

/// min over `eigs` of σ_min([λE − A, B]).
pub fn pbh_margin_pencil(e: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, eigs: &[Complex<f64>]) -> f64 {
    let n = e.nrows();
    let m = b.ncols();
    let mut best = f64::INFINITY;
    for &l in eigs {
        let mut c = DMatrix::<Complex<f64>>::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] = l * e[(i, j)] - a[(i, j)];
            }
            for j in 0..m {
                c[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        best = best.min(complex_sigma_min(&c));
    }
    best
}

/// Finite-mode PBH margin of the linear DAE; the finite modes are the spectrum of A_red.
pub fn pbh_margin(lin: &LinearDaeModel, red: &ReducedLinearModel) -> f64 {
    pbh_margin_pencil(&lin.e_h, &lin.a_h, &lin.b_u, &eigenvalues(&red.a_red))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Authority {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub r_h: DMatrix<f64>,
    pub g_h: f64,
    pub mean_singular_value: f64,
    pub steps: usize,
}

/// Reachability of (E − τA)x⁺ = Ex + τBu over `horizon`, scaled by S_x⁻¹.
pub fn reachability_authority(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tau: f64,
    horizon: f64,
    s_x: &[f64],
) -> Result<Authority> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("reachability step {tau} must be positive")));
    }
    let ratio = horizon / tau;
    let steps = ratio.round() as usize;
    if steps < 1 || (ratio - steps as f64).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} s is not a positive multiple of the step {tau} s"
        )));
    }
    let lu = (e - a * tau).lu();
    if lu.determinant() == 0.0 {
        return Err(Error::SingularStepMatrix);
    }
    let phi = lu.solve(e).ok_or(Error::SingularStepMatrix)?;
    let gamma = lu.solve(&(b * tau)).ok_or(Error::SingularStepMatrix)?;
    let m = b.ncols();
    let mut r_h = DMatrix::zeros(e.nrows(), m * steps);
    let mut block = gamma.clone();
    for k in 0..steps {
        r_h.view_mut((0, k * m), (e.nrows(), m)).copy_from(&block);
        block = &phi * block;
    }
    let mut scaled = r_h.clone();
    for (i, s) in s_x.iter().enumerate() {
        scaled.row_mut(i).scale_mut(1.0 / s);
    }
    let sv = sorted_singular_values(&scaled);
    let g_h = sv.first().cloned().unwrap_or(0.0);
    let mean = if sv.is_empty() { 0.0 } else { sv.iter().sum::<f64>() / sv.len() as f64 };
    Ok(Authority {
        phi,
        gamma,
        r_h,
        g_h,
        mean_singular_value: mean,
        steps,
    })
}

/// Diagonal of S_x: flows by `flow_scale`, heads by `head_scale`.
pub fn state_scaling(lin: &LinearDaeModel, flow_scale: f64, head_scale: f64) -> Vec<f64> {
    (0..lin.n_states())
        .map(|i| if i < lin.n_links() { flow_scale } else { head_scale })
        .collect()
}

/// Authority of the linear DAE with the settings' step, horizon and scaling.
pub fn dae_authority(lin: &LinearDaeModel, ms: &MarginSettings) -> Result<Authority> {
    reachability_authority(
        &lin.e_h,
        &lin.a_h,
        &lin.b_u,
        ms.authority_step,
        ms.authority_horizon,
        &state_scaling(lin, ms.flow_scale, ms.head_scale),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessSample {
    pub delta_norm: f64,
    pub d_a_red: f64,
    pub d_b_red: f64,
    pub d_k: f64,
    pub alpha_s: f64,
    pub sigma_min: f64,
    /// κ(V) c_A ‖Δθ‖ − |α_s(θ̄ + Δθ) − α_s|.
    pub slack_stability: f64,
    /// σ_min(K_N(θ̄ + Δθ)) − (σ_c − c_K (c_A + c_B)‖Δθ‖).
    pub slack_controllability: f64,
    /// ‖ΔK‖₂ − |σ_min(K + ΔK) − σ_min(K)|.
    pub slack_singular_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Robustness {
    pub alpha_s: f64,
    pub sigma_c: f64,
    pub kappa_v: Option<f64>,
    pub c_a: f64,
    pub c_b: f64,
    /// Smallest constant satisfying the Kalman bound over the sample.
    pub c_k: f64,
    /// Least-squares slope of ‖ΔK‖ against (c_A + c_B)‖Δθ‖.
    pub c_k_ls: f64,
    pub samples: Vec<RobustnessSample>,
    /// `None` when the eigenvector condition path is disabled.
    pub stability_bound_holds: Option<bool>,
    pub controllability_bound_holds: bool,
}

/// Roughness perturbations with entries uniform in [−scale, scale].
pub fn roughness_samples(model: &HydraulicModel, count: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            model
                .theta
                .iter()
                .map(|p| {
                    if p.kind == ParamKind::Roughness {
                        rng.random_range(-scale..=scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Evaluates the margin perturbation bounds over sampled perturbations Δθ.
///
/// c_A and c_B are the largest ratios ‖ΔA_red‖/‖Δθ‖ and ‖ΔB_red‖/‖Δθ‖ seen in the sample.
pub fn margin_robustness(op: &OperatingPoint, perturbations: &[Vec<f64>], horizon: Option<usize>) -> Result<Robustness> {
    let nominal = kalman_margin(&op.red, horizon);
    let alpha_s = stability_margin(&op.red).alpha_s;
    let kappa_v = eigenvector_condition(&op.red.a_red);
    struct Raw {
        norm: f64,
        da: f64,
        db: f64,
        dk: f64,
        alpha: f64,
        sigma: f64,
        sv_gap: f64,
    }
    let raw: Vec<Raw> = perturbations
        .par_iter()
        .map(|dt| -> Result<Raw> {
            let f: Vec<f64> = dt.iter().map(|d| 1.0 + d).collect();
            let red = reduce(&op.linearize_at(&f)?)?;
            let km = kalman_margin(&red, Some(nominal.horizon));
            let dk = &km.k - &nominal.k;
            let (gap, dk_norm) = sigma_min_perturbation(&nominal.k, &dk);
            Ok(Raw {
                norm: dt.iter().map(|v| v * v).sum::<f64>().sqrt(),
                da: spectral_norm(&(&red.a_red - &op.red.a_red)),
                db: spectral_norm(&(&red.b_red - &op.red.b_red)),
                dk: dk_norm,
                alpha: stability_margin(&red).alpha_s,
                sigma: km.sigma_c,
                sv_gap: dk_norm - gap,
            })
        })
        .collect::<Result<_>>()?;
    let ratio = |f: &dyn Fn(&Raw) -> f64| {
        raw.iter()
            .filter(|r| r.norm > 0.0)
            .map(|r| f(r) / r.norm)
            .fold(0.0, f64::max)
    };
    let c_a = ratio(&|r| r.da);
    let c_b = ratio(&|r| r.db);
    let cab = c_a + c_b;
    let (mut c_k, mut sxy, mut sxx) = (0.0f64, 0.0, 0.0);
    for r in raw.iter().filter(|r| r.norm > 0.0 && cab > 0.0) {
        let x = cab * r.norm;
        c_k = c_k.max(r.dk / x);
        sxy += x * r.dk;
        sxx += x * x;
    }
    let c_k_ls = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let samples: Vec<RobustnessSample> = raw
        .iter()
        .map(|r| RobustnessSample {
            delta_norm: r.norm,
            d_a_red: r.da,
            d_b_red: r.db,
            d_k: r.dk,
            alpha_s: r.alpha,
            sigma_min: r.sigma,
            slack_stability: kappa_v.map_or(f64::NAN, |kv| kv * c_a * r.norm - (r.alpha - alpha_s).abs()),
            slack_controllability: r.sigma - (nominal.sigma_c - c_k * cab * r.norm),
            slack_singular_value: r.sv_gap,
        })
        .collect();
    Ok(Robustness {
        alpha_s,
        sigma_c: nominal.sigma_c,
        kappa_v,
        c_a,
        c_b,
        c_k,
        c_k_ls,
        stability_bound_holds: kappa_v.map(|_| samples.iter().all(|s| s.slack_stability >= 0.0)),
        controllability_bound_holds: samples.iter().all(|s| s.slack_controllability >= 0.0),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterRow {
    pub index: usize,
    pub name: String,
    /// ‖∂A_h/∂θ_i‖₂, used by the remaining stability margin.
    pub g_a: f64,
    /// ‖∂A_red/∂θ_i‖₂, used with g_b by the remaining controllability margin.
    pub g_a_red: f64,
    /// ‖∂B_red/∂θ_i‖₂.
    pub g_b: f64,
    pub delta: f64,
    pub alpha_hat: f64,
    pub sigma_hat: f64,
}

/// Per-parameter sensitivities and certified remaining margins, in parameter order.
///
/// `deltas[i]` is the candidate |δθ_i|. `kappa_v` falls back to 1 when the nominal
/// A_red is not diagonalizable.
pub fn parameter_table(
    op: &OperatingPoint,
    deltas: &[f64],
    kappa_v: Option<f64>,
    c_k: f64,
    sigma_c: f64,
    h_theta: f64,
) -> Result<Vec<ParameterRow>> {
    if deltas.len() != op.n_params() {
        return Err(Error::InvalidArgument(format!(
            "{} perturbations for {} parameters",
            deltas.len(),
            op.n_params()
        )));
    }
    let alpha_s = stability_margin(&op.red).alpha_s;
    let kv = kappa_v.unwrap_or(1.0);
    (0..op.n_params())
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; op.n_params()];
            e[i] = 1.0;
            let eval = |t: f64| -> Result<(LinearDaeModel, ReducedLinearModel)> {
                let lin = op.linearize_at(&op.offset(&e, t))?;
                let red = reduce(&lin)?;
                Ok((lin, red))
            };
            let ((lp, rp), (lm, rm)) = (eval(h_theta)?, eval(-h_theta)?);
            let two_h = 2.0 * h_theta;
            let g_a = spectral_norm(&((&lp.a_h - &lm.a_h) / two_h));
            let g_a_red = spectral_norm(&((&rp.a_red - &rm.a_red) / two_h));
            let g_b = spectral_norm(&((&rp.b_red - &rm.b_red) / two_h));
            let delta = deltas[i].abs();
            Ok(ParameterRow {
                index: i,
                name: op.model.theta[i].name.clone(),
                g_a,
                g_a_red,
                g_b,
                delta,
                alpha_hat: alpha_s - kv * g_a * delta,
                sigma_hat: sigma_c - c_k * (g_a_red + g_b) * delta,
            })
        })
        .collect()
}

/// Row order by increasing remaining stability margin, ties by parameter index.
pub fn stability_ranking(rows: &[ParameterRow]) -> Vec<ParameterRow> {
    let mut out = rows.to_vec();
    out.sort_by(|a, b| a.alpha_hat.total_cmp(&b.alpha_hat).then(a.index.cmp(&b.index)));
    out
}

/// Row order by increasing remaining controllability margin, ties by parameter index.
pub fn controllability_ranking(rows: &[ParameterRow]) -> Vec<ParameterRow> {
    let mut out = rows.to_vec();
    out.sort_by(|a, b| a.sigma_hat.total_cmp(&b.sigma_hat).then(a.index.cmp(&b.index)));
    out
}

/// Parameter table for the given candidate perturbations, ranked for stability.
pub fn rank_parameters(op: &OperatingPoint, deltas: &[f64], ms: &MarginSettings) -> Result<Vec<ParameterRow>> {
    let rob = margin_robustness(
        op,
        &roughness_samples(&op.model, ms.robustness_samples, ms.robustness_scale, ms.seed),
        ms.kalman_horizon,
    )?;
    let rows = parameter_table(op, deltas, rob.kappa_v, rob.c_k, rob.sigma_c, ms.h_theta)?;
    Ok(stability_ranking(&rows))
}

pub fn ranking_csv(rows: &[ParameterRow]) -> String {
    let mut out = String::from("param,gA,gB,alpha_hat,sigma_hat\n");
    for r in rows {
        out.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.name, r.g_a, r.g_b, r.alpha_hat, r.sigma_hat));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepLevel {
    pub level: f64,
    pub alpha_s: f64,
    pub pbh: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub g_h: f64,
    pub mean_singular_value: f64,
    pub error: Option<String>,
}

impl SweepLevel {
    fn failed(level: f64, err: Error) -> SweepLevel {
        SweepLevel {
            level,
            alpha_s: f64::NAN,
            pbh: f64::NAN,
            kappa_min: f64::NAN,
            kappa_max: f64::NAN,
            g_h: f64::NAN,
            mean_singular_value: f64::NAN,
            error: Some(err.to_string()),
        }
    }
}

/// Margins at junction demands `base.junction × level`, one row per level in input order.
pub fn demand_sweep(
    model: &HydraulicModel,
    controls: &ControlState,
    base: &Demands,
    levels: &[f64],
    settings: &SolverSettings,
    ms: &MarginSettings,
) -> Vec<SweepLevel> {
    let points: Vec<SweepPoint> = levels
        .iter()
        .map(|&level| SweepPoint {
            label: level,
            controls: controls.clone(),
            demands: Demands {
                junction: base.junction.iter().map(|v| v * level).collect(),
                tank: base.tank.clone(),
            },
        })
        .collect();
    sweep_points(model, &points, settings, ms)
}

/// One operating point of a sweep; `label` is reported in the `level` column.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: f64,
    pub controls: ControlState,
    pub demands: Demands,
}

/// Operating points of a schedule sampled every `dt` seconds over `[0, horizon]`,
/// labelled by time in hours.
pub fn schedule_points(inputs: &dyn Inputs, horizon: f64, dt: f64) -> Result<Vec<SweepPoint>> {
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} and step {dt} must be finite, step positive"
        )));
    }
    let n = (horizon / dt + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            SweepPoint {
                label: t / 3600.0,
                controls: inputs.controls(t),
                demands: inputs.demands(t),
            }
        })
        .collect())
}

/// Margins at each operating point, in input order. Failing points are recorded, not fatal.
pub fn sweep_points(
    model: &HydraulicModel,
    points: &[SweepPoint],
    settings: &SolverSettings,
    ms: &MarginSettings,
) -> Vec<SweepLevel> {
    points
        .par_iter()
        .map(|pt| {
            let run = || -> Result<SweepLevel> {
                let op = OperatingPoint::new(model, &pt.controls, &pt.demands, settings)?;
                let active: Vec<f64> = (0..op.lin.n_links())
                    .filter(|&e| op.lin.active[e])
                    .map(|e| op.lin.kappa[e])
                    .collect();
                let auth = dae_authority(&op.lin, ms)?;
                Ok(SweepLevel {
                    level: pt.label,
                    alpha_s: stability_margin(&op.red).alpha_s,
                    pbh: pbh_margin(&op.lin, &op.red),
                    kappa_min: active.iter().cloned().fold(f64::INFINITY, f64::min),
                    kappa_max: active.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    g_h: auth.g_h,
                    mean_singular_value: auth.mean_singular_value,
                    error: None,
                })
            };
            run().unwrap_or_else(|e| SweepLevel::failed(pt.label, e))
        })
        .collect()
}

/// Evenly spaced levels over `[lo, hi]`.
pub fn demand_levels(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn sweep_csv(rows: &[SweepLevel]) -> String {
    let mut out = String::from("level,alpha_s,pbh,kappa_min,kappa_max,G_H\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.level, r.alpha_s, r.pbh, r.kappa_min, r.kappa_max, r.g_h
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub alpha_s: f64,
    pub sigma_c: f64,
    pub kalman_horizon: usize,
    pub pbh_margin: f64,
    pub kappa_v: Option<f64>,
    pub c_a: f64,
    pub c_b: f64,
    pub c_k: f64,
    pub c_k_ls: f64,
    pub r_lin: f64,
    pub l_a: f64,
    pub norm_a_h: f64,
    pub g_h: f64,
    pub mean_singular_value: f64,
    pub parameters: Vec<ParameterRow>,
    pub floored_links: Vec<String>,
    pub spectrum: Vec<(f64, f64)>,
    pub stability_bound_holds: Option<bool>,
    pub controllability_bound_holds: bool,
    pub settings: MarginSettings,
}

/// Full margin analysis at an operating point.
pub fn margin_report(op: &OperatingPoint, ms: &MarginSettings) -> Result<MarginReport> {
    let rob = margin_robustness(
        op,
        &roughness_samples(&op.model, ms.robustness_samples, ms.robustness_scale, ms.seed),
        ms.kalman_horizon,
    )?;
    let km = kalman_margin(&op.red, ms.kalman_horizon);
    let deltas = vec![ms.delta_theta; op.n_params()];
    let rows = parameter_table(op, &deltas, rob.kappa_v, rob.c_k, rob.sigma_c, ms.h_theta)?;
    let direction = global_roughness_direction(&op.model);
    let (l_a, norm_a_h) = if direction.iter().any(|&v| v != 0.0) {
        let sens = matrix_sensitivity(op, &direction, ms.h_theta, ms.h_lipschitz)?;
        (sens.l_a, spectral_norm(&op.lin.a_h))
    } else {
        (0.0, spectral_norm(&op.lin.a_h))
    };
    let auth = dae_authority(&op.lin, ms)?;
    let st = stability_margin(&op.red);
    Ok(MarginReport {
        alpha_s: st.alpha_s,
        sigma_c: km.sigma_c,
        kalman_horizon: km.horizon,
        pbh_margin: pbh_margin(&op.lin, &op.red),
        kappa_v: rob.kappa_v,
        c_a: rob.c_a,
        c_b: rob.c_b,
        c_k: rob.c_k,
        c_k_ls: rob.c_k_ls,
        r_lin: certified_radius(ms.eps_lin, norm_a_h, l_a, ms.r0),
        l_a,
        norm_a_h,
        g_h: auth.g_h,
        mean_singular_value: auth.mean_singular_value,
        parameters: stability_ranking(&rows),
        floored_links: (0..op.lin.n_links())
            .filter(|&e| op.lin.floored[e])
            .map(|e| op.lin.link_ids[e].clone())
            .collect(),
        spectrum: st.spectrum,
        stability_bound_holds: rob.stability_bound_holds,
        controllability_bound_holds: rob.controllability_bound_holds,
        settings: ms.clone(),
    })
}

/// JSON text with keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable report");
    serde_json::to_string_pretty(&v).expect("serializable value")
}
