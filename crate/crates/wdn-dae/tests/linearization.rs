mod common;

use common::{load, model_from};
use nalgebra::{Complex, DMatrix, DVector};
use proptest::prelude::*;
use wdn_dae::dae::{equilibrium_solve, residual_differential, HydraulicState, SolverSettings};
use wdn_dae::linearization::*;
use wdn_dae::network::HydraulicModel;
use wdn_dae::schedule::Demands;

fn threenode_lin() -> (HydraulicModel, LinearDaeModel) {
    let (_, m) = load("threenodes.inp");
    let d = Demands {
        junction: vec![0.005],
        tank: vec![0.002],
    };
    let eq = equilibrium_solve(&m, &m.initial_controls, &d, None, &SolverSettings::default()).unwrap();
    let lin = linearize(&m, &eq.state, &m.initial_controls, &d, 1e-9).unwrap();
    (m, lin)
}

fn grid_lin() -> (HydraulicModel, LinearDaeModel) {
    let (_, m) = load("grid.inp");
    let d = Demands {
        junction: m.base_demand.clone(),
        tank: vec![0.0],
    };
    let eq = equilibrium_solve(&m, &m.initial_controls, &d, None, &SolverSettings::default()).unwrap();
    let lin = linearize(&m, &eq.state, &m.initial_controls, &d, 1e-9).unwrap();
    (m, lin)
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|v| Complex::new(v, 0.0))
}

#[test]
fn threenode_graph_matrices_entrywise() {
    let (_, m) = load("threenodes.inp");
    let (pump, pipe) = (m.link("9").unwrap(), m.link("1").unwrap());
    assert_eq!((pump, pipe), (1, 0));
    let (k9, k1) = (3.5, 0.25);
    let mut kappa = vec![0.0; 2];
    kappa[pump] = k9;
    kappa[pipe] = k1;
    let (e, a) = graph_matrices(&m, &kappa);
    // Link order is pipes then pumps; permute into (q9, q1, p2, p8).
    let perm = [pump, pipe, 2, 3];
    let pe = DMatrix::from_fn(4, 4, |i, j| e[(perm[i], perm[j])]);
    let pa = DMatrix::from_fn(4, 4, |i, j| a[(perm[i], perm[j])]);
    let expect_e = DMatrix::from_diagonal(&DVector::from_vec(vec![
        1.0 / m.gamma[pump],
        1.0 / m.gamma[pipe],
        0.0,
        m.tank_area[0],
    ]));
    #[rustfmt::skip]
    let expect_a = DMatrix::from_row_slice(4, 4, &[
        -k9, 0.0, -1.0, 0.0,
        0.0, -k1, 1.0, -1.0,
        -1.0, 1.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    ]);
    assert_eq!(pe, expect_e);
    assert_eq!(pa, expect_a);
}

#[test]
fn single_pipe_between_reservoirs_is_scalar() {
    let m = model_from("[RESERVOIRS]\n A 10\n B 5\n[PIPES]\n P A B 100 200 120 0 Open\n[OPTIONS]\n Units LPS\n");
    let eq = equilibrium_solve(&m, &m.initial_controls, &Demands::zero(&m), None, &SolverSettings::default())
        .unwrap();
    let lin = linearize(&m, &eq.state, &m.initial_controls, &Demands::zero(&m), 1e-9).unwrap();
    assert_eq!(lin.a_h.shape(), (1, 1));
    assert_eq!(lin.a_h[(0, 0)], -lin.kappa[0]);
}

#[test]
fn pump_speed_column_matches_finite_difference() {
    let (m, lin) = threenode_lin();
    let pump = m.link("9").unwrap();
    let h = 1e-6;
    let head_imbalance = |s: f64| {
        let mut u = lin.controls.clone();
        u.speed[pump] = s;
        residual_differential(&m, &lin.state, &u, &lin.demands)[pump] / m.gamma[pump]
    };
    let s = lin.controls.speed[pump];
    let fd = (head_imbalance(s + h) - head_imbalance(s - h)) / (2.0 * h);
    assert!((lin.b_u[(pump, 0)] - fd).abs() < 1e-6 * fd.abs().max(1.0));
    assert_eq!(lin.input_names, vec!["speed:9".to_string()]);
}

#[test]
fn single_edge_laplacian() {
    let m = model_from("[RESERVOIRS]\n A 10\n B 5\n[PIPES]\n P A B 100 200 120 0 Open\n[OPTIONS]\n Units LPS\n");
    let eq = equilibrium_solve(&m, &m.initial_controls, &Demands::zero(&m), None, &SolverSettings::default())
        .unwrap();
    let lin = linearize_unchecked(&m, &eq.state, &m.initial_controls, &Demands::zero(&m));
    let w = 1.0 / lin.kappa[0];
    let l = weighted_laplacian(&lin);
    assert_eq!(l, DMatrix::from_row_slice(2, 2, &[w, -w, -w, w]));
}

#[test]
fn threenode_laplacian_matches_hat_form() {
    let (m, lin) = threenode_lin();
    let (pump, pipe) = (m.link("9").unwrap(), m.link("1").unwrap());
    // Columns (q9, q1); rows (J2, T8, R1).
    let n_hat = DMatrix::from_row_slice(3, 2, &[-1.0, 1.0, 0.0, -1.0, 1.0, 0.0]);
    let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / lin.kappa[pump], 1.0 / lin.kappa[pipe]]));
    let expect = &n_hat * w * n_hat.transpose();
    let l = weighted_laplacian(&lin);
    assert!((l - expect).norm() < 1e-12);
}

#[test]
fn laplacian_flow_identity_on_grid() {
    let (_, lin) = grid_lin();
    let n = lin.incidence();
    let l = weighted_laplacian(&lin);
    let kinv = DMatrix::from_diagonal(&DVector::from_iterator(lin.n_links(), lin.kappa.iter().map(|k| 1.0 / k)));
    for seed in 0..5u64 {
        let dp = DVector::from_fn(n.nrows(), |i, _| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin());
        let lhs = &l * &dp;
        let rhs = &n * (&kinv * (n.transpose() * &dp));
        assert!((&lhs - &rhs).norm() <= 1e-12 * rhs.norm().max(1e-300));
    }
}

#[test]
fn energy_forms() {
    let (m, lin) = threenode_lin();
    let zero = DVector::zeros(lin.n_states());
    let e0 = incremental_energy(&lin, &zero);
    assert_eq!((e0.v, e0.v_dot), (0.0, 0.0));
    let (pump, pipe) = (m.link("9").unwrap(), m.link("1").unwrap());
    let mut dx = DVector::zeros(4);
    dx[pump] = 0.01;
    dx[pipe] = -0.02;
    dx[2] = 0.3;
    dx[3] = 0.5;
    let e = incremental_energy(&lin, &dx);
    let v = 0.5 / m.gamma[pump] * 1e-4 + 0.5 / m.gamma[pipe] * 4e-4 + 0.5 * m.tank_area[0] * 0.25;
    assert!((e.v - v).abs() < 1e-12 * v);
    let vd = -lin.kappa[pump] * 1e-4 - lin.kappa[pipe] * 4e-4;
    assert!((e.v_dot - vd).abs() < 1e-12 * vd.abs());
}

#[test]
fn no_junction_reduction_is_identity_lift() {
    let m = model_from(
        "[RESERVOIRS]\n R 10\n[TANKS]\n T 0 5 0 20 2 0\n[PIPES]\n P R T 100 100 120 0 Open\n[OPTIONS]\n Units LPS\n",
    );
    let x = HydraulicState {
        time: 0.0,
        q: vec![0.01],
        p_j: vec![],
        p_a: vec![5.0],
        p_r: vec![10.0],
    };
    let lin = linearize_unchecked(&m, &x, &m.initial_controls, &Demands::zero(&m));
    let red = reduce(&lin).unwrap();
    assert_eq!(red.lift, DMatrix::identity(1, 1));
    let lambda = 1.0 / m.gamma[0];
    let expect = DMatrix::from_row_slice(2, 2, &[-lin.kappa[0] / lambda, -1.0 / lambda, 1.0 / m.tank_area[0], 0.0]);
    assert!((red.a_red - expect).norm() < 1e-12);
}

fn check_pencil(lin: &LinearDaeModel) {
    let red = reduce(lin).unwrap();
    let a = eigenvalues(&red.a_red);
    let b = finite_generalized_eigenvalues(&lin.e_h, &lin.a_h, 0.0137).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).norm() <= 1e-8 * x.norm().max(1e-12), "{x} vs {y}");
    }
}

#[test]
fn reduced_spectrum_matches_pencil() {
    check_pencil(&threenode_lin().1);
    check_pencil(&grid_lin().1);
}

#[test]
fn reduced_model_reproduces_frequency_response() {
    let (_, lin) = grid_lin();
    let red = reduce(&lin).unwrap();
    let (nl, nj, na) = (lin.n_links(), lin.n_junctions(), lin.n_tanks());
    let r = red.lift.ncols();
    for &w in &[1e-4, 1e-2, 1.0, 30.0] {
        let s = Complex::new(0.0, w);
        let pencil = to_complex(&lin.e_h) * s - to_complex(&lin.a_h);
        let lu = pencil.lu();
        let mut inputs = lin.b_u.clone().resize_horizontally(lin.b_u.ncols() + lin.b_d.ncols(), 0.0);
        inputs.view_mut((0, lin.b_u.ncols()), lin.b_d.shape()).copy_from(&lin.b_d);
        let g = lu.solve(&to_complex(&inputs)).unwrap();
        let sys = DMatrix::<Complex<f64>>::identity(red.n_states(), red.n_states()) * s - to_complex(&red.a_red);
        let mut rin = red.b_red.clone().resize_horizontally(red.b_red.ncols() + red.d_red.ncols(), 0.0);
        rin.view_mut((0, red.b_red.ncols()), red.d_red.shape()).copy_from(&red.d_red);
        let gr = sys.lu().solve(&to_complex(&rin)).unwrap();
        // Flows through the lift plus the demand feedthrough; tank heads directly.
        let mut q = to_complex(&red.lift) * gr.rows(0, r);
        let nu = lin.b_u.ncols();
        q.view_mut((0, nu), (nl, nj)).add_assign(&to_complex(&red.demand_lift));
        let dq = (g.rows(0, nl) - &q).norm();
        let dp = (g.rows(nl + nj, na) - gr.rows(r, na)).norm();
        let scale = g.norm();
        assert!(dq <= 1e-8 * scale && dp <= 1e-8 * scale, "w={w}: {dq} {dp} {scale}");
    }
}

trait AddAssign {
    fn add_assign(&mut self, other: &DMatrix<Complex<f64>>);
}

impl AddAssign for nalgebra::DMatrixViewMut<'_, Complex<f64>> {
    fn add_assign(&mut self, other: &DMatrix<Complex<f64>>) {
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                self[(i, j)] += other[(i, j)];
            }
        }
    }
}

#[test]
fn scalar_margin() {
    let m = model_from("[RESERVOIRS]\n A 10\n B 5\n[PIPES]\n P A B 100 200 120 0 Open\n[OPTIONS]\n Units LPS\n");
    let eq = equilibrium_solve(&m, &m.initial_controls, &Demands::zero(&m), None, &SolverSettings::default())
        .unwrap();
    let lin = linearize_unchecked(&m, &eq.state, &m.initial_controls, &Demands::zero(&m));
    let st = stability_margin(&reduce(&lin).unwrap());
    let expect = lin.kappa[0] * m.gamma[0];
    assert!((st.alpha_s - expect).abs() < 1e-12 * expect);
    assert!(st.stable);
}

#[test]
fn anchored_fixtures_are_stable() {
    for lin in [threenode_lin().1, grid_lin().1] {
        let st = stability_margin(&reduce(&lin).unwrap());
        assert!(st.stable && st.alpha_s > 0.0);
    }
}

#[test]
fn linear_simulation_of_zero_stays_zero() {
    let (_, lin) = threenode_lin();
    let tr = simulate_linear(&lin, &DVector::zeros(4), 10.0, 1.0).unwrap();
    assert!(tr.states.iter().all(|x| x.norm() == 0.0));
}

#[test]
fn scalar_linear_decay_is_geometric() {
    let m = model_from("[RESERVOIRS]\n A 10\n B 5\n[PIPES]\n P A B 100 200 120 0 Open\n[OPTIONS]\n Units LPS\n");
    let eq = equilibrium_solve(&m, &m.initial_controls, &Demands::zero(&m), None, &SolverSettings::default())
        .unwrap();
    let lin = linearize_unchecked(&m, &eq.state, &m.initial_controls, &Demands::zero(&m));
    let dt = 0.7;
    let tr = simulate_linear(&lin, &DVector::from_element(1, 1e-3), 7.0, dt).unwrap();
    let ratio = 1.0 / (1.0 + dt * lin.kappa[0] * m.gamma[0]);
    for (k, x) in tr.states.iter().enumerate() {
        let expect = 1e-3 * ratio.powi(k as i32);
        assert!((x[0] - expect).abs() <= 1e-12 * expect);
    }
}

#[test]
fn threenode_energy_decays() {
    let (_, lin) = threenode_lin();
    let raw = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.4]);
    let dx0 = project_consistent(&lin, &raw).unwrap();
    let dx0 = &dx0 * (1e-3 / dx0.norm());
    let tr = simulate_linear(&lin, &dx0, 2000.0, 1.0).unwrap();
    for w in tr.energy.windows(2) {
        assert!(w[1] <= w[0] + 1e-10);
    }
    assert!(tr.energy.last().unwrap() < &tr.energy[0]);
}

#[test]
fn linearization_remainder_is_quadratic() {
    let (m, lin) = grid_lin();
    let nl = lin.n_links();
    let nj = lin.n_junctions();
    // Link rows of the nonlinear residual in head units, against A_h Δx.
    let eval = |dx: &DVector<f64>| {
        let mut x = lin.state.clone();
        for e in 0..nl {
            x.q[e] += dx[e];
        }
        for j in 0..nj {
            x.p_j[j] += dx[nl + j];
        }
        for t in 0..lin.n_tanks() {
            x.p_a[t] += dx[nl + nj + t];
        }
        let r = residual_differential(&m, &x, &lin.controls, &lin.demands);
        DVector::from_iterator(nl, (0..nl).map(|e| r[e] / m.gamma[e]))
    };
    let base = eval(&DVector::zeros(lin.n_states()));
    let dir = DVector::from_fn(lin.n_states(), |i, _| ((i * 7 + 3) as f64).sin() * if i < nl { 1e-3 } else { 1.0 });
    let mismatch = |eps: f64| {
        let dx = &dir * eps;
        let drift = eval(&dx) - &base;
        let pred = (&lin.a_h * &dx).rows(0, nl).into_owned();
        (drift - pred).norm()
    };
    let (a, b, c) = (mismatch(4e-2), mismatch(2e-2), mismatch(1e-2));
    for ratio in [a / b, b / c] {
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn laplacian_structure(scales in prop::collection::vec(0.01f64..100.0, 43), closed in prop::collection::vec(any::<bool>(), 43)) {
        let (m, mut lin) = grid_lin();
        for e in 0..lin.n_links() {
            lin.kappa[e] = scales[e % scales.len()];
            // Keep the pump and the tank link open; close a random subset of the rest.
            if m.links[e].id.starts_with('P') && closed[e % closed.len()] && e % 3 == 0 {
                lin.active[e] = false;
            }
        }
        let l = weighted_laplacian(&lin);
        let max_row: f64 = l.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
        prop_assert!(max_row <= 1e-12 * l.norm().max(1.0));
        let ev = l.clone().symmetric_eigen().eigenvalues;
        prop_assert!(ev.min() >= -1e-10 * ev.max().max(1.0));
        let (_, comps) = m.components(&lin.active);
        prop_assert_eq!(zero_eigenvalue_count(&l), comps);
    }
}

