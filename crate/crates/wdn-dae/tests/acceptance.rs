//! Acceptance run: one PASS/FAIL line per criterion, each with its runtime budget.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{load, model_from, network_text, same_structure, PUMP_TOGGLE, SMALL_TANK};
use nalgebra::{DMatrix, DVector};
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdn_dae::dae::{
    consistent_init, detect_switch_kink, equilibrium_solve, flat_start, simulate, HydraulicState, SolverSettings,
};
use wdn_dae::inp::{parse_inp, write_inp};
use wdn_dae::linearization::*;
use wdn_dae::margins::*;
use wdn_dae::network::{HydraulicModel, LinkKind, ParamKind};
use wdn_dae::quasi_steady::solve_wfp;
use wdn_dae::schedule::{Demands, Inputs, ScheduleInput, Series};
use wdn_dae::smoothing::{convergence_sweep, smooth_controls, smoothstep, smoothstep_d1, smoothstep_d2};
use wdn_dae::Error;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn base_demands(m: &HydraulicModel) -> Demands {
    Demands {
        junction: m.base_demand.clone(),
        tank: vec![0.0; m.n_tanks],
    }
}

fn op_for(m: &HydraulicModel, d: &Demands) -> OperatingPoint {
    OperatingPoint::new(m, &m.initial_controls, d, &SolverSettings::default()).unwrap()
}

fn threenode_op() -> OperatingPoint {
    let (_, m) = load("threenodes.inp");
    op_for(
        &m,
        &Demands {
            junction: vec![0.005],
            tank: vec![0.002],
        },
    )
}

fn grid_op() -> OperatingPoint {
    let (_, m) = load("grid.inp");
    op_for(&m, &base_demands(&m))
}

fn smoothstep_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for (a, v) in [(0.0, 0.0), (1.0, 1.0)] {
        worst = worst
            .max((smoothstep(a).unwrap() - v).abs())
            .max(smoothstep_d1(a).abs())
            .max(smoothstep_d2(a).abs());
    }
    ensure!(worst <= 1e-12, "largest endpoint defect {worst:e}");
    Ok(format!("largest endpoint defect {worst:e}"))
}

fn fixture_fidelity() -> Outcome {
    let (_, m) = load("threenodes.inp");
    let col = |v: f64| DMatrix::from_element(1, 1, v);
    let (mj, ma, mr) = m.class_incidence(LinkKind::Pump);
    ensure!((mj.clone(), ma.clone(), mr.clone()) == (col(-1.0), col(0.0), col(1.0)), "pump blocks {mj} {ma} {mr}");
    let (pj, pa, pr) = m.class_incidence(LinkKind::Pipe);
    ensure!((pj.clone(), pa.clone(), pr.clone()) == (col(1.0), col(-1.0), col(0.0)), "pipe blocks {pj} {pa} {pr}");

    // An open GPV on the delivery branch shares the pipe's incidence column.
    let text = std::fs::read_to_string(common::data("threenodes.inp"))
        .unwrap()
        .replace("[CURVES]", "[VALVES]\n v  2  8  300  GPV  G\n\n[CURVES]\n G 0 0\n G 50 2");
    let mv = common::model_from(&text);
    let (vj, va, vr) = mv.class_incidence(LinkKind::Valve);
    ensure!((vj.clone(), va.clone(), vr.clone()) == (col(1.0), col(-1.0), col(0.0)), "valve blocks {vj} {va} {vr}");

    let (pump, pipe) = (m.link("9").unwrap(), m.link("1").unwrap());
    let (k9, k1) = (3.5, 0.25);
    let mut kappa = vec![0.0; 2];
    kappa[pump] = k9;
    kappa[pipe] = k1;
    let (e, a) = graph_matrices(&m, &kappa);
    let perm = [pump, pipe, 2, 3];
    let pe = DMatrix::from_fn(4, 4, |i, j| e[(perm[i], perm[j])]);
    let pa = DMatrix::from_fn(4, 4, |i, j| a[(perm[i], perm[j])]);
    let area = std::f64::consts::PI * 100.0 / 4.0;
    let expect_e = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / m.gamma[pump], 1.0 / m.gamma[pipe], 0.0, area]));
    #[rustfmt::skip]
    let expect_a = DMatrix::from_row_slice(4, 4, &[
        -k9, 0.0, -1.0, 0.0,
        0.0, -k1, 1.0, -1.0,
        -1.0, 1.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    ]);
    ensure!(pa == expect_a, "A_h differs:\n{pa}");
    ensure!((pe.clone() - expect_e).amax() <= 1e-12 * area, "E_h differs:\n{pe}");
    Ok("class blocks, valve column, E_h and A_h match".into())
}

fn equilibrium_quality() -> Outcome {
    let settings = SolverSettings::default();
    let (_, three) = load("threenodes.inp");
    let (_, grid) = load("grid.inp");
    ensure!(grid.n_nodes() >= 20, "grid has {} nodes", grid.n_nodes());
    let d3 = Demands {
        junction: vec![0.005],
        tank: vec![0.0],
    };
    let r3 = equilibrium_solve(&three, &three.initial_controls, &d3, None, &settings).map_err(|e| e.to_string())?;
    let rg = equilibrium_solve(&grid, &grid.initial_controls, &base_demands(&grid), None, &settings)
        .map_err(|e| e.to_string())?;
    ensure!(r3.residual <= 1e-9 && rg.residual <= 1e-9, "residuals {:e}, {:e}", r3.residual, rg.residual);
    Ok(format!(
        "threenodes {:e}, grid ({} nodes) {:e}",
        r3.residual,
        grid.n_nodes(),
        rg.residual
    ))
}

fn dae_matches_quasi_steady() -> Outcome {
    let m = model_from(SMALL_TANK);
    let settings = SolverSettings::default();
    let u = m.initial_controls.clone();
    let d = Demands {
        junction: vec![0.002, 0.003],
        tank: vec![0.0],
    };
    let x0 = consistent_init(&m, &flat_start(&m), &u, &d, &settings).map_err(|e| e.to_string())?;
    let traj = simulate(&m, &x0, &ScheduleInput::constant(&u, &d), 4.0 * 3600.0, 150.0, &settings)
        .map_err(|e| e.to_string())?;
    let eq = equilibrium_solve(&m, &u, &d, None, &settings).map_err(|e| e.to_string())?;
    let wfp = solve_wfp(&m, &eq.state.p_a, &u, &d, None, &settings).map_err(|e| e.to_string())?;
    let last = traj.states.last().unwrap();
    let worst = last
        .flat()
        .iter()
        .zip(wfp.state.flat())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3))
        .fold(0.0, f64::max);
    ensure!(worst <= 1e-6, "largest relative mismatch {worst:e}");
    Ok(format!("largest relative mismatch {worst:e}"))
}

fn energy_certificate() -> Outcome {
    let mut notes = Vec::new();
    for (name, op) in [("threenodes", threenode_op()), ("grid", grid_op())] {
        let lin = &op.lin;
        let raw = DVector::from_fn(lin.n_states(), |i, _| ((i * 5 + 1) as f64).sin());
        let dx = project_consistent(lin, &raw).map_err(|e| e.to_string())?;
        let dx0 = &dx * (1e-3 / dx.norm());
        let dt = 3600.0 / 2000.0;
        let tr = simulate_linear(lin, &dx0, 3600.0, dt).map_err(|e| e.to_string())?;
        ensure!(tr.energy.len() == 2001, "{name}: {} samples", tr.energy.len());
        let rise = tr.energy.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        ensure!(rise <= 1e-10, "{name}: V rises by {rise:e}");
        ensure!(tr.energy[2000] < tr.energy[0], "{name}: V does not decrease");
        let mut rel = f64::INFINITY;
        for k in 1..=5 {
            let h = dt / 10f64.powi(k);
            let (fd, exact) = energy_rate_check(lin, &dx0, h).map_err(|e| e.to_string())?;
            rel = (fd - exact).abs() / exact.abs();
        }
        ensure!(rel <= 1e-4, "{name}: dV/dt mismatch {rel:e}");
        notes.push(format!("{name} max rise {rise:.1e}, rate mismatch {rel:.1e}"));
    }
    Ok(notes.join("; "))
}

fn laplacian_structure() -> Outcome {
    // Stagnant tank links sit on the slope floor and swamp the spectrum with weight
    // 1/floor, so the tank exchanges a little water here.
    let (_, m) = load("grid.inp");
    let mut d = base_demands(&m);
    d.tank.iter_mut().for_each(|v| *v = 0.002);
    let op = op_for(&m, &d);
    ensure!(!op.lin.floored.iter().any(|&f| f), "floored slopes at the operating point");
    let mut lin = op.lin.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for trial in 0..6 {
        if trial > 0 {
            for e in 0..lin.n_links() {
                lin.active[e] = op.lin.active[e] && !(op.model.links[e].kind == LinkKind::Pipe && rng.random::<f64>() < 0.2);
            }
        }
        let l = weighted_laplacian(&lin);
        let rows = (0..l.nrows()).map(|i| l.row(i).sum().abs()).fold(0.0, f64::max);
        ensure!(rows <= 1e-12 * l.amax().max(1.0), "row sum {rows:e}");
        let eig = l.clone().symmetric_eigen().eigenvalues;
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig.iter().cloned().fold(0.0, f64::max);
        ensure!(min >= -1e-8 * max.max(1.0), "negative eigenvalue {min:e}");
        let comps = op.model.components(&lin.active).1;
        ensure!(zero_eigenvalue_count(&l) == comps, "{} zero eigenvalues, {comps} components", zero_eigenvalue_count(&l));
        let n = lin.incidence();
        let w = DMatrix::from_diagonal(&DVector::from_iterator(
            lin.n_links(),
            (0..lin.n_links()).map(|e| if lin.active[e] { 1.0 / lin.kappa[e] } else { 0.0 }),
        ));
        for _ in 0..5 {
            let dp = DVector::from_fn(n.nrows(), |_, _| rng.random_range(-1.0..1.0));
            let iota = &n * (&w * (n.transpose() * &dp));
            let lhs = &l * &dp;
            ensure!((&lhs - &iota).norm() <= 1e-12 * iota.norm(), "flow identity off by {:e}", (&lhs - &iota).norm());
        }
        checked += 1;
    }
    Ok(format!("{checked} activity patterns on the grid"))
}

/// Two tanks joined through a junction; with `anchored` the second tank becomes a reservoir.
fn tank_pair(anchored: bool) -> (HydraulicModel, HydraulicState) {
    let far = if anchored {
        "[RESERVOIRS]\n T3 25\n"
    } else {
        "[TANKS]\n T3 15 10 0 20 2 0\n"
    };
    let text = format!(
        "[JUNCTIONS]\n J2 0 0\n[TANKS]\n T1 20 5 0 10 2 0\n{far}[PIPES]\n P1 T1 J2 200 150 0.1 0 Open\n P2 J2 T3 300 150 0.1 0 Open\n[OPTIONS]\n Units LPS\n Headloss D-W\n"
    );
    let m = model_from(&text);
    let mut x = flat_start(&m);
    x.q = vec![0.0; 2];
    x.p_j = vec![25.0];
    (m, x)
}

fn stability_anchoring() -> Outcome {
    let settings = SolverSettings::default();
    let mut margins = Vec::new();
    let fixtures: Vec<(&str, HydraulicModel)> = vec![
        ("threenodes", load("threenodes.inp").1),
        ("grid", load("grid.inp").1),
        ("small_tank", model_from(SMALL_TANK)),
        ("pump_toggle", model_from(PUMP_TOGGLE)),
        ("tank_pair", tank_pair(true).0),
    ];
    for (name, m) in &fixtures {
        let d = base_demands(m);
        let x = if *name == "tank_pair" {
            tank_pair(true).1
        } else {
            equilibrium_solve(m, &m.initial_controls, &d, None, &settings)
                .map_err(|e| format!("{name}: {e}"))?
                .state
        };
        let lin = linearize(m, &x, &m.initial_controls, &d, 1e-9).map_err(|e| format!("{name}: {e}"))?;
        let eig = finite_generalized_eigenvalues(&lin.e_h, &lin.a_h, 0.5).map_err(|e| e.to_string())?;
        let top = eig.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        ensure!(!eig.is_empty() && top < 0.0, "{name}: largest real part {top:e}");
        margins.push(format!("{name} {:.2e}", -top));
    }
    let (m, x) = tank_pair(false);
    let d = Demands::zero(&m);
    let lin = linearize(&m, &x, &m.initial_controls, &d, 1e-9).map_err(|e| e.to_string())?;
    let eig = finite_generalized_eigenvalues(&lin.e_h, &lin.a_h, 0.5).map_err(|e| e.to_string())?;
    let scale = eig.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let smallest = eig.iter().map(|l| l.norm()).fold(f64::INFINITY, f64::min);
    ensure!(smallest <= 1e-9 * scale, "unanchored pair: smallest |λ| {smallest:e} of {scale:e}");
    Ok(format!("α_s: {}; unanchored |λ|min/|λ|max {:.1e}", margins.join(", "), smallest / scale))
}

fn mixed_roughness_direction(m: &HydraulicModel) -> Vec<f64> {
    m.theta
        .iter()
        .enumerate()
        .map(|(i, p)| if p.kind == ParamKind::Roughness { ((i * 13 + 5) as f64).sin() } else { 0.0 })
        .collect()
}

fn remainder_scaling() -> Outcome {
    let op = grid_op();
    let dir = mixed_roughness_direction(&op.model);
    let s = equilibrium_sensitivity(&op, 1e-4).map_err(|e| e.to_string())?;
    let eq_res: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&t| {
            let dt: Vec<f64> = dir.iter().map(|v| v * t).collect();
            equilibrium_remainder(&op, &s, &dt).unwrap()
        })
        .collect();
    let sens = matrix_sensitivity(&op, &dir, 1e-4, 1e-2).map_err(|e| e.to_string())?;
    let mat_res: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&t| matrix_remainder(&op, &sens, t).unwrap().residual)
        .collect();
    let ratios = |v: &[f64]| v.windows(2).map(|w| w[0] / w[1]).collect::<Vec<_>>();
    let (re, rm) = (ratios(&eq_res), ratios(&mat_res));
    for r in re.iter().chain(&rm) {
        ensure!((3.5..=4.5).contains(r), "halving ratios {re:?} / {rm:?}");
    }
    let global = matrix_sensitivity(&op, &global_roughness_direction(&op.model), 1e-4, 1e-2).map_err(|e| e.to_string())?;
    let n = (op.model.n_pipes as f64).sqrt();
    for d in [0.0025, 0.005, 0.01, 0.02, 0.05, 0.10] {
        let row = matrix_remainder(&op, &global, d * n).map_err(|e| e.to_string())?;
        ensure!(row.residual < row.true_shift, "at {d}: residual {:e} vs shift {:e}", row.residual, row.true_shift);
    }
    Ok(format!(
        "equilibrium ratios {:.2}/{:.2}, matrix ratios {:.2}/{:.2}, residual below shift at all six levels",
        re[0], re[1], rm[0], rm[1]
    ))
}

fn margin_bounds() -> Outcome {
    let mut notes = Vec::new();
    for (name, op) in [("threenodes", threenode_op()), ("grid", grid_op())] {
        let samples = roughness_samples(&op.model, 20, 0.05, 11);
        let rob = margin_robustness(&op, &samples, None).map_err(|e| e.to_string())?;
        ensure!(rob.stability_bound_holds == Some(true), "{name}: stability bound");
        ensure!(rob.controllability_bound_holds, "{name}: controllability bound");
        let worst = rob
            .samples
            .iter()
            .map(|s| s.slack_stability.min(s.slack_controllability))
            .fold(f64::INFINITY, f64::min);
        ensure!(worst >= 0.0, "{name}: slack {worst:e}");
        notes.push(format!("{name} min slack {worst:.2e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (mut bf_worst, mut sv_worst) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..200 {
        let n = rng.random_range(2..6);
        let mut v = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        v += DMatrix::identity(n, n) * 3.0;
        let diag = DVector::from_fn(n, |_, _| rng.random_range(-5.0..-0.1));
        let a = &v * DMatrix::from_diagonal(&diag) * v.clone().try_inverse().unwrap();
        let da = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) * rng.random_range(1e-6..1e-1);
        if let Some((dist, bound)) = bauer_fike(&a, &da) {
            bf_worst = bf_worst.max(dist - bound);
        }
        let k = DMatrix::from_fn(n, n + 1, |_, _| rng.random_range(-2.0..2.0));
        let dk = DMatrix::from_fn(n, n + 1, |_, _| rng.random_range(-1.0..1.0)) * rng.random::<f64>();
        let (gap, norm) = sigma_min_perturbation(&k, &dk);
        sv_worst = sv_worst.max(gap - norm);
    }
    ensure!(bf_worst <= 1e-10, "Bauer-Fike exceeded by {bf_worst:e}");
    ensure!(sv_worst <= 1e-10, "σ_min perturbation exceeded by {sv_worst:e}");
    Ok(format!("{}; random instances hold", notes.join(", ")))
}

fn smoothing_convergence() -> Outcome {
    let m = model_from(PUMP_TOGGLE);
    let settings = SolverSettings::default();
    let d = Demands {
        junction: vec![0.004, 0.006],
        tank: vec![0.0],
    };
    let pump = m.link("M1").unwrap();
    let mut hard = ScheduleInput::constant(&m.initial_controls, &d);
    hard.open[pump].set_from(3600.0, 0.0);
    let x0 = consistent_init(&m, &flat_start(&m), &hard.controls(0.0), &d, &settings).map_err(|e| e.to_string())?;
    let taus = [600.0, 300.0, 150.0, 75.0];
    let rows = convergence_sweep(&m, &x0, &hard, &taus, (4500.0, 7200.0), 7200.0, 15.0, &settings)
        .map_err(|e| e.to_string())?;
    let errs: Vec<f64> = rows.iter().map(|r| r.sup_error).collect();
    ensure!(errs.windows(2).all(|w| w[1] <= w[0]), "sup-errors not monotone: {errs:?}");
    let per_tau: Vec<f64> = rows.iter().map(|r| r.sup_error / r.tau_s).collect();
    let spread = per_tau.iter().cloned().fold(0.0, f64::max) / per_tau.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure!(spread <= 3.0, "error/τ spread {spread}");

    let smooth = smooth_controls(&hard, 300.0).map_err(|e| e.to_string())?;
    let lead = simulate(&m, &x0, &smooth, 3500.0, 50.0, &settings).map_err(|e| e.to_string())?;
    let xs = lead.states.last().unwrap().clone();
    let mut steady = hard.clone();
    steady.open[pump] = Series::constant(1.0);
    let h = 1.0;
    let kink = |inp: &dyn Inputs, t: f64| -> Result<f64, String> {
        let tr = simulate(&m, &xs, inp, 500.0, h, &settings).map_err(|e| e.to_string())?;
        Ok(detect_switch_kink(&tr, t, h).map_err(|e| e.to_string())?.kink_norm)
    };
    let base = kink(&steady, 3600.0)?;
    let edges = kink(&smooth, 3600.0)?.max(kink(&smooth, 3900.0)?);
    let hard_kink = kink(&hard, 3600.0)?;
    ensure!(edges <= 2.0 * base, "smoothed edge jump {edges:e} vs baseline {base:e}");
    ensure!(hard_kink >= 10.0 * base, "hard kink {hard_kink:e} vs baseline {base:e}");
    Ok(format!(
        "sup-errors {:.2e}..{:.2e}, error/τ spread {spread:.2}, edge/baseline {:.2}, hard/baseline {:.1e}",
        errs[0],
        errs[3],
        edges / base,
        hard_kink / base
    ))
}

fn authority_pipeline() -> Outcome {
    let one = DMatrix::from_element(1, 1, 1.0);
    let a = DMatrix::from_element(1, 1, -1.0);
    let au = reachability_authority(&one, &a, &one, 1.0, 2.0, &[1.0]).map_err(|e| e.to_string())?;
    ensure!(au.phi[(0, 0)] == 0.5 && au.gamma[(0, 0)] == 0.5, "Φ {} Γ {}", au.phi[(0, 0)], au.gamma[(0, 0)]);
    ensure!((au.g_h - 5f64.sqrt() / 4.0).abs() <= 1e-15, "G {}", au.g_h);
    let mut levels = 0;
    for op in [threenode_op(), grid_op()] {
        let rows = demand_sweep(
            &op.model,
            &op.controls,
            &op.demands,
            &demand_levels(0.5, 1.5, 11),
            &SolverSettings::default(),
            &MarginSettings::default(),
        );
        for r in &rows {
            ensure!(r.error.is_none(), "level {} failed: {:?}", r.level, r.error);
            ensure!(r.alpha_s > 0.0 && r.pbh > 0.0 && r.g_h.is_finite(), "level {}: {r:?}", r.level);
        }
        levels += rows.len();
    }
    Ok(format!("scalar case exact; {levels} sweep levels positive and finite"))
}

fn parser_robustness() -> Outcome {
    let mut runner = TestRunner::new(RunnerConfig {
        cases: 128,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    runner
        .run(&network_text(), |text| {
            let net = parse_inp(&text).unwrap();
            let back = parse_inp(&write_inp(&net)).unwrap();
            proptest::prop_assert!(same_structure(&net, &back, 1e-12));
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;
    let base = "[JUNCTIONS]\nJ1 0 1\n[RESERVOIRS]\nR1 10\n[PIPES]\n";
    ensure!(
        matches!(parse_inp(&format!("{base}P1 R1 Z 100 100 100\n")), Err(Error::UnresolvedReference { line: 6, .. })),
        "unresolved reference"
    );
    ensure!(
        matches!(
            parse_inp(&format!("{base}P1 R1 J1 100 100 100\n[OPTIONS]\nUnits FURLONGS\n")),
            Err(Error::UnsupportedUnits { line: 8, .. })
        ),
        "unsupported units"
    );
    ensure!(
        matches!(parse_inp(&format!("{base}P1 R1 J1 100\n")), Err(Error::MalformedLine { line: 6, .. })),
        "malformed line"
    );
    Ok("128 random round trips and three constructed errors".into())
}

#[test]
fn acceptance_criteria() {
    let criteria: Vec<(&str, u64, fn() -> Outcome)> = vec![
        ("smoothstep exactness", 1, smoothstep_exactness),
        ("fixture incidence and graph matrices", 1, fixture_fidelity),
        ("equilibrium residuals", 5, equilibrium_quality),
        ("DAE terminal state vs WFP fixed point", 30, dae_matches_quasi_steady),
        ("energy certificate", 60, energy_certificate),
        ("Laplacian structure", 60, laplacian_structure),
        ("stability anchoring", 5, stability_anchoring),
        ("quadratic remainder scaling", 60, remainder_scaling),
        ("margin bounds", 60, margin_bounds),
        ("smoothing convergence", 60, smoothing_convergence),
        ("authority pipeline", 10, authority_pipeline),
        ("parser robustness", 60, parser_robustness),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(note) if took > Duration::from_secs(budget) => Err(format!("{note}; took {took:.2?} over {budget} s")),
            other => other,
        };
        match result {
            Ok(note) => println!("PASS criterion {}: {name} ({took:.2?}): {note}", i + 1),
            Err(why) => {
                println!("FAIL criterion {}: {name} ({took:.2?}): {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
