//! Newton solver for the coupled link-flow / nodal-head systems shared by the
//! equilibrium, implicit-Euler and quasi-steady solves.
//!
//! Every mode is an instance of
//!
//! ```text
//! link e:       a_e (q_e − q̂_e) − (Nᵀp)_e + η_e(q_e) = 0
//! free node i:  (N q)_i + d_i + c_i (p_i − p̂_i)     = 0
//! ```
//!
//! with pinned nodes held at fixed head.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{ControlState, HydraulicModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub min_step: f64,
    /// Systems with at least this many unknowns use the sparse nodal path.
    pub dense_limit: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol: 1e-10,
            max_iter: 50,
            min_step: 2f64.powi(-20),
            dense_limit: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NodalSystem<'a> {
    pub model: &'a HydraulicModel,
    pub controls: &'a ControlState,
    /// Withdrawal per node; zero at reservoirs.
    pub demand: Vec<f64>,
    pub link_inertia: Vec<f64>,
    pub q_ref: Vec<f64>,
    pub storage: Vec<f64>,
    pub p_ref: Vec<f64>,
    pub pinned: Vec<bool>,
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl<'a> NodalSystem<'a> {
    /// System with no inertia or storage terms and only reservoirs pinned.
    pub fn steady(model: &'a HydraulicModel, controls: &'a ControlState, demand: Vec<f64>) -> Self {
        let n = model.n_nodes();
        let nl = model.n_links();
        let mut pinned = vec![false; n];
        for i in (model.n_junctions + model.n_tanks)..n {
            pinned[i] = true;
        }
        NodalSystem {
            model,
            controls,
            demand,
            link_inertia: vec![0.0; nl],
            q_ref: vec![0.0; nl],
            storage: vec![0.0; n],
            p_ref: vec![0.0; n],
            pinned,
        }
    }

    /// Steady system with tank heads held at their boundary values as well.
    pub fn wfp(model: &'a HydraulicModel, controls: &'a ControlState, demand: Vec<f64>) -> Self {
        let mut sys = Self::steady(model, controls, demand);
        for i in model.n_junctions..model.n_nodes() {
            sys.pinned[i] = true;
        }
        sys
    }

    /// Pins one node in every component that has neither a pinned node nor storage.
    ///
    /// Fails when the dropped balance row is inconsistent, i.e. when the demands in
    /// that component do not sum to zero.
    fn fix_gauge(&mut self) -> Result<()> {
        let (label, count) = self.model.components(&vec![true; self.model.n_links()]);
        let mut anchored = vec![false; count];
        let mut first = vec![usize::MAX; count];
        let mut total = vec![0.0; count];
        let mut scale = vec![0.0f64; count];
        for i in 0..self.model.n_nodes() {
            let c = label[i];
            if self.pinned[i] || self.storage[i] > 0.0 {
                anchored[c] = true;
            }
            // Prefer a tank as the gauge node, then any node.
            let is_tank = i >= self.model.n_junctions && i < self.model.n_junctions + self.model.n_tanks;
            if first[c] == usize::MAX || (is_tank && first[c] < self.model.n_junctions) {
                first[c] = i;
            }
            total[c] += self.demand[i];
            scale[c] = scale[c].max(self.demand[i].abs());
        }
        for c in 0..count {
            if anchored[c] {
                continue;
            }
            if total[c].abs() > 1e-12 * scale[c].max(1.0) {
                return Err(Error::NotAnEquilibrium {
                    residual: total[c].abs(),
                });
            }
            self.pinned[first[c]] = true;
        }
        Ok(())
    }

    fn unknown_map(&self) -> (Vec<Option<usize>>, usize) {
        let nl = self.model.n_links();
        let mut map = vec![None; self.model.n_nodes()];
        let mut k = nl;
        for (i, slot) in map.iter_mut().enumerate() {
            if !self.pinned[i] {
                *slot = Some(k);
                k += 1;
            }
        }
        (map, k)
    }

    fn residual(&self, q: &[f64], p: &[f64], map: &[Option<usize>], out: &mut [f64]) {
        let m = self.model;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (e, l) in m.links.iter().enumerate() {
            let law = m.link_law(e, q[e], self.controls.link(e));
            out[e] = self.link_inertia[e] * (q[e] - self.q_ref[e]) - (p[l.from] - p[l.to]) + law.eta;
            if let Some(r) = map[l.from] {
                out[r] += q[e];
            }
            if let Some(r) = map[l.to] {
                out[r] -= q[e];
            }
        }
        for (i, slot) in map.iter().enumerate() {
            if let Some(r) = *slot {
                out[r] += self.demand[i] + self.storage[i] * (p[i] - self.p_ref[i]);
            }
        }
    }

    /// Jacobian as (row, col, value) triplets.
    fn triplets(&self, q: &[f64], map: &[Option<usize>]) -> Vec<(usize, usize, f64)> {
        let m = self.model;
        let mut t = Vec::with_capacity(5 * m.n_links() + m.n_nodes());
        for (e, l) in m.links.iter().enumerate() {
            let slope = m.link_slope(e, q[e], self.controls.link(e));
            t.push((e, e, self.link_inertia[e] + slope));
            if let Some(r) = map[l.from] {
                t.push((e, r, -1.0));
                t.push((r, e, 1.0));
            }
            if let Some(r) = map[l.to] {
                t.push((e, r, 1.0));
                t.push((r, e, -1.0));
            }
        }
        for (i, slot) in map.iter().enumerate() {
            if let Some(r) = *slot {
                if self.storage[i] != 0.0 {
                    t.push((r, r, self.storage[i]));
                }
            }
        }
        t
    }

    fn solve_linear(
        &self,
        q: &[f64],
        map: &[Option<usize>],
        n: usize,
        rhs: &[f64],
        settings: &NewtonSettings,
    ) -> Option<Vec<f64>> {
        let trip = self.triplets(q, map);
        if n < settings.dense_limit {
            let mut j = DMatrix::zeros(n, n);
            for (r, c, v) in trip {
                j[(r, c)] += v;
            }
            j.lu().solve(&DVector::from_column_slice(rhs)).map(|x| x.as_slice().to_vec())
        } else {
            self.solve_schur(map, n, &trip, rhs)
        }
    }

    /// Eliminates the flows and solves the SPD nodal system by Jacobi-preconditioned CG.
    fn solve_schur(
        &self,
        map: &[Option<usize>],
        n: usize,
        trip: &[(usize, usize, f64)],
        rhs: &[f64],
    ) -> Option<Vec<f64>> {
        let nl = self.model.n_links();
        let nf = n - nl;
        let mut diag = vec![0.0; nl];
        let mut storage = vec![0.0; nf];
        for &(r, c, v) in trip {
            if r == c && r < nl {
                diag[r] += v;
            } else if r == c {
                storage[r - nl] += v;
            }
        }
        if diag.iter().any(|&d| d <= 0.0) {
            return None;
        }
        let mut entries = Vec::with_capacity(4 * nl + nf);
        let mut b: Vec<f64> = rhs[nl..].to_vec();
        for (e, l) in self.model.links.iter().enumerate() {
            let w = 1.0 / diag[e];
            let ends = [(map[l.from], 1.0), (map[l.to], -1.0)];
            for &(ri, si) in &ends {
                let Some(ri) = ri else { continue };
                b[ri - nl] -= si * w * rhs[e];
                for &(rj, sj) in &ends {
                    if let Some(rj) = rj {
                        entries.push((ri - nl, rj - nl, si * sj * w));
                    }
                }
            }
        }
        for (i, s) in storage.iter().enumerate() {
            entries.push((i, i, *s));
        }
        let a = Csr::from_triplets(nf, entries);
        let dp = a.pcg(&b, 1e-14, 20 * nf.max(10))?;
        let mut out = vec![0.0; n];
        for (e, l) in self.model.links.iter().enumerate() {
            let mut s = rhs[e];
            if let Some(r) = map[l.from] {
                s += dp[r - nl];
            }
            if let Some(r) = map[l.to] {
                s -= dp[r - nl];
            }
            out[e] = s / diag[e];
        }
        out[nl..].copy_from_slice(&dp);
        Some(out)
    }

    /// Damped Newton from (q0, p0); pinned heads are taken from `p0`.
    pub fn solve(mut self, q0: &[f64], p0: &[f64], settings: &NewtonSettings) -> Result<NewtonOutcome> {
        self.fix_gauge()?;
        let (map, n) = self.unknown_map();
        let nl = self.model.n_links();
        let mut q = q0.to_vec();
        let mut p = p0.to_vec();
        let mut f = vec![0.0; n];
        self.residual(&q, &p, &map, &mut f);
        let mut norm = inf_norm(&f);
        for it in 0..settings.max_iter {
            if norm <= settings.tol {
                return Ok(NewtonOutcome {
                    q,
                    p,
                    iterations: it,
                    residual: norm,
                });
            }
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            let Some(dx) = self.solve_linear(&q, &map, n, &rhs, settings) else {
                return Err(Error::NewtonDivergence {
                    iterations: it,
                    residual: norm,
                    time: None,
                });
            };
            let merit = l2_norm(&f);
            let mut lambda = 1.0;
            let mut trial_f = vec![0.0; n];
            loop {
                let tq: Vec<f64> = (0..nl).map(|e| q[e] + lambda * dx[e]).collect();
                let mut tp = p.clone();
                for (i, slot) in map.iter().enumerate() {
                    if let Some(r) = *slot {
                        tp[i] += lambda * dx[r];
                    }
                }
                self.residual(&tq, &tp, &map, &mut trial_f);
                // Node rows are linear, so the first full step satisfies them exactly and
                // the merit afterwards measures only the link rows.
                let ok = trial_f.iter().all(|v| v.is_finite())
                    && (it == 0 || l2_norm(&trial_f) <= (1.0 - 1e-4 * lambda) * merit);
                if ok || lambda * 0.5 < settings.min_step {
                    if trial_f.iter().all(|v| v.is_finite()) {
                        q = tq;
                        p = tp;
                        std::mem::swap(&mut f, &mut trial_f);
                        norm = inf_norm(&f);
                    }
                    break;
                }
                lambda *= 0.5;
            }
        }
        if norm <= settings.tol {
            return Ok(NewtonOutcome {
                q,
                p,
                iterations: settings.max_iter,
                residual: norm,
            });
        }
        Err(Error::NewtonDivergence {
            iterations: settings.max_iter,
            residual: norm,
            time: None,
        })
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.abs() > m || x.is_nan() { x.abs() } else { m })
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compressed sparse rows with summed duplicates.
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Csr {
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { row_ptr, cols, vals }
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(|k| self.vals[k] * x[self.cols[k]])
                .sum();
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.row_ptr.len() - 1)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.cols[k] == i)
                    .map_or(0.0, |k| self.vals[k])
            })
            .collect()
    }

    fn pcg(&self, b: &[f64], rtol: f64, max_iter: usize) -> Option<Vec<f64>> {
        let n = b.len();
        let inv_diag: Vec<f64> = self
            .diagonal()
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect();
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let bnorm = l2_norm(b);
        if bnorm == 0.0 {
            return Some(x);
        }
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        let mut dir = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ad = vec![0.0; n];
        for _ in 0..max_iter {
            self.mul(&dir, &mut ad);
            let dad: f64 = dir.iter().zip(&ad).map(|(a, b)| a * b).sum();
            if dad <= 0.0 || !dad.is_finite() {
                return None;
            }
            let alpha = rz / dad;
            for i in 0..n {
                x[i] += alpha * dir[i];
                r[i] -= alpha * ad[i];
            }
            if l2_norm(&r) <= rtol * bnorm {
                return Some(x);
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                dir[i] = z[i] + beta * dir[i];
            }
        }
        (l2_norm(&r) <= 1e-8 * bnorm).then_some(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcg_solves_small_spd() {
        let a = Csr::from_triplets(
            2,
            vec![(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)],
        );
        let x = a.pcg(&[1.0, 2.0], 1e-14, 50).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }
}
