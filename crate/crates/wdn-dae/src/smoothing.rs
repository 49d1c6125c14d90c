//! Quintic smoothing of piecewise-constant control schedules.

use rayon::prelude::*;
use serde::Serialize;

use crate::dae::{simulate, HydraulicState, SolverSettings, Trajectory};
use crate::error::{Error, Result};
use crate::network::{ControlState, HydraulicModel};
use crate::schedule::{Demands, Inputs, ScheduleInput, Series};

/// χ(α) = 10α³ − 15α⁴ + 6α⁵.
pub fn smoothstep(alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("smoothstep argument {alpha} outside [0, 1]")));
    }
    Ok(chi(alpha))
}

fn chi(a: f64) -> f64 {
    a * a * a * (10.0 + a * (-15.0 + 6.0 * a))
}

/// χ'(α) = 30α²(1 − α)².
pub fn smoothstep_d1(alpha: f64) -> f64 {
    30.0 * alpha * alpha * (1.0 - alpha) * (1.0 - alpha)
}

/// χ''(α) = 60α(1 − α)(1 − 2α).
pub fn smoothstep_d2(alpha: f64) -> f64 {
    60.0 * alpha * (1.0 - alpha) * (1.0 - 2.0 * alpha)
}

/// A schedule whose control channels blend into each new setpoint over `tau_s` seconds
/// starting at the breakpoint. Demands are left piecewise constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSchedule {
    pub base: ScheduleInput,
    pub tau_s: f64,
}

impl SmoothedSchedule {
    pub fn value(&self, series: &Series, t: f64) -> f64 {
        let k = series.segment(t);
        if self.tau_s > 0.0
            && k >= 1
            && series.values[k] != series.values[k - 1]
            && t < series.times[k] + self.tau_s
        {
            let w = chi((t - series.times[k]) / self.tau_s);
            (1.0 - w) * series.values[k - 1] + w * series.values[k]
        } else {
            series.values[k]
        }
    }

    /// Time derivative of a smoothed channel.
    pub fn rate(&self, series: &Series, t: f64) -> f64 {
        let k = series.segment(t);
        if self.tau_s > 0.0 && k >= 1 && t >= series.times[k] && t < series.times[k] + self.tau_s {
            let a = (t - series.times[k]) / self.tau_s;
            (series.values[k] - series.values[k - 1]) / self.tau_s * smoothstep_d1(a)
        } else {
            0.0
        }
    }

    /// Transition windows `[t_k, t_k + τ_s]` of every control breakpoint that changes value.
    pub fn windows(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .base
            .control_switches()
            .into_iter()
            .map(|t| (t, t + self.tau_s))
            .collect();
        out.dedup();
        out
    }
}

/// Wraps a schedule with quintic transitions of width `tau_s` (0 keeps it hard).
pub fn smooth_controls(base: &ScheduleInput, tau_s: f64) -> Result<SmoothedSchedule> {
    if !(tau_s >= 0.0 && tau_s.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing width {tau_s} must be non-negative")));
    }
    if tau_s > 0.0 {
        for series in base.control_channels() {
            if let Some(gap) = series.times.windows(2).map(|w| w[1] - w[0]).reduce(f64::min) {
                if tau_s >= gap {
                    return Err(Error::WindowTooWide { tau_s, gap });
                }
            }
        }
    }
    Ok(SmoothedSchedule {
        base: base.clone(),
        tau_s,
    })
}

impl Inputs for SmoothedSchedule {
    fn controls(&self, t: f64) -> ControlState {
        let eval = |v: &[Series]| v.iter().map(|s| self.value(s, t)).collect();
        ControlState {
            speed: eval(&self.base.speed),
            open: eval(&self.base.open),
            setting: eval(&self.base.setting),
        }
    }

    fn demands(&self, t: f64) -> Demands {
        self.base.demands(t)
    }

    fn control_switches(&self) -> Vec<f64> {
        if self.tau_s > 0.0 {
            Vec::new()
        } else {
            self.base.control_switches()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau_s: f64,
    pub sup_error: f64,
    pub interval_start: f64,
    pub interval_end: f64,
}

/// Largest ∞-norm state difference between two trajectories on shared samples in `[a, b]`.
pub fn sup_error(x: &Trajectory, y: &Trajectory, a: f64, b: f64) -> f64 {
    x.states
        .iter()
        .zip(&y.states)
        .filter(|(s, _)| s.time >= a - 1e-9 && s.time <= b + 1e-9)
        .map(|(s, r)| {
            s.flat()
                .iter()
                .zip(r.flat())
                .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()))
        })
        .fold(0.0, f64::max)
}

/// Sup-error between smoothed and hard-switch trajectories for each width in `taus`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_sweep(
    model: &HydraulicModel,
    x0: &HydraulicState,
    schedule: &ScheduleInput,
    taus: &[f64],
    interval: (f64, f64),
    horizon: f64,
    dt: f64,
    settings: &SolverSettings,
) -> Result<Vec<SweepRow>> {
    let (a, b) = interval;
    let t0 = x0.time;
    if !(a < b) || a < t0 || b > t0 + horizon {
        return Err(Error::InvalidArgument(format!(
            "interval [{a}, {b}] must lie inside the simulated horizon"
        )));
    }
    let tau_max = taus.iter().cloned().fold(0.0, f64::max);
    for ts in schedule.control_switches() {
        if a <= ts + tau_max && b >= ts {
            return Err(Error::InvalidArgument(format!(
                "interval [{a}, {b}] overlaps the transition window at {ts} s"
            )));
        }
    }
    let hard = simulate(model, x0, schedule, horizon, dt, settings)?;
    taus.par_iter()
        .map(|&tau| {
            let smooth = smooth_controls(schedule, tau)?;
            let traj = simulate(model, x0, &smooth, horizon, dt, settings)?;
            Ok(SweepRow {
                tau_s: tau,
                sup_error: sup_error(&traj, &hard, a, b),
                interval_start: a,
                interval_end: b,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(smoothstep(0.0).unwrap(), 0.0);
        assert_eq!(smoothstep(1.0).unwrap(), 1.0);
        assert_eq!(smoothstep(0.5).unwrap(), 0.5);
        assert!(smoothstep(1.5).is_err());
    }

    #[test]
    fn peak_rate_of_unit_step() {
        let s = Series::new(vec![0.0, 1000.0], vec![0.0, 1.0]).unwrap();
        let base = ScheduleInput {
            speed: vec![],
            open: vec![s],
            setting: vec![],
            demand_junction: vec![],
            demand_tank: vec![],
        };
        let sm = smooth_controls(&base, 300.0).unwrap();
        let peak = sm.rate(&sm.base.open[0], 1150.0);
        assert!((peak - 0.00625).abs() < 1e-15);
    }
}
