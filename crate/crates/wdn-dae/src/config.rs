//! Numerical settings loaded from TOML. Every key is optional; missing keys take
//! the defaults below.
//!
//! ```toml
//! workers = 4
//!
//! [model]
//! pump_inertance_scale = 1.0
//!
//! [switching]
//! tau_s = 300.0
//!
//! [screening]
//! deltas = [0.0025, 0.005, 0.01, 0.02, 0.05, 0.1]
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dae::SolverSettings;
use crate::error::{Error, Result};
use crate::margins::MarginSettings;
use crate::network::{ModelOptions, Physics};
use crate::solver::NewtonSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pump_inertance_scale: f64,
    pub valve_inertance_scale: f64,
    pub pump_speed_scale: f64,
    pub speed_floor: f64,
    pub slope_floor: f64,
    pub r_max: f64,
    pub eps_q: f64,
    pub g: f64,
    pub nu_w: f64,
    pub open_regulating_valves: bool,
    pub inertance_overrides: BTreeMap<String, f64>,
    pub open_mode_points: BTreeMap<String, [f64; 2]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = ModelOptions::default();
        ModelConfig {
            pump_inertance_scale: m.pump_inertance_scale,
            valve_inertance_scale: m.valve_inertance_scale,
            pump_speed_scale: m.pump_speed_scale,
            speed_floor: m.speed_floor,
            slope_floor: m.slope_floor,
            r_max: m.r_max,
            eps_q: m.eps_q,
            g: m.physics.g,
            nu_w: m.physics.nu,
            open_regulating_valves: m.open_regulating_valves,
            inertance_overrides: BTreeMap::new(),
            open_mode_points: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_iter: usize,
    pub equilibrium_tol: f64,
    pub max_step_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig {
            newton_tol: s.newton.tol,
            max_iter: s.newton.max_iter,
            equilibrium_tol: s.equilibrium_tol,
            max_step_halvings: s.max_step_halvings,
        }
    }
}

/// Fixed-control simulation: one hour at 60 s gives 61 samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub horizon_hours: f64,
    pub dt_s: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            horizon_hours: 1.0,
            dt_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchingConfig {
    pub horizon_hours: f64,
    pub dt_epanet_s: f64,
    pub dae_substeps: usize,
    pub tau_s: f64,
}

impl Default for SwitchingConfig {
    fn default() -> Self {
        SwitchingConfig {
            horizon_hours: 24.0,
            dt_epanet_s: 300.0,
            dae_substeps: 2,
            tau_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub perturbation_norm: f64,
    pub n_ie: usize,
    pub horizon_s: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            perturbation_norm: 1e-3,
            n_ie: 2000,
            horizon_s: 3600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    /// Global roughness perturbations as fractions.
    pub deltas: Vec<f64>,
    pub h_theta: f64,
    pub h_lipschitz: f64,
    pub eps_lin: f64,
    /// Radius of the certified neighbourhood; unbounded when absent.
    pub r0: Option<f64>,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        let m = MarginSettings::default();
        ScreeningConfig {
            deltas: vec![0.0025, 0.005, 0.01, 0.02, 0.05, 0.1],
            h_theta: m.h_theta,
            h_lipschitz: m.h_lipschitz,
            eps_lin: m.eps_lin,
            r0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingConfig {
    pub delta_theta: f64,
    pub top_k: usize,
    pub robustness_samples: usize,
    pub robustness_scale: f64,
    pub seed: u64,
    pub kalman_horizon: Option<usize>,
}

impl Default for RankingConfig {
    fn default() -> Self {
        let m = MarginSettings::default();
        RankingConfig {
            delta_theta: m.delta_theta,
            top_k: 6,
            robustness_samples: m.robustness_samples,
            robustness_scale: m.robustness_scale,
            seed: m.seed,
            kalman_horizon: m.kalman_horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Junction demand multipliers swept from the first to the second value.
    pub range: [f64; 2],
    pub samples: usize,
    /// Step when sampling the demand schedule instead of scalar levels.
    pub dt_m_hours: f64,
    pub horizon_hours: f64,
    pub authority_step_s: f64,
    pub authority_horizon_hours: f64,
    pub flow_scale: f64,
    pub head_scale: f64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        let m = MarginSettings::default();
        DemandConfig {
            range: [0.5, 1.5],
            samples: 11,
            dt_m_hours: 0.5,
            horizon_hours: 24.0,
            authority_step_s: m.authority_step,
            authority_horizon_hours: m.authority_horizon / 3600.0,
            flow_scale: m.flow_scale,
            head_scale: m.head_scale,
        }
    }
}

/// Thresholds for DAE against quasi-steady comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub max_pj_error_m: f64,
    pub max_q_error_m3s: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            max_pj_error_m: 0.05,
            max_q_error_m3s: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Worker threads for sweeps and rankings; the rayon default when absent.
    pub workers: Option<usize>,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub simulation: SimulationConfig,
    pub switching: SwitchingConfig,
    pub energy: EnergyConfig,
    pub screening: ScreeningConfig,
    pub ranking: RankingConfig,
    pub demand: DemandConfig,
    pub compare: CompareConfig,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be positive and finite, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be non-negative and finite, got {v}")))
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        positive("model.pump_inertance_scale", m.pump_inertance_scale)?;
        positive("model.valve_inertance_scale", m.valve_inertance_scale)?;
        positive("model.pump_speed_scale", m.pump_speed_scale)?;
        non_negative("model.speed_floor", m.speed_floor)?;
        positive("model.slope_floor", m.slope_floor)?;
        positive("model.r_max", m.r_max)?;
        positive("model.eps_q", m.eps_q)?;
        positive("model.g", m.g)?;
        positive("model.nu_w", m.nu_w)?;
        for (id, g) in &m.inertance_overrides {
            positive(&format!("model.inertance_overrides.{id}"), *g)?;
        }
        for (id, [dh, q]) in &m.open_mode_points {
            non_negative(&format!("model.open_mode_points.{id}"), *dh)?;
            positive(&format!("model.open_mode_points.{id}"), q.abs())?;
        }
        positive("solver.newton_tol", self.solver.newton_tol)?;
        positive("solver.equilibrium_tol", self.solver.equilibrium_tol)?;
        positive("simulation.horizon_hours", self.simulation.horizon_hours)?;
        positive("simulation.dt_s", self.simulation.dt_s)?;
        let s = &self.switching;
        positive("switching.horizon_hours", s.horizon_hours)?;
        positive("switching.dt_epanet_s", s.dt_epanet_s)?;
        if s.dae_substeps == 0 {
            return Err(Error::Config("`switching.dae_substeps` must be at least 1".into()));
        }
        non_negative("switching.tau_s", s.tau_s)?;
        positive("energy.perturbation_norm", self.energy.perturbation_norm)?;
        positive("energy.horizon_s", self.energy.horizon_s)?;
        if self.energy.n_ie == 0 {
            return Err(Error::Config("`energy.n_ie` must be at least 1".into()));
        }
        let sc = &self.screening;
        for d in &sc.deltas {
            positive("screening.deltas", d.abs())?;
        }
        positive("screening.h_theta", sc.h_theta)?;
        positive("screening.h_lipschitz", sc.h_lipschitz)?;
        if !(sc.eps_lin > 0.0 && sc.eps_lin < 1.0) {
            return Err(Error::Config(format!("`screening.eps_lin` must lie in (0, 1), got {}", sc.eps_lin)));
        }
        if let Some(r0) = sc.r0 {
            if !(r0 > 0.0) {
                return Err(Error::Config(format!("`screening.r0` must be positive, got {r0}")));
            }
        }
        let r = &self.ranking;
        positive("ranking.delta_theta", r.delta_theta)?;
        non_negative("ranking.robustness_scale", r.robustness_scale)?;
        if r.kalman_horizon == Some(0) {
            return Err(Error::Config("`ranking.kalman_horizon` must be at least 1".into()));
        }
        let d = &self.demand;
        non_negative("demand.range", d.range[0])?;
        non_negative("demand.range", d.range[1])?;
        positive("demand.dt_m_hours", d.dt_m_hours)?;
        positive("demand.horizon_hours", d.horizon_hours)?;
        positive("demand.authority_step_s", d.authority_step_s)?;
        positive("demand.authority_horizon_hours", d.authority_horizon_hours)?;
        positive("demand.flow_scale", d.flow_scale)?;
        positive("demand.head_scale", d.head_scale)?;
        positive("compare.max_pj_error_m", self.compare.max_pj_error_m)?;
        positive("compare.max_q_error_m3s", self.compare.max_q_error_m3s)?;
        if self.workers == Some(0) {
            return Err(Error::Config("`workers` must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_options(&self) -> ModelOptions {
        let m = &self.model;
        ModelOptions {
            physics: Physics { g: m.g, nu: m.nu_w },
            pump_inertance_scale: m.pump_inertance_scale,
            valve_inertance_scale: m.valve_inertance_scale,
            inertance_overrides: m.inertance_overrides.clone(),
            pump_speed_scale: m.pump_speed_scale,
            speed_floor: m.speed_floor,
            slope_floor: m.slope_floor,
            r_max: m.r_max,
            eps_q: m.eps_q,
            open_mode_points: m.open_mode_points.iter().map(|(k, [a, b])| (k.clone(), (*a, *b))).collect(),
            open_regulating_valves: m.open_regulating_valves,
        }
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            newton: NewtonSettings {
                tol: self.solver.newton_tol,
                max_iter: self.solver.max_iter,
                ..NewtonSettings::default()
            },
            equilibrium_tol: self.solver.equilibrium_tol,
            max_step_halvings: self.solver.max_step_halvings,
            ..SolverSettings::default()
        }
    }

    pub fn margin_settings(&self) -> MarginSettings {
        MarginSettings {
            h_theta: self.screening.h_theta,
            h_lipschitz: self.screening.h_lipschitz,
            delta_theta: self.ranking.delta_theta,
            kalman_horizon: self.ranking.kalman_horizon,
            robustness_samples: self.ranking.robustness_samples,
            robustness_scale: self.ranking.robustness_scale,
            seed: self.ranking.seed,
            eps_lin: self.screening.eps_lin,
            r0: self.screening.r0.unwrap_or(f64::INFINITY),
            flow_scale: self.demand.flow_scale,
            head_scale: self.demand.head_scale,
            authority_step: self.demand.authority_step_s,
            authority_horizon: self.demand.authority_horizon_hours * 3600.0,
        }
    }
}
