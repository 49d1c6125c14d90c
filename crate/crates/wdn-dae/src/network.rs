//! Incidence structure and component laws of the hydraulic network.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inp::{HeadlossModel, LinkStatus, NetworkDescription, ValveKind, ValveStatus};

pub const G: f64 = 9.80665;
pub const NU_WATER: f64 = 1.004e-6;

const HW_COEF: f64 = 10.667;
const HW_EXP: f64 = 1.852;
const HW_DIAM_EXP: f64 = 4.871;
const RE_LAMINAR: f64 = 2000.0;
const RE_TURBULENT: f64 = 4000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Physics {
    pub g: f64,
    pub nu: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Physics { g: G, nu: NU_WATER }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub physics: Physics,
    pub pump_inertance_scale: f64,
    pub valve_inertance_scale: f64,
    /// Explicit γ for individual links, by link id.
    pub inertance_overrides: BTreeMap<String, f64>,
    pub pump_speed_scale: f64,
    pub speed_floor: f64,
    pub slope_floor: f64,
    /// Resistance of a fully shut link.
    pub r_max: f64,
    pub eps_q: f64,
    /// Operating points (Δh*, q*) used to calibrate open-mode regulating valves.
    pub open_mode_points: BTreeMap<String, (f64, f64)>,
    /// Treat active FCV/PRV/PSV valves as open instead of rejecting them.
    pub open_regulating_valves: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            physics: Physics::default(),
            pump_inertance_scale: 1.0,
            valve_inertance_scale: 1.0,
            inertance_overrides: BTreeMap::new(),
            pump_speed_scale: 1.0,
            speed_floor: 0.01,
            slope_floor: 1e-8,
            r_max: 1e8,
            eps_q: 1e-5,
            open_mode_points: BTreeMap::new(),
            open_regulating_valves: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Pipe,
    Pump,
    Valve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Junction,
    Tank,
    Reservoir,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipeParams {
    pub length: f64,
    pub diameter: f64,
    pub roughness: f64,
    pub minor_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PumpParams {
    pub h0: f64,
    pub r: f64,
    pub nu: f64,
    pub speed_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValveParams {
    pub kind: ValveKind,
    pub diameter: f64,
    pub setting: f64,
    pub minor_loss: f64,
    /// Open-mode resistance for every kind except TCV, whose resistance follows its setting.
    pub r_open: f64,
    /// Multiplier on the open-mode resistance (a model parameter).
    pub coefficient: f64,
    pub status: ValveStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LinkLaw {
    Pipe(PipeParams),
    Pump(PumpParams),
    Valve(ValveParams),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Link {
    pub id: String,
    pub kind: LinkKind,
    pub from: usize,
    pub to: usize,
    pub law: LinkLaw,
}

/// Per-link control channels. `speed` only matters on pumps and `setting` only on valves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkControl {
    pub speed: f64,
    pub open: f64,
    pub setting: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    pub speed: Vec<f64>,
    pub open: Vec<f64>,
    pub setting: Vec<f64>,
}

impl ControlState {
    pub fn link(&self, e: usize) -> LinkControl {
        LinkControl {
            speed: self.speed[e],
            open: self.open[e],
            setting: self.setting[e],
        }
    }
}

/// Link law value and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawEval {
    pub eta: f64,
    /// ∂η/∂q without the slope floor.
    pub slope: f64,
    pub d_speed: f64,
    pub d_open: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Roughness,
    Diameter,
    PumpShutoff,
    PumpResistance,
    ValveCoefficient,
    TankArea,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    /// Link index, or tank index for tank areas.
    pub target: usize,
    pub nominal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HydraulicModel {
    pub node_ids: Vec<String>,
    pub n_junctions: usize,
    pub n_tanks: usize,
    pub n_reservoirs: usize,
    pub links: Vec<Link>,
    pub n_pipes: usize,
    pub n_pumps: usize,
    pub n_valves: usize,
    pub gamma: Vec<f64>,
    pub junction_elevation: Vec<f64>,
    pub base_demand: Vec<f64>,
    pub demand_pattern: Vec<Option<String>>,
    pub tank_area: Vec<f64>,
    pub tank_elevation: Vec<f64>,
    pub tank_init_head: Vec<f64>,
    pub tank_min_head: Vec<f64>,
    pub tank_max_head: Vec<f64>,
    pub reservoir_head: Vec<f64>,
    pub headloss: HeadlossModel,
    pub options: ModelOptions,
    pub theta: Vec<Parameter>,
    pub initial_controls: ControlState,
    node_index: HashMap<String, usize>,
    link_index: HashMap<String, usize>,
}

/// Darcy-Weisbach friction factor and its derivative in Re.
pub fn friction_factor(re: f64, rel_roughness: f64) -> (f64, f64) {
    let swamee_jain = |re: f64| {
        let x = rel_roughness / 3.7 + 5.74 * re.powf(-0.9);
        let l = x.log10();
        let dl = -0.9 * 5.74 * re.powf(-1.9) / (x * std::f64::consts::LN_10);
        (0.25 / (l * l), -0.5 * dl / (l * l * l))
    };
    if re < RE_LAMINAR {
        (64.0 / re, -64.0 / (re * re))
    } else if re > RE_TURBULENT {
        swamee_jain(re)
    } else {
        let h = RE_TURBULENT - RE_LAMINAR;
        let (f0, d0) = (64.0 / RE_LAMINAR, -64.0 / (RE_LAMINAR * RE_LAMINAR));
        let (f1, d1) = swamee_jain(RE_TURBULENT);
        let t = (re - RE_LAMINAR) / h;
        let (t2, t3) = (t * t, t * t * t);
        let f = (2.0 * t3 - 3.0 * t2 + 1.0) * f0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * f1
            + (t3 - t2) * h * d1;
        let df = ((6.0 * t2 - 6.0 * t) * f0
            + (3.0 * t2 - 4.0 * t + 1.0) * h * d0
            + (-6.0 * t2 + 6.0 * t) * f1
            + (3.0 * t2 - 2.0 * t) * h * d1)
            / h;
        (f, df)
    }
}

/// Pipe headloss φ(q) and its slope dφ/dq.
pub fn pipe_law(q: f64, pipe: &PipeParams, model: HeadlossModel, physics: &Physics) -> (f64, f64) {
    let d = pipe.diameter;
    let r_minor = 8.0 * pipe.minor_loss / (physics.g * PI * PI * d.powi(4));
    let aq = q.abs();
    let (phi, slope) = match model {
        HeadlossModel::HW => {
            let coef = HW_COEF * pipe.length * pipe.roughness.powf(-HW_EXP) * d.powf(-HW_DIAM_EXP);
            (
                coef * aq.powf(HW_EXP) * q.signum(),
                HW_EXP * coef * aq.powf(HW_EXP - 1.0),
            )
        }
        HeadlossModel::DW => {
            // φ = K0·c·q·F(Re) with |q| = c·Re and F = Re·f, which stays finite at q = 0.
            let k0 = 8.0 * pipe.length / (physics.g * PI * PI * d.powi(5));
            let c = PI * physics.nu * d / 4.0;
            let re = aq / c;
            if re < RE_LAMINAR {
                (k0 * c * 64.0 * q, k0 * c * 64.0)
            } else {
                let (f, df) = friction_factor(re, pipe.roughness / d);
                (k0 * q * aq * f, k0 * aq * (2.0 * f + re * df))
            }
        }
    };
    (phi + r_minor * q * aq, slope + 2.0 * r_minor * aq)
}

/// Pipe headloss in metres.
pub fn pipe_headloss(q: f64, pipe: &PipeParams, model: HeadlossModel, physics: &Physics) -> f64 {
    pipe_law(q, pipe, model, physics).0
}

/// Reynolds number of flow `q` in a pipe of diameter `d`.
pub fn reynolds(q: f64, d: f64, nu: f64) -> f64 {
    4.0 * q.abs() / (PI * nu * d)
}

fn pump_psi(q: f64, s: f64, p: &PumpParams) -> (f64, f64, f64) {
    let aq = q.abs();
    let sk = s.powf(2.0 - p.nu);
    let psi = s * s * p.h0 - p.r * sk * aq.powf(p.nu) * q.signum();
    let dpsi_dq = -p.r * p.nu * sk * aq.powf(p.nu - 1.0);
    let dpsi_ds =
        2.0 * s * p.h0 - p.r * (2.0 - p.nu) * s.powf(1.0 - p.nu) * aq.powf(p.nu) * q.signum();
    (psi, dpsi_dq, dpsi_ds)
}

/// Pump head gain s²(h⁰ − r (q/s)^ν), extended as an odd function of q for reverse flow.
pub fn pump_head_gain(q: f64, s: f64, pump: &PumpParams) -> Result<f64> {
    if s < pump.speed_floor {
        return Err(Error::SpeedBelowFloor {
            id: String::new(),
            speed: s,
            floor: pump.speed_floor,
        });
    }
    Ok(pump_psi(q, s, pump).0)
}

/// Open-mode resistance calibrated from one operating point.
pub fn open_mode_resistance(dh: f64, q: f64, eps_q: f64) -> f64 {
    dh.abs() / (q * q + eps_q * eps_q)
}

fn velocity_head_resistance(d: f64, g: f64) -> f64 {
    8.0 / (g * PI * PI * d.powi(4))
}

/// Quadratic resistance of a valve at its current setting, before closure.
pub fn valve_resistance(valve: &ValveParams, setting: f64, g: f64) -> f64 {
    let r = match valve.kind {
        ValveKind::TCV => setting * velocity_head_resistance(valve.diameter, g),
        _ => valve.r_open,
    };
    r * valve.coefficient
}

/// Valve headloss r^W(o)·q|q| at open fraction `o`.
pub fn valve_headloss(q: f64, o: f64, valve: &ValveParams, r_max: f64, g: f64) -> Result<f64> {
    if valve.kind.is_regulating() && valve.status == ValveStatus::Active {
        return Err(Error::UnsupportedValveMode {
            id: String::new(),
            kind: valve.kind.to_string(),
        });
    }
    if !(0.0..=1.0).contains(&o) {
        return Err(Error::InvalidArgument(format!("open fraction {o} outside [0, 1]")));
    }
    let r_ref = velocity_head_resistance(valve.diameter, g);
    let r = valve_resistance(valve, valve.setting, g) + closure(o, r_ref, r_max).0;
    Ok(r * q * q.abs())
}

/// Added resistance of a partly shut link and its derivative in the open fraction.
///
/// Zero when fully open and `r_max` when shut; between, the loss grows like the
/// inverse square of the open area.
pub fn closure(f: f64, r_ref: f64, r_max: f64) -> (f64, f64) {
    if f >= 1.0 {
        let eps = r_ref / r_max;
        return (0.0, -2.0 * r_ref / (1.0 + eps));
    }
    let f = f.max(0.0);
    let eps = r_ref / r_max;
    let den = f * f + eps;
    (
        r_ref * (1.0 - f * f) / den,
        -2.0 * f * r_ref * (1.0 + eps) / (den * den),
    )
}

/// Fits (h⁰, r, ν) of s²(h⁰ − r q^ν) to EPANET pump curve points.
pub fn fit_pump_curve(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    match points {
        [] => None,
        [(q0, h0)] => {
            if *q0 <= 0.0 || *h0 <= 0.0 {
                return None;
            }
            Some((4.0 * h0 / 3.0, h0 / (3.0 * q0 * q0), 2.0))
        }
        _ => {
            let design = points[points.len() / 2];
            let shutoff = 4.0 * design.1 / 3.0;
            let usable: Vec<(f64, f64)> = points
                .iter()
                .filter(|(q, h)| *q > 0.0 && shutoff - h > 0.0)
                .map(|(q, h)| (q.ln(), (shutoff - h).ln()))
                .collect();
            match usable.len() {
                0 => None,
                1 => {
                    let (lq, lh) = usable[0];
                    Some((shutoff, (lh - 2.0 * lq).exp(), 2.0))
                }
                n => {
                    let n = n as f64;
                    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
                    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
                    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
                    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
                    if sxx <= 0.0 {
                        return None;
                    }
                    let nu = (sxy / sxx).clamp(1.0, 3.0);
                    let r = (my - nu * mx).exp();
                    Some((shutoff, r, nu))
                }
            }
        }
    }
}

/// Builds the executable model from a validated description.
pub fn build_model(net: &NetworkDescription, opts: &ModelOptions) -> Result<HydraulicModel> {
    if net.node_count() == 0 || net.link_count() == 0 {
        return Err(Error::EmptyNetwork);
    }
    let g = opts.physics.g;
    let mut node_ids: Vec<String> = Vec::new();
    node_ids.extend(net.junctions.iter().map(|j| j.id.clone()));
    node_ids.extend(net.tanks.iter().map(|t| t.id.clone()));
    node_ids.extend(net.reservoirs.iter().map(|r| r.id.clone()));
    let node_index: HashMap<String, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    let find = |id: &str| -> Result<usize> {
        node_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnresolvedReference {
                kind: "node",
                id: id.to_string(),
                line: net.provenance.lines.get(id).copied().unwrap_or(0),
            })
    };

    let mut links = Vec::with_capacity(net.link_count());
    let mut open = Vec::new();
    let mut speed = Vec::new();
    let mut setting = Vec::new();
    for p in &net.pipes {
        if p.length <= 0.0 || p.diameter <= 0.0 {
            return Err(Error::DegenerateGeometry {
                id: p.id.clone(),
                message: format!("length {} m, diameter {} m", p.length, p.diameter),
            });
        }
        links.push(Link {
            id: p.id.clone(),
            kind: LinkKind::Pipe,
            from: find(&p.from)?,
            to: find(&p.to)?,
            law: LinkLaw::Pipe(PipeParams {
                length: p.length,
                diameter: p.diameter,
                roughness: p.roughness,
                minor_loss: p.minor_loss,
            }),
        });
        open.push(if p.initial_status == LinkStatus::Open { 1.0 } else { 0.0 });
        speed.push(1.0);
        setting.push(0.0);
    }
    for p in &net.pumps {
        let pts = net.curves.get(&p.curve_id).ok_or_else(|| Error::UnresolvedReference {
            kind: "curve",
            id: p.curve_id.clone(),
            line: net.provenance.lines.get(&p.id).copied().unwrap_or(0),
        })?;
        let (h0, r, nu) = fit_pump_curve(pts).ok_or_else(|| Error::DegenerateGeometry {
            id: p.id.clone(),
            message: format!("pump curve `{}` cannot be fitted", p.curve_id),
        })?;
        links.push(Link {
            id: p.id.clone(),
            kind: LinkKind::Pump,
            from: find(&p.from)?,
            to: find(&p.to)?,
            law: LinkLaw::Pump(PumpParams {
                h0,
                r,
                nu,
                speed_floor: opts.speed_floor,
            }),
        });
        let s = p.speed * opts.pump_speed_scale;
        let off = p.initial_status == LinkStatus::Closed || s == 0.0;
        open.push(if off { 0.0 } else { 1.0 });
        speed.push(if s >= opts.speed_floor { s } else { 1.0 });
        setting.push(0.0);
    }
    for v in &net.valves {
        if v.diameter <= 0.0 {
            return Err(Error::DegenerateGeometry {
                id: v.id.clone(),
                message: format!("diameter {} m", v.diameter),
            });
        }
        let mut status = v.status;
        if v.kind.is_regulating() && status == ValveStatus::Active {
            if opts.open_regulating_valves || opts.open_mode_points.contains_key(&v.id) {
                status = ValveStatus::Open;
            } else {
                return Err(Error::UnsupportedValveMode {
                    id: v.id.clone(),
                    kind: v.kind.to_string(),
                });
            }
        }
        let minor = v.minor_loss * velocity_head_resistance(v.diameter, g);
        let r_open = match v.kind {
            ValveKind::TCV => 0.0,
            ValveKind::GPV => match v.curve_id.as_ref().and_then(|c| net.curves.get(c)) {
                Some(pts) => {
                    let (num, den) = pts
                        .iter()
                        .filter(|(q, _)| *q > 0.0)
                        .fold((0.0, 0.0), |(a, b), (q, h)| (a + h * q * q, b + q.powi(4)));
                    if den > 0.0 {
                        num / den
                    } else {
                        minor
                    }
                }
                None => minor,
            },
            ValveKind::PBV => minor,
            _ => match opts.open_mode_points.get(&v.id) {
                Some((dh, q)) => open_mode_resistance(*dh, *q, opts.eps_q),
                None => minor,
            },
        };
        links.push(Link {
            id: v.id.clone(),
            kind: LinkKind::Valve,
            from: find(&v.from)?,
            to: find(&v.to)?,
            law: LinkLaw::Valve(ValveParams {
                kind: v.kind,
                diameter: v.diameter,
                setting: v.setting,
                minor_loss: v.minor_loss,
                r_open,
                coefficient: 1.0,
                status,
            }),
        });
        open.push(if status == ValveStatus::Closed { 0.0 } else { 1.0 });
        speed.push(1.0);
        setting.push(v.setting);
    }
    for t in &net.tanks {
        if t.diameter <= 0.0 {
            return Err(Error::DegenerateGeometry {
                id: t.id.clone(),
                message: format!("tank diameter {} m", t.diameter),
            });
        }
    }

    let link_index = links
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.clone(), i))
        .collect();
    let mut model = HydraulicModel {
        n_junctions: net.junctions.len(),
        n_tanks: net.tanks.len(),
        n_reservoirs: net.reservoirs.len(),
        n_pipes: net.pipes.len(),
        n_pumps: net.pumps.len(),
        n_valves: net.valves.len(),
        gamma: vec![0.0; links.len()],
        junction_elevation: net.junctions.iter().map(|j| j.elevation).collect(),
        base_demand: net.junctions.iter().map(|j| j.base_demand).collect(),
        demand_pattern: net
            .junctions
            .iter()
            .map(|j| j.pattern_id.clone().or_else(|| net.options.default_pattern.clone()))
            .collect(),
        tank_area: net.tanks.iter().map(|t| PI * t.diameter * t.diameter / 4.0).collect(),
        tank_elevation: net.tanks.iter().map(|t| t.elevation).collect(),
        tank_init_head: net.tanks.iter().map(|t| t.elevation + t.init_level).collect(),
        tank_min_head: net.tanks.iter().map(|t| t.elevation + t.min_level).collect(),
        tank_max_head: net.tanks.iter().map(|t| t.elevation + t.max_level).collect(),
        reservoir_head: net.reservoirs.iter().map(|r| r.head).collect(),
        headloss: net.options.headloss_model,
        options: opts.clone(),
        theta: Vec::new(),
        initial_controls: ControlState {
            speed,
            open,
            setting,
        },
        links,
        node_ids,
        node_index,
        link_index,
    };
    model.update_gamma();
    model.theta = model.parameters();
    Ok(model)
}

impl HydraulicModel {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn node_kind(&self, i: usize) -> NodeKind {
        if i < self.n_junctions {
            NodeKind::Junction
        } else if i < self.n_junctions + self.n_tanks {
            NodeKind::Tank
        } else {
            NodeKind::Reservoir
        }
    }

    pub fn node(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn link(&self, id: &str) -> Option<usize> {
        self.link_index.get(id).copied()
    }

    pub fn link_ids(&self) -> impl Iterator<Item = &str> {
        self.links.iter().map(|l| l.id.as_str())
    }

    fn update_gamma(&mut self) {
        let g = self.options.physics.g;
        let mut pipe_gammas: Vec<f64> = self
            .links
            .iter()
            .filter_map(|l| match &l.law {
                LinkLaw::Pipe(p) => Some(g * PI * p.diameter * p.diameter / 4.0 / p.length),
                _ => None,
            })
            .collect();
        pipe_gammas.sort_by(f64::total_cmp);
        let median = match pipe_gammas.len() {
            0 => 1.0,
            n if n % 2 == 1 => pipe_gammas[n / 2],
            n => 0.5 * (pipe_gammas[n / 2 - 1] + pipe_gammas[n / 2]),
        };
        for (e, l) in self.links.iter().enumerate() {
            let gamma = match &l.law {
                LinkLaw::Pipe(p) => g * PI * p.diameter * p.diameter / 4.0 / p.length,
                LinkLaw::Pump(_) => median * self.options.pump_inertance_scale,
                LinkLaw::Valve(_) => median * self.options.valve_inertance_scale,
            };
            self.gamma[e] = self.options.inertance_overrides.get(&l.id).copied().unwrap_or(gamma);
        }
    }

    fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        let pipes = || {
            self.links.iter().enumerate().filter_map(|(e, l)| match &l.law {
                LinkLaw::Pipe(p) => Some((e, l, p)),
                _ => None,
            })
        };
        for (e, l, p) in pipes() {
            out.push(Parameter {
                name: format!("roughness:{}", l.id),
                kind: ParamKind::Roughness,
                target: e,
                nominal: p.roughness,
            });
        }
        for (e, l, p) in pipes() {
            out.push(Parameter {
                name: format!("diameter:{}", l.id),
                kind: ParamKind::Diameter,
                target: e,
                nominal: p.diameter,
            });
        }
        for (e, l) in self.links.iter().enumerate() {
            if let LinkLaw::Pump(p) = &l.law {
                out.push(Parameter {
                    name: format!("pump_h0:{}", l.id),
                    kind: ParamKind::PumpShutoff,
                    target: e,
                    nominal: p.h0,
                });
                out.push(Parameter {
                    name: format!("pump_r:{}", l.id),
                    kind: ParamKind::PumpResistance,
                    target: e,
                    nominal: p.r,
                });
            }
        }
        for (e, l) in self.links.iter().enumerate() {
            if let LinkLaw::Valve(v) = &l.law {
                out.push(Parameter {
                    name: format!("valve_coeff:{}", l.id),
                    kind: ParamKind::ValveCoefficient,
                    target: e,
                    nominal: v.coefficient,
                });
            }
        }
        for (a, area) in self.tank_area.iter().enumerate() {
            out.push(Parameter {
                name: format!("tank_area:{}", self.node_ids[self.n_junctions + a]),
                kind: ParamKind::TankArea,
                target: a,
                nominal: *area,
            });
        }
        out
    }

    /// Copy of the model with every parameter multiplied by the matching factor.
    ///
    /// Factors of one reproduce the nominal model; γ is recomputed so diameter
    /// changes reach the inertances.
    pub fn with_factors(&self, factors: &[f64]) -> HydraulicModel {
        assert_eq!(factors.len(), self.theta.len(), "one factor per parameter");
        let mut m = self.clone();
        for (p, &f) in self.theta.iter().zip(factors) {
            let value = p.nominal * f;
            match (p.kind, &mut m.links.get_mut(p.target).map(|l| &mut l.law)) {
                (ParamKind::TankArea, _) => m.tank_area[p.target] = value,
                (ParamKind::Roughness, Some(LinkLaw::Pipe(pp))) => pp.roughness = value,
                (ParamKind::Diameter, Some(LinkLaw::Pipe(pp))) => pp.diameter = value,
                (ParamKind::PumpShutoff, Some(LinkLaw::Pump(pp))) => pp.h0 = value,
                (ParamKind::PumpResistance, Some(LinkLaw::Pump(pp))) => pp.r = value,
                (ParamKind::ValveCoefficient, Some(LinkLaw::Valve(vv))) => vv.coefficient = value,
                _ => unreachable!("parameter table out of sync with links"),
            }
        }
        m.update_gamma();
        m
    }

    /// Indices of the parameters of one kind.
    pub fn parameter_indices(&self, kind: ParamKind) -> Vec<usize> {
        self.theta
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Reference resistance that sets the scale of the closure law on link `e`.
    pub fn closure_reference(&self, e: usize) -> f64 {
        let g = self.options.physics.g;
        match &self.links[e].law {
            LinkLaw::Pipe(p) => velocity_head_resistance(p.diameter, g),
            LinkLaw::Valve(v) => velocity_head_resistance(v.diameter, g),
            LinkLaw::Pump(p) => p.h0.powf(1.0 - 2.0 / p.nu) * p.r.powf(2.0 / p.nu),
        }
    }

    /// Unified link law η: headloss for dissipative links, minus the head gain for pumps.
    pub fn link_law(&self, e: usize, q: f64, u: LinkControl) -> LawEval {
        let r_max = self.options.r_max;
        let (rc, drc) = closure(u.open, self.closure_reference(e), r_max);
        let aq = q.abs();
        let close_eta = rc * q * aq;
        let close_slope = 2.0 * rc * aq;
        let close_dopen = drc * q * aq;
        match &self.links[e].law {
            LinkLaw::Pipe(p) => {
                let (phi, dphi) = pipe_law(q, p, self.headloss, &self.options.physics);
                LawEval {
                    eta: phi + close_eta,
                    slope: dphi + close_slope,
                    d_speed: 0.0,
                    d_open: close_dopen,
                }
            }
            LinkLaw::Pump(p) => {
                let s = u.speed.max(p.speed_floor);
                let (psi, dpsi_dq, dpsi_ds) = pump_psi(q, s, p);
                let f = u.open.clamp(0.0, 1.0);
                LawEval {
                    eta: -f * psi + close_eta,
                    slope: -f * dpsi_dq + close_slope,
                    d_speed: -f * dpsi_ds,
                    d_open: -psi + close_dopen,
                }
            }
            LinkLaw::Valve(v) => {
                let r = valve_resistance(v, u.setting, self.options.physics.g);
                LawEval {
                    eta: r * q * aq + close_eta,
                    slope: 2.0 * r * aq + close_slope,
                    d_speed: 0.0,
                    d_open: close_dopen,
                }
            }
        }
    }

    /// Incremental slope ∂η/∂q, floored so it stays strictly positive.
    pub fn link_slope(&self, e: usize, q: f64, u: LinkControl) -> f64 {
        self.link_law(e, q, u).slope.max(self.options.slope_floor)
    }

    /// Whether the slope floor is active for link `e` at flow `q`.
    pub fn slope_floored(&self, e: usize, q: f64, u: LinkControl) -> bool {
        self.link_law(e, q, u).slope < self.options.slope_floor
    }

    /// Signed node × link incidence, +1 at the upstream node and −1 downstream.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut n = DMatrix::zeros(self.n_nodes(), self.n_links());
        for (e, l) in self.links.iter().enumerate() {
            n[(l.from, e)] += 1.0;
            n[(l.to, e)] -= 1.0;
        }
        n
    }

    /// Junction, tank and reservoir row blocks of the incidence matrix.
    pub fn incidence_blocks(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.incidence();
        let (nj, na) = (self.n_junctions, self.n_tanks);
        (
            n.rows(0, nj).into_owned(),
            n.rows(nj, na).into_owned(),
            n.rows(nj + na, self.n_reservoirs).into_owned(),
        )
    }

    /// Incidence blocks restricted to the columns of one link class.
    pub fn class_incidence(&self, kind: LinkKind) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let cols: Vec<usize> = (0..self.n_links()).filter(|&e| self.links[e].kind == kind).collect();
        let (nj, na, nr) = self.incidence_blocks();
        (
            nj.select_columns(cols.iter()),
            na.select_columns(cols.iter()),
            nr.select_columns(cols.iter()),
        )
    }

    /// Connected component label of every node over the links marked active.
    pub fn components(&self, active: &[bool]) -> (Vec<usize>, usize) {
        let n = self.n_nodes();
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for (e, l) in self.links.iter().enumerate() {
            if active[e] {
                let (a, b) = (root(&mut parent, l.from), root(&mut parent, l.to));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        let mut out = vec![0; n];
        for i in 0..n {
            let r = root(&mut parent, i);
            if label[r] == usize::MAX {
                label[r] = count;
                count += 1;
            }
            out[i] = label[r];
        }
        (out, count)
    }

    /// Model summary for export.
    pub fn summary(&self) -> serde_json::Value {
        let mut gammas = self.gamma.clone();
        gammas.sort_by(f64::total_cmp);
        serde_json::json!({
            "n_junctions": self.n_junctions,
            "n_tanks": self.n_tanks,
            "n_reservoirs": self.n_reservoirs,
            "n_pipes": self.n_pipes,
            "n_pumps": self.n_pumps,
            "n_valves": self.n_valves,
            "gamma_min": gammas.first(),
            "gamma_max": gammas.last(),
            "gamma_median": gammas.get(gammas.len() / 2),
            "theta": self.theta.iter().map(|p| p.name.clone()).collect::<Vec<_>>(),
            "r_max": self.options.r_max,
            "slope_floor": self.options.slope_floor,
        })
    }
}
