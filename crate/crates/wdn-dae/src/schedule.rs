//! Piecewise-constant control and demand schedules.

use crate::error::{Error, Result};
use crate::inp::{ControlAttribute, ControlValue, NetworkDescription};
use crate::network::{ControlState, HydraulicModel, LinkKind};

/// Right-continuous piecewise-constant series: `values[k]` holds on `[times[k], times[k+1])`.
///
/// Before the first breakpoint the first value applies.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn constant(value: f64) -> Series {
        Series {
            times: vec![0.0],
            values: vec![value],
        }
    }

    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Series> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidArgument(
                "series needs matching, non-empty time and value lists".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "breakpoint times must be strictly increasing".into(),
            ));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("series entries must be finite".into()));
        }
        Ok(Series { times, values })
    }

    /// Index of the segment containing `t`.
    pub fn segment(&self, t: f64) -> usize {
        self.times.partition_point(|&b| b <= t).saturating_sub(1)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.values[self.segment(t)]
    }

    /// Inserts a breakpoint at `t` carrying `value` from `t` onward.
    pub fn set_from(&mut self, t: f64, value: f64) {
        let k = self.times.partition_point(|&b| b < t);
        if k < self.times.len() && self.times[k] == t {
            self.values[k] = value;
        } else {
            self.times.insert(k, t);
            self.values.insert(k, value);
        }
        let last = self.times.len() - 1;
        for i in (k + 1)..=last {
            self.values[i] = value;
        }
    }

    /// Smallest gap between breakpoints where the value actually changes.
    pub fn min_switch_gap(&self) -> Option<f64> {
        let switches: Vec<f64> = (1..self.times.len())
            .filter(|&k| self.values[k] != self.values[k - 1])
            .map(|k| self.times[k])
            .collect();
        switches.windows(2).map(|w| w[1] - w[0]).reduce(f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demands {
    pub junction: Vec<f64>,
    pub tank: Vec<f64>,
}

impl Demands {
    pub fn zero(model: &HydraulicModel) -> Demands {
        Demands {
            junction: vec![0.0; model.n_junctions],
            tank: vec![0.0; model.n_tanks],
        }
    }

    pub fn scaled(&self, factor: f64) -> Demands {
        Demands {
            junction: self.junction.iter().map(|d| d * factor).collect(),
            tank: self.tank.iter().map(|d| d * factor).collect(),
        }
    }
}

/// Time-varying inputs seen by the integrators.
pub trait Inputs: Sync {
    fn controls(&self, t: f64) -> ControlState;
    fn demands(&self, t: f64) -> Demands;
    /// Times at which some control channel changes value discontinuously.
    fn control_switches(&self) -> Vec<f64>;
}

/// Per-link control channels and per-node demand series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleInput {
    pub speed: Vec<Series>,
    pub open: Vec<Series>,
    pub setting: Vec<Series>,
    pub demand_junction: Vec<Series>,
    pub demand_tank: Vec<Series>,
}

impl ScheduleInput {
    /// Constant controls and demands.
    pub fn constant(controls: &ControlState, demands: &Demands) -> ScheduleInput {
        let map = |v: &[f64]| v.iter().map(|&x| Series::constant(x)).collect();
        ScheduleInput {
            speed: map(&controls.speed),
            open: map(&controls.open),
            setting: map(&controls.setting),
            demand_junction: map(&demands.junction),
            demand_tank: map(&demands.tank),
        }
    }

    /// Demand patterns and timed link controls of an INP description, over `[0, horizon]`.
    pub fn from_network(
        model: &HydraulicModel,
        net: &NetworkDescription,
        horizon: f64,
    ) -> Result<ScheduleInput> {
        let mut schedule = ScheduleInput::constant(&model.initial_controls, &Demands::zero(model));
        let step = if net.options.pattern_step > 0.0 {
            net.options.pattern_step
        } else {
            3600.0
        };
        for (j, series) in schedule.demand_junction.iter_mut().enumerate() {
            let base = model.base_demand[j];
            let pattern = model.demand_pattern[j]
                .as_ref()
                .and_then(|id| net.patterns.get(id))
                .filter(|p| !p.multipliers.is_empty());
            *series = match pattern {
                None => Series::constant(base),
                Some(p) => {
                    let n = ((horizon / step).floor() as usize + 1).max(1);
                    let times = (0..n).map(|k| k as f64 * step).collect();
                    let values = (0..n)
                        .map(|k| base * p.multipliers[k % p.multipliers.len()])
                        .collect();
                    Series::new(times, values)?
                }
            };
        }
        let mut controls = net.controls.clone();
        controls.sort_by(|a, b| a.time.total_cmp(&b.time));
        for c in &controls {
            let Some(e) = model.link(&c.link_id) else {
                return Err(Error::UnresolvedReference {
                    kind: "link",
                    id: c.link_id.clone(),
                    line: 0,
                });
            };
            let is_pump = model.links[e].kind == LinkKind::Pump;
            match (c.attribute, c.value) {
                (_, ControlValue::Open) => schedule.open[e].set_from(c.time, 1.0),
                (_, ControlValue::Closed) => schedule.open[e].set_from(c.time, 0.0),
                (ControlAttribute::Speed, ControlValue::Value(v))
                | (ControlAttribute::Setting, ControlValue::Value(v))
                    if is_pump =>
                {
                    let s = v * model.options.pump_speed_scale;
                    if s == 0.0 {
                        schedule.open[e].set_from(c.time, 0.0);
                    } else {
                        schedule.speed[e].set_from(c.time, s);
                        schedule.open[e].set_from(c.time, 1.0);
                    }
                }
                (_, ControlValue::Value(v)) => schedule.setting[e].set_from(c.time, v),
            }
        }
        schedule.validate(model)?;
        Ok(schedule)
    }

    /// Channel counts, open fractions and pump speed floors.
    pub fn validate(&self, model: &HydraulicModel) -> Result<()> {
        let nl = model.n_links();
        if self.speed.len() != nl
            || self.open.len() != nl
            || self.setting.len() != nl
            || self.demand_junction.len() != model.n_junctions
            || self.demand_tank.len() != model.n_tanks
        {
            return Err(Error::InvalidArgument(
                "schedule channel counts do not match the model".into(),
            ));
        }
        for (e, o) in self.open.iter().enumerate() {
            if o.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "open fraction of `{}` outside [0, 1]",
                    model.links[e].id
                )));
            }
        }
        let floor = model.options.speed_floor;
        for (e, link) in model.links.iter().enumerate() {
            if link.kind != LinkKind::Pump {
                continue;
            }
            let mut times = self.speed[e].times.clone();
            times.extend(&self.open[e].times);
            for t in times {
                let (s, o) = (self.speed[e].value(t), self.open[e].value(t));
                if o > 0.0 && s < floor {
                    return Err(Error::SpeedBelowFloor {
                        id: link.id.clone(),
                        speed: s,
                        floor,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn control_channels(&self) -> impl Iterator<Item = &Series> {
        self.speed.iter().chain(&self.open).chain(&self.setting)
    }

    /// Copy with every junction and tank demand multiplied by `factor`.
    pub fn with_demand_scale(&self, factor: f64) -> ScheduleInput {
        let mut s = self.clone();
        for series in s.demand_junction.iter_mut().chain(s.demand_tank.iter_mut()) {
            series.values.iter_mut().for_each(|v| *v *= factor);
        }
        s
    }
}

impl Inputs for ScheduleInput {
    fn controls(&self, t: f64) -> ControlState {
        ControlState {
            speed: self.speed.iter().map(|s| s.value(t)).collect(),
            open: self.open.iter().map(|s| s.value(t)).collect(),
            setting: self.setting.iter().map(|s| s.value(t)).collect(),
        }
    }

    fn demands(&self, t: f64) -> Demands {
        Demands {
            junction: self.demand_junction.iter().map(|s| s.value(t)).collect(),
            tank: self.demand_tank.iter().map(|s| s.value(t)).collect(),
        }
    }

    fn control_switches(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .control_channels()
            .flat_map(|s| {
                (1..s.times.len())
                    .filter(|&k| s.values[k] != s.values[k - 1])
                    .map(|k| s.times[k])
            })
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}
