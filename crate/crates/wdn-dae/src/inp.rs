//! Reader and writer for the EPANET `.inp` subset consumed by the hydraulic model.
//!
//! Everything is converted to SI on the way in: metres, cubic metres per second
//! and seconds. The source unit system is kept in [`Provenance`] so that
//! [`write_inp`] can emit the file back in the same units.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::FlowUnits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: String,
    pub elevation: f64,
    pub base_demand: f64,
    pub pattern_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    pub id: String,
    pub head: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tank {
    pub id: String,
    pub elevation: f64,
    pub init_level: f64,
    pub min_level: f64,
    pub max_level: f64,
    pub diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValveStatus {
    Open,
    Active,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValveKind {
    GPV,
    TCV,
    PBV,
    FCV,
    PRV,
    PSV,
}

impl ValveKind {
    pub fn parse(token: &str) -> Option<ValveKind> {
        Some(match token.to_ascii_uppercase().as_str() {
            "GPV" => ValveKind::GPV,
            "TCV" => ValveKind::TCV,
            "PBV" => ValveKind::PBV,
            "FCV" => ValveKind::FCV,
            "PRV" => ValveKind::PRV,
            "PSV" => ValveKind::PSV,
            _ => return None,
        })
    }

    /// Valves that hold a flow or pressure setpoint when active.
    pub fn is_regulating(self) -> bool {
        matches!(self, ValveKind::FCV | ValveKind::PRV | ValveKind::PSV)
    }
}

impl std::fmt::Display for ValveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipe {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length: f64,
    pub diameter: f64,
    pub roughness: f64,
    pub minor_loss: f64,
    pub initial_status: LinkStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pump {
    pub id: String,
    pub from: String,
    pub to: String,
    pub curve_id: String,
    pub speed: f64,
    pub initial_status: LinkStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Valve {
    pub id: String,
    pub from: String,
    pub to: String,
    pub diameter: f64,
    pub kind: ValveKind,
    /// Pressure in metres of head, flow in m³/s, or a dimensionless loss
    /// coefficient, depending on `kind`. Unused for GPV.
    pub setting: f64,
    /// Headloss curve of a GPV.
    pub curve_id: Option<String>,
    pub minor_loss: f64,
    pub status: ValveStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub multipliers: Vec<f64>,
    /// Duration of one multiplier, seconds.
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadlossModel {
    HW,
    DW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Options {
    pub headloss_model: HeadlossModel,
    pub flow_units: FlowUnits,
    pub duration: f64,
    pub hydraulic_step: f64,
    pub pattern_step: f64,
    pub default_pattern: Option<String>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            headloss_model: HeadlossModel::HW,
            flow_units: FlowUnits::Gpm,
            duration: 0.0,
            hydraulic_step: 3600.0,
            pattern_step: 3600.0,
            default_pattern: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlAttribute {
    Speed,
    Setting,
    Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlValue {
    Open,
    Closed,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub time: f64,
    pub link_id: String,
    pub attribute: ControlAttribute,
    pub value: ControlValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// One finding from parsing or validation, serialised as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub id: String,
    pub message: String,
    pub line: Option<usize>,
}

impl Diagnostic {
    fn warning(code: &str, id: &str, message: String, line: Option<usize>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            code: code.to_string(),
            id: id.to_string(),
            message,
            line,
        }
    }

    fn error(code: &str, id: &str, message: String, line: Option<usize>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            code: code.to_string(),
            id: id.to_string(),
            message,
            line,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("diagnostic serialises")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_flow_units: Option<FlowUnits>,
    /// Source line of every declared node and link id.
    pub lines: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub title: Vec<String>,
    pub junctions: Vec<Junction>,
    pub reservoirs: Vec<Reservoir>,
    pub tanks: Vec<Tank>,
    pub pipes: Vec<Pipe>,
    pub pumps: Vec<Pump>,
    pub valves: Vec<Valve>,
    pub curves: BTreeMap<String, Vec<(f64, f64)>>,
    pub patterns: BTreeMap<String, Pattern>,
    pub options: Options,
    pub controls: Vec<Control>,
    pub warnings: Vec<Diagnostic>,
    pub provenance: Provenance,
}

impl NetworkDescription {
    pub fn node_count(&self) -> usize {
        self.junctions.len() + self.tanks.len() + self.reservoirs.len()
    }

    pub fn link_count(&self) -> usize {
        self.pipes.len() + self.pumps.len() + self.valves.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.junctions
            .iter()
            .map(|j| j.id.as_str())
            .chain(self.tanks.iter().map(|t| t.id.as_str()))
            .chain(self.reservoirs.iter().map(|r| r.id.as_str()))
    }

    pub fn link_ids(&self) -> impl Iterator<Item = &str> {
        self.pipes
            .iter()
            .map(|p| p.id.as_str())
            .chain(self.pumps.iter().map(|p| p.id.as_str()))
            .chain(self.valves.iter().map(|v| v.id.as_str()))
    }

    /// Endpoints of every link in pipe, pump, valve order.
    pub fn link_endpoints(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.pipes
            .iter()
            .map(|p| (p.id.as_str(), p.from.as_str(), p.to.as_str()))
            .chain(
                self.pumps
                    .iter()
                    .map(|p| (p.id.as_str(), p.from.as_str(), p.to.as_str())),
            )
            .chain(
                self.valves
                    .iter()
                    .map(|v| (v.id.as_str(), v.from.as_str(), v.to.as_str())),
            )
    }

    fn line_of(&self, id: &str) -> Option<usize> {
        self.provenance.lines.get(id).copied()
    }
}

const SUPPORTED: [&str; 15] = [
    "TITLE",
    "JUNCTIONS",
    "RESERVOIRS",
    "TANKS",
    "PIPES",
    "PUMPS",
    "VALVES",
    "DEMANDS",
    "PATTERNS",
    "CURVES",
    "STATUS",
    "CONTROLS",
    "TIMES",
    "OPTIONS",
    "END",
];

struct Row {
    line: usize,
    tokens: Vec<String>,
}

impl Row {
    fn expect(&self, min: usize, what: &str) -> Result<()> {
        if self.tokens.len() < min {
            return Err(Error::MalformedLine {
                line: self.line,
                message: format!(
                    "{what} row needs at least {min} fields, found {}",
                    self.tokens.len()
                ),
            });
        }
        Ok(())
    }

    fn num(&self, i: usize) -> Result<f64> {
        let tok = &self.tokens[i];
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::MalformedLine {
                line: self.line,
                message: format!("`{tok}` is not a number"),
            }),
        }
    }

    fn opt_num(&self, i: usize, default: f64) -> Result<f64> {
        if i < self.tokens.len() {
            self.num(i)
        } else {
            Ok(default)
        }
    }
}

struct Sections {
    rows: HashMap<String, Vec<Row>>,
    title: Vec<String>,
    warnings: Vec<Diagnostic>,
}

fn split_sections(text: &str) -> Sections {
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    let mut title = Vec::new();
    let mut warnings = Vec::new();
    let mut current: Option<String> = None;
    let mut warned = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split(';').next().unwrap_or("").trim();
        if body.starts_with('[') {
            let name = body
                .trim_start_matches('[')
                .split(']')
                .next()
                .unwrap_or("")
                .trim()
                .to_ascii_uppercase();
            if !SUPPORTED.contains(&name.as_str()) && warned.insert(name.clone()) {
                warnings.push(Diagnostic::warning(
                    "SkippedSection",
                    &name,
                    format!("section [{name}] is not used by the hydraulic model"),
                    Some(line),
                ));
            }
            current = Some(name);
            continue;
        }
        if body.is_empty() {
            continue;
        }
        match current.as_deref() {
            Some("END") => break,
            Some("TITLE") => title.push(body.to_string()),
            Some(name) if SUPPORTED.contains(&name) => {
                rows.entry(name.to_string()).or_default().push(Row {
                    line,
                    tokens: body.split_whitespace().map(str::to_string).collect(),
                });
            }
            Some(_) => {}
            None => warnings.push(Diagnostic::warning(
                "OrphanLine",
                "",
                "data line outside any section ignored".to_string(),
                Some(line),
            )),
        }
    }
    Sections {
        rows,
        title,
        warnings,
    }
}

/// Parses `h:mm[:ss]` or a number with an optional unit word (hours by default).
fn parse_duration(tokens: &[String], line: usize) -> Result<f64> {
    let bad = || Error::MalformedLine {
        line,
        message: format!("cannot read a time from `{}`", tokens.join(" ")),
    };
    let first = tokens.first().ok_or_else(bad)?;
    if first.contains(':') {
        let mut parts = first.split(':').map(|p| p.parse::<f64>());
        let h = parts.next().and_then(|p| p.ok()).ok_or_else(bad)?;
        let m = parts.next().and_then(|p| p.ok()).unwrap_or(0.0);
        let s = parts.next().and_then(|p| p.ok()).unwrap_or(0.0);
        let mut secs = h * 3600.0 + m * 60.0 + s;
        if let Some(ampm) = tokens.get(1) {
            match ampm.to_ascii_uppercase().as_str() {
                "PM" if h < 12.0 => secs += 12.0 * 3600.0,
                "AM" if h == 12.0 => secs -= 12.0 * 3600.0,
                _ => {}
            }
        }
        return Ok(secs);
    }
    let v: f64 = first.parse().map_err(|_| bad())?;
    let scale = match tokens.get(1).map(|u| u.to_ascii_uppercase()) {
        None => 3600.0,
        Some(u) => match u.as_str() {
            "SEC" | "SECS" | "SECOND" | "SECONDS" => 1.0,
            "MIN" | "MINS" | "MINUTE" | "MINUTES" => 60.0,
            "HOUR" | "HOURS" | "HR" | "HRS" => 3600.0,
            "DAY" | "DAYS" => 86400.0,
            _ => return Err(bad()),
        },
    };
    Ok(v * scale)
}

fn format_duration(secs: f64) -> String {
    if secs >= 0.0 && secs.fract() == 0.0 && secs < 1e12 {
        let s = secs as u64;
        format!("{}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
    } else {
        format!("{} HOURS", secs / 3600.0)
    }
}

/// Parses INP text into an SI-normalised [`NetworkDescription`].
pub fn parse_inp(text: &str) -> Result<NetworkDescription> {
    let mut sec = split_sections(text);
    let mut warnings = std::mem::take(&mut sec.warnings);
    let rows = |name: &str| sec.rows.get(name).map(Vec::as_slice).unwrap_or(&[]);

    let mut options = Options::default();
    let mut units_given = false;
    let mut demand_multiplier = 1.0;
    for row in rows("OPTIONS") {
        let key = row.tokens[0].to_ascii_uppercase();
        match key.as_str() {
            "UNITS" => {
                row.expect(2, "UNITS")?;
                options.flow_units =
                    FlowUnits::parse(&row.tokens[1]).ok_or_else(|| Error::UnsupportedUnits {
                        token: row.tokens[1].clone(),
                        line: row.line,
                    })?;
                units_given = true;
            }
            "HEADLOSS" => {
                row.expect(2, "HEADLOSS")?;
                options.headloss_model = match row.tokens[1].to_ascii_uppercase().as_str() {
                    "H-W" => HeadlossModel::HW,
                    "D-W" => HeadlossModel::DW,
                    other => {
                        return Err(Error::UnsupportedFeature {
                            what: format!("headloss formula {other}"),
                            line: row.line,
                        })
                    }
                };
            }
            "PATTERN" => {
                row.expect(2, "PATTERN")?;
                options.default_pattern = Some(row.tokens[1].clone());
            }
            "DEMAND" if row.tokens.len() >= 3
                && row.tokens[1].eq_ignore_ascii_case("MULTIPLIER") =>
            {
                demand_multiplier = row.num(2)?;
            }
            _ => warnings.push(Diagnostic::warning(
                "IgnoredOption",
                &key,
                format!("option `{}` has no effect on the model", row.tokens.join(" ")),
                Some(row.line),
            )),
        }
    }
    let fu = options.flow_units;
    let qf = fu.to_si();
    let lf = fu.length();
    let df = fu.diameter();

    for row in rows("TIMES") {
        let key: Vec<String> = row.tokens.iter().map(|t| t.to_ascii_uppercase()).collect();
        let (target, rest) = match key[0].as_str() {
            "DURATION" => (Some(&mut options.duration), &row.tokens[1..]),
            "HYDRAULIC" if key.get(1).map(String::as_str) == Some("TIMESTEP") => {
                (Some(&mut options.hydraulic_step), &row.tokens[2..])
            }
            "PATTERN" if key.get(1).map(String::as_str) == Some("TIMESTEP") => {
                (Some(&mut options.pattern_step), &row.tokens[2..])
            }
            _ => (None, &row.tokens[..0]),
        };
        match target {
            Some(t) => *t = parse_duration(rest, row.line)?,
            None => warnings.push(Diagnostic::warning(
                "IgnoredOption",
                &key[0],
                format!("time option `{}` has no effect", row.tokens.join(" ")),
                Some(row.line),
            )),
        }
    }

    let mut patterns: BTreeMap<String, Pattern> = BTreeMap::new();
    for row in rows("PATTERNS") {
        row.expect(2, "PATTERNS")?;
        let entry = patterns.entry(row.tokens[0].clone()).or_insert(Pattern {
            multipliers: Vec::new(),
            step: options.pattern_step,
        });
        for i in 1..row.tokens.len() {
            entry.multipliers.push(row.num(i)?);
        }
    }

    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows("CURVES") {
        if row.tokens.len() != 3 {
            return Err(Error::MalformedLine {
                line: row.line,
                message: format!("curve row needs 3 fields, found {}", row.tokens.len()),
            });
        }
        curves
            .entry(row.tokens[0].clone())
            .or_default()
            .push((row.num(1)? * qf, row.num(2)? * lf));
    }

    let mut lines: BTreeMap<String, usize> = BTreeMap::new();
    let mut node_kind: HashMap<String, char> = HashMap::new();
    let mut declare = |id: &str, kind: char, line: usize| -> Result<()> {
        if node_kind.insert(id.to_string(), kind).is_some() {
            return Err(Error::MalformedLine {
                line,
                message: format!("duplicate id `{id}`"),
            });
        }
        lines.insert(id.to_string(), line);
        Ok(())
    };

    let mut junctions = Vec::new();
    for row in rows("JUNCTIONS") {
        row.expect(2, "JUNCTIONS")?;
        if row.tokens.len() > 4 {
            return Err(Error::MalformedLine {
                line: row.line,
                message: "junction row has more than 4 fields".to_string(),
            });
        }
        declare(&row.tokens[0], 'J', row.line)?;
        junctions.push(Junction {
            id: row.tokens[0].clone(),
            elevation: row.num(1)? * lf,
            base_demand: row.opt_num(2, 0.0)? * qf * demand_multiplier,
            pattern_id: row.tokens.get(3).cloned(),
        });
    }
    let mut reservoirs = Vec::new();
    for row in rows("RESERVOIRS") {
        row.expect(2, "RESERVOIRS")?;
        declare(&row.tokens[0], 'R', row.line)?;
        if row.tokens.len() > 2 {
            warnings.push(Diagnostic::warning(
                "IgnoredField",
                &row.tokens[0],
                "reservoir head pattern ignored; reservoir heads are constant".to_string(),
                Some(row.line),
            ));
        }
        reservoirs.push(Reservoir {
            id: row.tokens[0].clone(),
            head: row.num(1)? * lf,
        });
    }
    let mut tanks = Vec::new();
    for row in rows("TANKS") {
        row.expect(6, "TANKS")?;
        declare(&row.tokens[0], 'T', row.line)?;
        if row.tokens.len() > 7 && row.tokens[7] != "*" {
            warnings.push(Diagnostic::warning(
                "IgnoredField",
                &row.tokens[0],
                "tank volume curve ignored; tanks are cylindrical".to_string(),
                Some(row.line),
            ));
        }
        tanks.push(Tank {
            id: row.tokens[0].clone(),
            elevation: row.num(1)? * lf,
            init_level: row.num(2)? * lf,
            min_level: row.num(3)? * lf,
            max_level: row.num(4)? * lf,
            diameter: row.num(5)? * lf,
        });
    }
    if junctions.is_empty() && reservoirs.is_empty() && tanks.is_empty() {
        return Err(Error::MissingSection("JUNCTIONS/RESERVOIRS/TANKS".to_string()));
    }

    let resolve = |id: &str, line: usize| -> Result<String> {
        if node_kind.contains_key(id) {
            Ok(id.to_string())
        } else {
            Err(Error::UnresolvedReference {
                kind: "node",
                id: id.to_string(),
                line,
            })
        }
    };
    let mut link_kind: HashMap<String, char> = HashMap::new();
    let mut declare_link = |id: &str, kind: char, line: usize| -> Result<()> {
        if link_kind.insert(id.to_string(), kind).is_some() {
            return Err(Error::MalformedLine {
                line,
                message: format!("duplicate link id `{id}`"),
            });
        }
        Ok(())
    };

    let rough_f = match options.headloss_model {
        HeadlossModel::HW => 1.0,
        HeadlossModel::DW => fu.dw_roughness(),
    };
    let mut pipes = Vec::new();
    for row in rows("PIPES") {
        row.expect(6, "PIPES")?;
        if row.tokens.len() > 8 {
            return Err(Error::MalformedLine {
                line: row.line,
                message: "pipe row has more than 8 fields".to_string(),
            });
        }
        let id = row.tokens[0].clone();
        declare_link(&id, 'P', row.line)?;
        lines.insert(id.clone(), row.line);
        let status = match row.tokens.get(7).map(|s| s.to_ascii_uppercase()) {
            None => LinkStatus::Open,
            Some(s) => match s.as_str() {
                "OPEN" => LinkStatus::Open,
                "CLOSED" => LinkStatus::Closed,
                "CV" => {
                    warnings.push(Diagnostic::warning(
                        "CheckValveIgnored",
                        &id,
                        "check valve on pipe treated as an open pipe".to_string(),
                        Some(row.line),
                    ));
                    LinkStatus::Open
                }
                other => {
                    return Err(Error::MalformedLine {
                        line: row.line,
                        message: format!("unknown pipe status `{other}`"),
                    })
                }
            },
        };
        pipes.push(Pipe {
            from: resolve(&row.tokens[1], row.line)?,
            to: resolve(&row.tokens[2], row.line)?,
            length: row.num(3)? * lf,
            diameter: row.num(4)? * df,
            roughness: row.num(5)? * rough_f,
            minor_loss: row.opt_num(6, 0.0)?,
            initial_status: status,
            id,
        });
    }

    let mut pumps = Vec::new();
    for row in rows("PUMPS") {
        row.expect(5, "PUMPS")?;
        let id = row.tokens[0].clone();
        declare_link(&id, 'M', row.line)?;
        lines.insert(id.clone(), row.line);
        let mut curve = None;
        let mut speed = 1.0;
        let mut k = 3;
        while k < row.tokens.len() {
            let key = row.tokens[k].to_ascii_uppercase();
            if k + 1 >= row.tokens.len() {
                return Err(Error::MalformedLine {
                    line: row.line,
                    message: format!("pump keyword `{key}` has no value"),
                });
            }
            match key.as_str() {
                "HEAD" => curve = Some(row.tokens[k + 1].clone()),
                "SPEED" => speed = row.num(k + 1)?,
                "PATTERN" => warnings.push(Diagnostic::warning(
                    "IgnoredField",
                    &id,
                    "pump speed pattern ignored; use [CONTROLS]".to_string(),
                    Some(row.line),
                )),
                "POWER" => {
                    return Err(Error::UnsupportedFeature {
                        what: format!("constant-power pump `{id}`"),
                        line: row.line,
                    })
                }
                other => {
                    return Err(Error::MalformedLine {
                        line: row.line,
                        message: format!("unknown pump keyword `{other}`"),
                    })
                }
            }
            k += 2;
        }
        let curve_id = curve.ok_or_else(|| Error::MalformedLine {
            line: row.line,
            message: format!("pump `{id}` has no HEAD curve"),
        })?;
        if !curves.contains_key(&curve_id) {
            return Err(Error::UnresolvedReference {
                kind: "curve",
                id: curve_id,
                line: row.line,
            });
        }
        if speed < 0.0 {
            return Err(Error::MalformedLine {
                line: row.line,
                message: format!("pump `{id}` has negative speed"),
            });
        }
        pumps.push(Pump {
            from: resolve(&row.tokens[1], row.line)?,
            to: resolve(&row.tokens[2], row.line)?,
            curve_id,
            speed,
            initial_status: LinkStatus::Open,
            id,
        });
    }

    let mut valves = Vec::new();
    for row in rows("VALVES") {
        row.expect(6, "VALVES")?;
        if row.tokens.len() > 7 {
            return Err(Error::MalformedLine {
                line: row.line,
                message: "valve row has more than 7 fields".to_string(),
            });
        }
        let id = row.tokens[0].clone();
        declare_link(&id, 'W', row.line)?;
        lines.insert(id.clone(), row.line);
        let kind = ValveKind::parse(&row.tokens[4]).ok_or_else(|| Error::MalformedLine {
            line: row.line,
            message: format!("unknown valve type `{}`", row.tokens[4]),
        })?;
        let (setting, curve_id) = match kind {
            ValveKind::GPV => {
                let c = row.tokens[5].clone();
                if !curves.contains_key(&c) {
                    return Err(Error::UnresolvedReference {
                        kind: "curve",
                        id: c,
                        line: row.line,
                    });
                }
                (0.0, Some(c))
            }
            ValveKind::PRV | ValveKind::PSV | ValveKind::PBV => (row.num(5)? * lf, None),
            ValveKind::FCV => (row.num(5)? * qf, None),
            ValveKind::TCV => (row.num(5)?, None),
        };
        valves.push(Valve {
            from: resolve(&row.tokens[1], row.line)?,
            to: resolve(&row.tokens[2], row.line)?,
            diameter: row.num(3)? * df,
            kind,
            setting,
            curve_id,
            minor_loss: row.opt_num(6, 0.0)?,
            status: ValveStatus::Active,
            id,
        });
    }
    if pipes.is_empty() && pumps.is_empty() && valves.is_empty() {
        return Err(Error::MissingSection("PIPES/PUMPS/VALVES".to_string()));
    }
    if reservoirs.is_empty() && tanks.is_empty() {
        return Err(Error::MissingSection("RESERVOIRS/TANKS".to_string()));
    }

    let mut seen_demand: BTreeSet<String> = BTreeSet::new();
    for row in rows("DEMANDS") {
        row.expect(2, "DEMANDS")?;
        let id = &row.tokens[0];
        let Some(j) = junctions.iter_mut().find(|j| &j.id == id) else {
            return Err(Error::UnresolvedReference {
                kind: "junction",
                id: id.clone(),
                line: row.line,
            });
        };
        let q = row.num(1)? * qf * demand_multiplier;
        let pat = row.tokens.get(2).cloned();
        if seen_demand.insert(id.clone()) {
            j.base_demand = q;
            j.pattern_id = pat;
        } else if j.pattern_id == pat {
            j.base_demand += q;
        } else {
            warnings.push(Diagnostic::warning(
                "DemandCategoryDropped",
                id,
                "additional demand category with a different pattern ignored".to_string(),
                Some(row.line),
            ));
        }
    }

    for row in rows("STATUS") {
        row.expect(2, "STATUS")?;
        let id = &row.tokens[0];
        let word = row.tokens[1].to_ascii_uppercase();
        match link_kind.get(id) {
            None => {
                return Err(Error::UnresolvedReference {
                    kind: "link",
                    id: id.clone(),
                    line: row.line,
                })
            }
            Some('P') => {
                let p = pipes.iter_mut().find(|p| &p.id == id).unwrap();
                p.initial_status = match word.as_str() {
                    "OPEN" => LinkStatus::Open,
                    "CLOSED" => LinkStatus::Closed,
                    _ => {
                        return Err(Error::MalformedLine {
                            line: row.line,
                            message: format!("invalid pipe status `{word}`"),
                        })
                    }
                };
            }
            Some('M') => {
                let p = pumps.iter_mut().find(|p| &p.id == id).unwrap();
                match word.as_str() {
                    "OPEN" => p.initial_status = LinkStatus::Open,
                    "CLOSED" => p.initial_status = LinkStatus::Closed,
                    _ => p.speed = row.num(1)?,
                }
            }
            Some(_) => {
                let v = valves.iter_mut().find(|v| &v.id == id).unwrap();
                match word.as_str() {
                    "OPEN" => v.status = ValveStatus::Open,
                    "CLOSED" => v.status = ValveStatus::Closed,
                    "ACTIVE" => v.status = ValveStatus::Active,
                    _ => {
                        v.setting = row.num(1)?
                            * match v.kind {
                                ValveKind::PRV | ValveKind::PSV | ValveKind::PBV => lf,
                                ValveKind::FCV => qf,
                                _ => 1.0,
                            };
                        v.status = ValveStatus::Active;
                    }
                }
            }
        }
    }

    let mut controls = Vec::new();
    for row in rows("CONTROLS") {
        let upper: Vec<String> = row.tokens.iter().map(|t| t.to_ascii_uppercase()).collect();
        if upper.len() < 6 || upper[0] != "LINK" || upper[3] != "AT" && upper[3] != "IF" {
            return Err(Error::MalformedLine {
                line: row.line,
                message: "control must read `LINK id value AT TIME t`".to_string(),
            });
        }
        if upper[3] == "IF" || upper[4] != "TIME" {
            warnings.push(Diagnostic::warning(
                "SkippedControl",
                &row.tokens[1],
                "only `AT TIME` controls are applied".to_string(),
                Some(row.line),
            ));
            continue;
        }
        let id = &row.tokens[1];
        let kind = *link_kind.get(id).ok_or_else(|| Error::UnresolvedReference {
            kind: "link",
            id: id.clone(),
            line: row.line,
        })?;
        let time = parse_duration(&row.tokens[5..], row.line)?;
        let (attribute, value) = match upper[2].as_str() {
            "OPEN" => (ControlAttribute::Status, ControlValue::Open),
            "CLOSED" => (ControlAttribute::Status, ControlValue::Closed),
            _ => {
                let v = row.num(2)?;
                match kind {
                    'M' => (ControlAttribute::Speed, ControlValue::Value(v)),
                    'W' => {
                        let valve = valves.iter().find(|x| &x.id == id).unwrap();
                        let scale = match valve.kind {
                            ValveKind::PRV | ValveKind::PSV | ValveKind::PBV => lf,
                            ValveKind::FCV => qf,
                            _ => 1.0,
                        };
                        (ControlAttribute::Setting, ControlValue::Value(v * scale))
                    }
                    _ => {
                        return Err(Error::UnsupportedFeature {
                            what: format!("numeric setting on pipe `{id}`"),
                            line: row.line,
                        })
                    }
                }
            }
        };
        controls.push(Control {
            time,
            link_id: id.clone(),
            attribute,
            value,
        });
    }

    for j in &junctions {
        if let Some(p) = &j.pattern_id {
            if !patterns.contains_key(p) {
                return Err(Error::UnresolvedReference {
                    kind: "pattern",
                    id: p.clone(),
                    line: lines.get(&j.id).copied().unwrap_or(0),
                });
            }
        }
    }
    for p in patterns.values_mut() {
        p.step = options.pattern_step;
    }

    Ok(NetworkDescription {
        title: std::mem::take(&mut sec.title),
        junctions,
        reservoirs,
        tanks,
        pipes,
        pumps,
        valves,
        curves,
        patterns,
        options,
        controls,
        warnings,
        provenance: Provenance {
            source_flow_units: units_given.then_some(fu),
            lines,
        },
    })
}

fn fmt_num(x: f64) -> String {
    format!("{x:?}")
}

/// Writes a canonical INP file in the description's source flow units.
pub fn write_inp(net: &NetworkDescription) -> String {
    let fu = net.options.flow_units;
    let qf = fu.to_si();
    let lf = fu.length();
    let df = fu.diameter();
    let rough_f = match net.options.headloss_model {
        HeadlossModel::HW => 1.0,
        HeadlossModel::DW => fu.dw_roughness(),
    };
    let setting_scale = |k: ValveKind| match k {
        ValveKind::PRV | ValveKind::PSV | ValveKind::PBV => lf,
        ValveKind::FCV => qf,
        _ => 1.0,
    };
    let mut s = String::new();
    s.push_str("[TITLE]\n");
    for t in &net.title {
        let _ = writeln!(s, "{t}");
    }
    s.push_str("\n[OPTIONS]\n");
    let _ = writeln!(s, "UNITS {}", fu.token());
    let _ = writeln!(
        s,
        "HEADLOSS {}",
        match net.options.headloss_model {
            HeadlossModel::HW => "H-W",
            HeadlossModel::DW => "D-W",
        }
    );
    if let Some(p) = &net.options.default_pattern {
        let _ = writeln!(s, "PATTERN {p}");
    }
    s.push_str("\n[TIMES]\n");
    let _ = writeln!(s, "DURATION {}", format_duration(net.options.duration));
    let _ = writeln!(
        s,
        "HYDRAULIC TIMESTEP {}",
        format_duration(net.options.hydraulic_step)
    );
    let _ = writeln!(
        s,
        "PATTERN TIMESTEP {}",
        format_duration(net.options.pattern_step)
    );

    s.push_str("\n[JUNCTIONS]\n");
    for j in &net.junctions {
        let _ = write!(
            s,
            "{} {} {}",
            j.id,
            fmt_num(j.elevation / lf),
            fmt_num(j.base_demand / qf)
        );
        if let Some(p) = &j.pattern_id {
            let _ = write!(s, " {p}");
        }
        s.push('\n');
    }
    s.push_str("\n[RESERVOIRS]\n");
    for r in &net.reservoirs {
        let _ = writeln!(s, "{} {}", r.id, fmt_num(r.head / lf));
    }
    s.push_str("\n[TANKS]\n");
    for t in &net.tanks {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} 0",
            t.id,
            fmt_num(t.elevation / lf),
            fmt_num(t.init_level / lf),
            fmt_num(t.min_level / lf),
            fmt_num(t.max_level / lf),
            fmt_num(t.diameter / lf)
        );
    }
    s.push_str("\n[PIPES]\n");
    for p in &net.pipes {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            p.id,
            p.from,
            p.to,
            fmt_num(p.length / lf),
            fmt_num(p.diameter / df),
            fmt_num(p.roughness / rough_f),
            fmt_num(p.minor_loss),
            match p.initial_status {
                LinkStatus::Open => "OPEN",
                LinkStatus::Closed => "CLOSED",
            }
        );
    }
    s.push_str("\n[PUMPS]\n");
    for p in &net.pumps {
        let _ = write!(s, "{} {} {} HEAD {}", p.id, p.from, p.to, p.curve_id);
        if p.speed != 1.0 {
            let _ = write!(s, " SPEED {}", fmt_num(p.speed));
        }
        s.push('\n');
    }
    s.push_str("\n[VALVES]\n");
    for v in &net.valves {
        let setting = match (&v.curve_id, v.kind) {
            (Some(c), ValveKind::GPV) => c.clone(),
            _ => fmt_num(v.setting / setting_scale(v.kind)),
        };
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            v.id,
            v.from,
            v.to,
            fmt_num(v.diameter / df),
            v.kind,
            setting,
            fmt_num(v.minor_loss)
        );
    }
    s.push_str("\n[STATUS]\n");
    for p in &net.pumps {
        if p.initial_status == LinkStatus::Closed {
            let _ = writeln!(s, "{} CLOSED", p.id);
        }
    }
    for v in &net.valves {
        match v.status {
            ValveStatus::Open => {
                let _ = writeln!(s, "{} OPEN", v.id);
            }
            ValveStatus::Closed => {
                let _ = writeln!(s, "{} CLOSED", v.id);
            }
            ValveStatus::Active => {}
        }
    }
    s.push_str("\n[PATTERNS]\n");
    for (id, p) in &net.patterns {
        for chunk in p.multipliers.chunks(6) {
            let _ = write!(s, "{id}");
            for m in chunk {
                let _ = write!(s, " {}", fmt_num(*m));
            }
            s.push('\n');
        }
    }
    s.push_str("\n[CURVES]\n");
    for (id, pts) in &net.curves {
        for (q, h) in pts {
            let _ = writeln!(s, "{id} {} {}", fmt_num(q / qf), fmt_num(h / lf));
        }
    }
    s.push_str("\n[CONTROLS]\n");
    for c in &net.controls {
        let value = match c.value {
            ControlValue::Open => "OPEN".to_string(),
            ControlValue::Closed => "CLOSED".to_string(),
            ControlValue::Value(v) => {
                let scale = net
                    .valves
                    .iter()
                    .find(|x| x.id == c.link_id)
                    .map(|x| setting_scale(x.kind))
                    .unwrap_or(1.0);
                fmt_num(v / scale)
            }
        };
        let _ = writeln!(
            s,
            "LINK {} {} AT TIME {}",
            c.link_id,
            value,
            format_duration(c.time)
        );
    }
    s.push_str("\n[END]\n");
    s
}

/// Checks the structural invariants of a description, one diagnostic per violation.
pub fn validate(net: &NetworkDescription) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut nodes: BTreeSet<&str> = BTreeSet::new();
    for id in net.node_ids() {
        if !nodes.insert(id) {
            out.push(Diagnostic::error(
                "DuplicateId",
                id,
                format!("node `{id}` declared more than once"),
                net.line_of(id),
            ));
        }
    }
    let mut links: BTreeSet<&str> = BTreeSet::new();
    for (id, from, to) in net.link_endpoints() {
        if !links.insert(id) {
            out.push(Diagnostic::error(
                "DuplicateId",
                id,
                format!("link `{id}` declared more than once"),
                net.line_of(id),
            ));
        }
        for end in [from, to] {
            if !nodes.contains(end) {
                out.push(Diagnostic::error(
                    "UnresolvedReference",
                    id,
                    format!("link `{id}` references undeclared node `{end}`"),
                    net.line_of(id),
                ));
            }
        }
        if from == to {
            out.push(Diagnostic::error(
                "SelfLoop",
                id,
                format!("link `{id}` starts and ends at `{from}`"),
                net.line_of(id),
            ));
        }
    }
    if net.reservoirs.is_empty() && net.tanks.is_empty() {
        out.push(Diagnostic::error(
            "NoHeadAnchor",
            "",
            "network has neither a reservoir nor a tank".to_string(),
            None,
        ));
    }
    for t in &net.tanks {
        let ok = t.max_level >= t.init_level && t.init_level >= t.min_level && t.min_level >= 0.0;
        if !ok {
            out.push(Diagnostic::error(
                "TankLevels",
                &t.id,
                format!(
                    "tank `{}` levels violate max >= init >= min >= 0 ({} / {} / {})",
                    t.id, t.max_level, t.init_level, t.min_level
                ),
                net.line_of(&t.id),
            ));
        }
        if t.diameter <= 0.0 {
            out.push(Diagnostic::error(
                "NonPositiveGeometry",
                &t.id,
                format!("tank `{}` diameter must be positive", t.id),
                net.line_of(&t.id),
            ));
        }
    }
    for p in &net.pipes {
        if p.length <= 0.0 || p.diameter <= 0.0 {
            out.push(Diagnostic::error(
                "NonPositiveGeometry",
                &p.id,
                format!("pipe `{}` length and diameter must be positive", p.id),
                net.line_of(&p.id),
            ));
        }
        if p.roughness <= 0.0 && net.options.headloss_model == HeadlossModel::HW {
            out.push(Diagnostic::error(
                "NonPositiveGeometry",
                &p.id,
                format!("pipe `{}` Hazen-Williams coefficient must be positive", p.id),
                net.line_of(&p.id),
            ));
        }
    }
    for v in &net.valves {
        if v.diameter <= 0.0 {
            out.push(Diagnostic::error(
                "NonPositiveGeometry",
                &v.id,
                format!("valve `{}` diameter must be positive", v.id),
                net.line_of(&v.id),
            ));
        }
        if let Some(c) = &v.curve_id {
            if !net.curves.contains_key(c) {
                out.push(Diagnostic::error(
                    "UnresolvedReference",
                    &v.id,
                    format!("valve `{}` references undeclared curve `{c}`", v.id),
                    net.line_of(&v.id),
                ));
            }
        }
    }
    for p in &net.pumps {
        match net.curves.get(&p.curve_id) {
            None => out.push(Diagnostic::error(
                "UnresolvedReference",
                &p.id,
                format!("pump `{}` references undeclared curve `{}`", p.id, p.curve_id),
                net.line_of(&p.id),
            )),
            Some(pts) if pts.is_empty() => out.push(Diagnostic::error(
                "EmptyCurve",
                &p.id,
                format!("pump curve `{}` has no points", p.curve_id),
                net.line_of(&p.id),
            )),
            Some(_) => {}
        }
        if p.speed < 0.0 {
            out.push(Diagnostic::error(
                "NegativeSpeed",
                &p.id,
                format!("pump `{}` speed is negative", p.id),
                net.line_of(&p.id),
            ));
        }
    }
    for j in &net.junctions {
        if let Some(pat) = &j.pattern_id {
            if !net.patterns.contains_key(pat) {
                out.push(Diagnostic::error(
                    "UnresolvedReference",
                    &j.id,
                    format!("junction `{}` references undeclared pattern `{pat}`", j.id),
                    net.line_of(&j.id),
                ));
            }
        }
    }
    for c in &net.controls {
        if !links.contains(c.link_id.as_str()) {
            out.push(Diagnostic::error(
                "UnresolvedReference",
                &c.link_id,
                format!("control references undeclared link `{}`", c.link_id),
                None,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations() {
        let t = |s: &str| {
            let toks: Vec<String> = s.split_whitespace().map(str::to_string).collect();
            parse_duration(&toks, 1).unwrap()
        };
        assert_eq!(t("24:00"), 86400.0);
        assert_eq!(t("1:30:15"), 5415.0);
        assert_eq!(t("2"), 7200.0);
        assert_eq!(t("15 MIN"), 900.0);
        assert_eq!(t("300 SECONDS"), 300.0);
        assert_eq!(format_duration(5415.0), "1:30:15");
    }

    #[test]
    fn orphan_and_unknown_sections_warn() {
        let text = "junk\n[JUNCTIONS]\nJ 0\n[RESERVOIRS]\nR 10\n[PIPES]\nP R J 10 100 100\n[COORDINATES]\nJ 1 2\n";
        let net = parse_inp(text).unwrap();
        let codes: Vec<&str> = net.warnings.iter().map(|w| w.code.as_str()).collect();
        assert!(codes.contains(&"OrphanLine"));
        assert!(codes.contains(&"SkippedSection"));
    }
}
