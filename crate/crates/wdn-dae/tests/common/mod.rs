#![allow(dead_code)]

use std::path::PathBuf;

use proptest::prelude::*;
use serde_json::Value;

use wdn_dae::inp::{parse_inp, NetworkDescription};
use wdn_dae::network::{build_model, HydraulicModel, ModelOptions};
use wdn_dae::units::FlowUnits;

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn load(name: &str) -> (NetworkDescription, HydraulicModel) {
    let text = std::fs::read_to_string(data(name)).unwrap();
    let net = parse_inp(&text).unwrap();
    let model = build_model(&net, &ModelOptions::default()).unwrap();
    (net, model)
}

pub fn model_from(text: &str) -> HydraulicModel {
    build_model(&parse_inp(text).unwrap(), &ModelOptions::default()).unwrap()
}

/// Root of a monotone scalar function on [a, b] by bisection.
pub fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let fa = f(a);
    assert!(fa * f(b) <= 0.0, "bracket does not change sign");
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (f(m) > 0.0) == (fa > 0.0) {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Reservoir feeding a small tank through one pipe; the tank drains through a second pipe
/// into a junction with demand.
pub const SMALL_TANK: &str = "
[JUNCTIONS]
 J1  0  2
 J2  0  3
[RESERVOIRS]
 R1  40
[TANKS]
 T1  10  15  0  40  1.5  0
[PIPES]
 P1  R1  J1  500  200  110  0  Open
 P2  J1  T1  300  150  110  0  Open
 P3  J1  J2  400  150  110  0  Open
 P4  T1  J2  300  150  110  0  Open
[OPTIONS]
 Units  LPS
 Headloss  H-W
";

/// Pump lifting from a reservoir into a junction that feeds a draining tank.
pub const PUMP_TOGGLE: &str = "
[JUNCTIONS]
 J1  0  4
 J2  0  6
[RESERVOIRS]
 R1  10
[TANKS]
 T1  20  10  0  40  6  0
[PIPES]
 P1  J1  J2  400  150  110  0  Open
 P2  T1  J2  300  150  110  0  Open
 P3  R1  J2  800  100  110  0  Open
[PUMPS]
 M1  R1  J1  HEAD C1
[CURVES]
 C1  8  30
[OPTIONS]
 Units  LPS
 Headloss  H-W
";

/// Structural equality with numbers compared to `rel` relative tolerance; line
/// provenance and warnings are ignored.
pub fn same_structure(a: &NetworkDescription, b: &NetworkDescription, rel: f64) -> bool {
    fn close(a: &Value, b: &Value, rel: f64) -> bool {
        match (a, b) {
            (Value::Number(x), Value::Number(y)) => {
                let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
                (x - y).abs() <= rel * x.abs().max(y.abs())
            }
            (Value::Array(x), Value::Array(y)) => {
                x.len() == y.len() && x.iter().zip(y).all(|(u, v)| close(u, v, rel))
            }
            (Value::Object(x), Value::Object(y)) => {
                x.len() == y.len() && x.iter().all(|(k, u)| y.get(k).is_some_and(|v| close(u, v, rel)))
            }
            _ => a == b,
        }
    }
    let strip = |n: &NetworkDescription| {
        let mut n = n.clone();
        n.provenance.lines.clear();
        n.warnings.clear();
        serde_json::to_value(n).unwrap()
    };
    close(&strip(a), &strip(b), rel)
}

/// Random network text: a spanning tree over at least two nodes plus extra pipes, pumps and valves.
pub fn network_text() -> impl Strategy<Value = String> {
    (
        0..FlowUnits::ALL.len(),
        any::<bool>(),
        1usize..6,
        1usize..3,
        0usize..3,
        prop::collection::vec((0.1f64..5e3, 0.01f64..2.0, 1.0f64..200.0, 0.0f64..5.0, any::<bool>()), 12),
        prop::collection::vec((any::<u32>(), any::<u32>()), 12),
        0usize..3,
        0usize..3,
        prop::collection::vec(0.0f64..100.0, 8),
        prop::collection::vec(0.0f64..2.0, 1..10),
    )
        .prop_map(|(unit, dw, nj, nr, nt, pipes, ends, npump, nvalve, nums, mults)| {
            let u = FlowUnits::ALL[unit];
            let nodes: Vec<String> = (0..nj)
                .map(|i| format!("J{i}"))
                .chain((0..nt).map(|i| format!("T{i}")))
                .chain((0..nr).map(|i| format!("R{i}")))
                .collect();
            let mut s = format!("[TITLE]\nrandom network\n[OPTIONS]\nUnits {}\nHeadloss {}\n", u.token(), if dw { "D-W" } else { "H-W" });
            s.push_str("[TIMES]\nDuration 24:00\nPattern Timestep 1:00\n[PATTERNS]\nPAT");
            for m in &mults {
                s.push_str(&format!(" {m}"));
            }
            s.push_str("\n[JUNCTIONS]\n");
            for i in 0..nj {
                let pat = if i % 2 == 0 { " PAT" } else { "" };
                s.push_str(&format!("J{i} {} {}{pat}\n", nums[i % 8], nums[(i + 3) % 8] / 7.0));
            }
            s.push_str("[RESERVOIRS]\n");
            for i in 0..nr {
                s.push_str(&format!("R{i} {}\n", 50.0 + nums[i]));
            }
            s.push_str("[TANKS]\n");
            for i in 0..nt {
                s.push_str(&format!("T{i} {} {} 0 {} {} 0\n", nums[i], nums[i + 1] / 10.0, nums[i + 1] / 10.0 + 5.0, 1.0 + nums[i + 2] / 10.0));
            }
            s.push_str("[CURVES]\nC1 10 30\nC3 0 40\nC3 10 30\nC3 20 10\nG1 0 0\nG1 5 2\n[PIPES]\n");
            let n = nodes.len();
            for i in 1..n {
                let j = (ends[i].0 as usize) % i;
                let (l, d, r, m, open) = pipes[i];
                s.push_str(&format!("P{i} {} {} {l} {} {r} {m} {}\n", nodes[j], nodes[i], d * 100.0, if open { "Open" } else { "Closed" }));
            }
            for (x, (a, b)) in ends.iter().enumerate().take(3) {
                let (a, b) = (*a as usize % n, *b as usize % n);
                if a != b {
                    let (l, d, r, m, _) = pipes[x];
                    s.push_str(&format!("X{x} {} {} {l} {} {r} {m}\n", nodes[a], nodes[b], d * 100.0));
                }
            }
            s.push_str("[PUMPS]\n");
            for i in 0..npump {
                let c = if i == 0 { "C1" } else { "C3" };
                let speed = if i == 1 { " SPEED 0.9" } else { "" };
                s.push_str(&format!("M{i} {} {} HEAD {c}{speed}\n", nodes[n - 1], nodes[i % (n - 1)]));
            }
            s.push_str("[VALVES]\n");
            let kinds = ["TCV", "PBV", "GPV"];
            for i in 0..nvalve {
                let setting = if kinds[i] == "GPV" { "G1".to_string() } else { format!("{}", nums[i] / 10.0) };
                s.push_str(&format!("V{i} {} {} 150 {} {setting} 0.5\n", nodes[0], nodes[n - 1], kinds[i]));
            }
            s.push_str("[STATUS]\n");
            if npump > 0 {
                s.push_str("M0 CLOSED\n");
            }
            if nvalve > 0 {
                s.push_str("V0 OPEN\n");
            }
            s.push_str("[CONTROLS]\n");
            if npump > 0 {
                s.push_str("LINK M0 OPEN AT TIME 3:00\nLINK M0 0.8 AT TIME 5\n");
            }
            if nvalve > 1 {
                s.push_str(&format!("LINK V1 {} AT TIME 1:15\n", nums[7] / 3.0));
            }
            s.push_str("[END]\n");
            s
        })
}
