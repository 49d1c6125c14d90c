mod common;

use common::{data, network_text, same_structure};
use proptest::prelude::*;
use serde_json::Value;
use wdn_dae::inp::{parse_inp, validate, write_inp, ControlValue, HeadlossModel, NetworkDescription, Severity};
use wdn_dae::units::FlowUnits;
use wdn_dae::Error;

fn threenodes() -> NetworkDescription {
    parse_inp(&std::fs::read_to_string(data("threenodes.inp")).unwrap()).unwrap()
}

#[test]
fn threenode_counts() {
    let net = threenodes();
    assert_eq!(net.junctions.len(), 1);
    assert_eq!(net.tanks.len(), 1);
    assert_eq!(net.reservoirs.len(), 1);
    assert_eq!(net.pipes.len(), 1);
    assert_eq!(net.pumps.len(), 1);
    assert_eq!(net.valves.len(), 0);
    assert_eq!(net.provenance.source_flow_units, Some(FlowUnits::Lps));
    assert!(validate(&net).is_empty());
}

#[test]
fn empty_text_is_missing_sections() {
    assert!(matches!(parse_inp(""), Err(Error::MissingSection(_))));
    assert!(matches!(parse_inp("[JUNCTIONS]\nJ1 0 0\n[RESERVOIRS]\nR 1\n"), Err(Error::MissingSection(_))));
}

#[test]
fn us_units_convert_to_si() {
    let net = parse_inp(
        "
[JUNCTIONS]
 J1  100  250
[RESERVOIRS]
 R1  300
[PIPES]
 P1  R1  J1  1000  12  120  0  Open
[OPTIONS]
 Units  GPM
",
    )
    .unwrap();
    let p = &net.pipes[0];
    assert!((p.length - 304.8).abs() < 1e-12);
    assert!((p.diameter - 0.3048).abs() < 1e-15);
    assert!((net.junctions[0].elevation - 30.48).abs() < 1e-12);
    assert!((net.reservoirs[0].head - 91.44).abs() < 1e-12);
    let q = net.junctions[0].base_demand;
    assert!((q - 250.0 / 15850.3).abs() <= 1e-5 * q);
    assert_eq!(p.roughness, 120.0);
}

#[test]
fn dw_roughness_is_converted() {
    let net = parse_inp(
        "
[JUNCTIONS]
 J1  0  1
[RESERVOIRS]
 R1  30
[PIPES]
 P1  R1  J1  100  200  0.5  0  Open
[OPTIONS]
 Units  LPS
 Headloss  D-W
",
    )
    .unwrap();
    assert_eq!(net.options.headloss_model, HeadlossModel::DW);
    assert!((net.pipes[0].roughness - 5e-4).abs() < 1e-18);
    assert!((net.pipes[0].diameter - 0.2).abs() < 1e-15);
}

#[test]
fn constructed_errors() {
    let base = "[JUNCTIONS]\nJ1 0 1\n[RESERVOIRS]\nR1 10\n[PIPES]\n";
    assert!(matches!(
        parse_inp(&format!("{base}P1 R1 Z 100 100 100\n")),
        Err(Error::UnresolvedReference { ref id, line: 6, .. }) if id == "Z"
    ));
    assert!(matches!(
        parse_inp(&format!("{base}P1 R1 J1 100 100 100\n[OPTIONS]\nUnits FURLONGS\n")),
        Err(Error::UnsupportedUnits { ref token, line: 8 }) if token == "FURLONGS"
    ));
    assert!(matches!(
        parse_inp(&format!("{base}P1 R1 J1 100\n")),
        Err(Error::MalformedLine { line: 6, .. })
    ));
    assert!(matches!(
        parse_inp(&format!("{base}P1 R1 J1 100 abc 100\n")),
        Err(Error::MalformedLine { line: 6, .. })
    ));
}

#[test]
fn constant_power_pump_is_rejected() {
    let text = "[JUNCTIONS]\nJ1 0 1\n[RESERVOIRS]\nR1 10\n[PUMPS]\nM1 R1 J1 POWER 10\n";
    assert!(matches!(parse_inp(text), Err(Error::UnsupportedFeature { line: 6, .. })));
}

#[test]
fn validation_names_the_offender() {
    let mut net = threenodes();
    net.tanks[0].init_level = -1.0;
    let d = validate(&net);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].id, "8");
    assert_eq!(d[0].severity, Severity::Error);

    let mut net = threenodes();
    net.pipes[0].to = "Z".into();
    let d = validate(&net);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].code, "UnresolvedReference");
    assert_eq!(d[0].id, "1");
    let json: Value = serde_json::from_str(&d[0].to_json_line()).unwrap();
    for key in ["severity", "code", "id", "message", "line"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn comments_blank_lines_and_section_order_do_not_matter() {
    let a = parse_inp(
        "
[JUNCTIONS]
 J1  0  1
 J2  0  2
[RESERVOIRS]
 R1  30
[PIPES]
 P1  R1  J1  100  200  100  0  Open
 P2  J1  J2  100  200  100  0  Open
[OPTIONS]
 Units  LPS
",
    )
    .unwrap();
    let b = parse_inp(
        "
; comment line
[OPTIONS]
 Units  LPS   ; trailing comment

[PIPES]
;ID  from  to
 P1  R1  J1  100  200  100  0  Open

 P2  J1  J2  100  200  100  0  Open
[RESERVOIRS]
 R1  30
[JUNCTIONS]
 J1  0  1
  ; indented comment
 J2  0  2
",
    )
    .unwrap();
    assert!(same_structure(&a, &b, 0.0));
}

#[test]
fn time_controls_are_kept() {
    let net = parse_inp(
        "
[JUNCTIONS]
 J1  0  1
[RESERVOIRS]
 R1  10
[PIPES]
 P1  R1  J1  100  200  100  0  Open
[CONTROLS]
 LINK P1 CLOSED AT TIME 2:30
 LINK P1 OPEN IF NODE J1 ABOVE 10
[OPTIONS]
 Units  LPS
",
    )
    .unwrap();
    assert_eq!(net.controls.len(), 1);
    assert_eq!(net.controls[0].time, 9000.0);
    assert_eq!(net.controls[0].value, ControlValue::Closed);
    assert!(net.warnings.iter().any(|w| w.code == "SkippedControl"));
}

#[test]
fn threenode_round_trip() {
    let net = threenodes();
    let back = parse_inp(&write_inp(&net)).unwrap();
    assert!(same_structure(&net, &back, 1e-12));
}

#[test]
fn unit_factors_invert() {
    for u in FlowUnits::ALL {
        for f in [u.to_si(), u.length(), u.diameter(), u.dw_roughness()] {
            let x = 123.456;
            assert!(((x * f) / f - x).abs() <= 1e-12 * x);
        }
        assert_eq!(FlowUnits::parse(u.token()), Some(u));
        assert_eq!(FlowUnits::parse(&u.token().to_lowercase()), Some(u));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip(text in network_text()) {
        let net = parse_inp(&text).unwrap();
        let back = parse_inp(&write_inp(&net)).unwrap();
        prop_assert!(same_structure(&net, &back, 1e-12), "{}\n{}", text, write_inp(&net));
    }

    #[test]
    fn unit_conversion_is_linear(x in -1e6f64..1e6, unit in 0..FlowUnits::ALL.len()) {
        let u = FlowUnits::ALL[unit];
        prop_assert!(((x * u.to_si()) / u.to_si() - x).abs() <= 1e-12 * x.abs());
    }
}
