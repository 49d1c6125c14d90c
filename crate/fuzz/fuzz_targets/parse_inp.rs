#![no_main]

use libfuzzer_sys::fuzz_target;
use wdn_dae::inp::{parse_inp, validate, write_inp};
use wdn_dae::network::{build_model, ModelOptions};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(net) = parse_inp(text) else {
        return;
    };
    let _ = validate(&net);
    let _ = build_model(&net, &ModelOptions::default());
    let again = parse_inp(&write_inp(&net)).expect("written INP parses");
    assert_eq!(again.node_count(), net.node_count());
    assert_eq!(again.link_count(), net.link_count());
});
