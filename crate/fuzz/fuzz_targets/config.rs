#![no_main]

use libfuzzer_sys::fuzz_target;
use wdn_dae::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = Config::from_toml_str(text) else {
        return;
    };
    let again = Config::from_toml_str(&cfg.to_toml_string()).expect("written config parses");
    assert_eq!(again, cfg);
    let _ = (cfg.model_options(), cfg.solver_settings(), cfg.margin_settings());
});
