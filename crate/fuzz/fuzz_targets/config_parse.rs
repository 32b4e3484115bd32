#![no_main]

use libfuzzer_sys::fuzz_target;
use lorafed::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Accepted configs must survive a write/read cycle unchanged.
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        let again = cfg.to_toml_string().expect("serialize accepted config");
        let back = ExperimentConfig::from_toml_str(&again).expect("reparse serialized config");
        assert_eq!(cfg, back);
    }
});
