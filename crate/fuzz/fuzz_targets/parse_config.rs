#![no_main]

use libfuzzer_sys::fuzz_target;
use personvit::config::parse_config_str;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config_str(text, "fuzz.json", &[]) {
        let echoed = parse_config_str(&cfg.to_json().expect("config serializes"), "resolved.json", &[]).expect("resolved config parses");
        assert_eq!(echoed, cfg);
    }
});
