#![no_main]

use ahcf::harness::config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything accepted must survive a write/read cycle unchanged.
    if let Ok(cfg) = config::parse_config(text) {
        let again = config::parse_config(&cfg.to_toml()).expect("serialized config parses");
        assert_eq!(again, cfg);
    }
});
