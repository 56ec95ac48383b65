#![no_main]

use ahcf::harness::config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(pairs) = config::parse_overrides(text) {
        for (k, _) in &pairs {
            assert!(config::DOCUMENTED_KEYS.contains(&k.as_str()));
        }
        let _ = config::resolve("", &pairs);
    }
});
