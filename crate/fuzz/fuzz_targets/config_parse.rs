#![no_main]

use libfuzzer_sys::fuzz_target;
use orient_attn::config::{echo_json, parse_config_str};

// Input: the config JSON, then NUL-separated `key=value` overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut parts = text.split('\0');
    let json = parts.next().unwrap_or("");
    let overrides: Vec<String> = parts.map(str::to_string).collect();
    if let Ok(config) = parse_config_str(json, &overrides, None) {
        let echo = echo_json(&config).unwrap();
        assert_eq!(parse_config_str(&echo, &[], None).unwrap(), config);
    }
});
