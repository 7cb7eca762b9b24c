#![no_main]

use libfuzzer_sys::fuzz_target;
use orient_attn::synth::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_manifest(text);
    }
});
