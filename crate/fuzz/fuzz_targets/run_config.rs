#![no_main]

use libfuzzer_sys::fuzz_target;

use radcam_core::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // A config that parses and validates must round trip through its
        // own serialization with the same fingerprint.
        if let Ok(cfg) = RunConfig::from_toml(text) {
            let back = RunConfig::from_toml(&cfg.to_toml()).expect("round trip of a valid config");
            assert_eq!(back.fingerprint(), cfg.fingerprint());
        }
    }
});
