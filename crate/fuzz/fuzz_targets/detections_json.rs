#![no_main]

use libfuzzer_sys::fuzz_target;

use radcam_core::scene::{detections_to_json, parse_detections};

fuzz_target!(|data: &[u8]| {
    if let Ok(sets) = parse_detections(data) {
        let back = parse_detections(&detections_to_json(&sets)).expect("round trip of valid detections");
        assert_eq!(back.len(), sets.len());
    }
});
