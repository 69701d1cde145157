#![no_main]

use libfuzzer_sys::fuzz_target;

use radcam_core::scene::parse_scene;

fuzz_target!(|data: &[u8]| {
    // A scene that parses and validates must survive a serialize-reparse
    // round trip.
    if let Ok(scene) = parse_scene(data) {
        parse_scene(&scene.to_json()).expect("round trip of a valid scene");
    }
});
