#![no_main]

use libfuzzer_sys::fuzz_target;
use splatfill::camera::{cameras_to_json, parse_cameras_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cams) = parse_cameras_json(text) {
        let back = parse_cameras_json(&cameras_to_json(&cams)).expect("serialized cameras parse");
        assert_eq!(back.len(), cams.len());
    }
});
