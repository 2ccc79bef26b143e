#![no_main]

use libfuzzer_sys::fuzz_target;
use splatfill::ply::{encode_scene_ply, parse_scene_ply};

fuzz_target!(|data: &[u8]| {
    // Anything that parses must survive a re-encode unchanged.
    if let Ok(scene) = parse_scene_ply(data) {
        let bytes = encode_scene_ply(&scene);
        let again = parse_scene_ply(&bytes).expect("re-encoded scene parses");
        assert_eq!(encode_scene_ply(&again), bytes);
    }
});
