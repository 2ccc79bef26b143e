#![no_main]

use libfuzzer_sys::fuzz_target;
use splatfill::image_io::{decode_pfm, encode_pfm};

fuzz_target!(|data: &[u8]| {
    if let Ok(depth) = decode_pfm(data) {
        let again = decode_pfm(&encode_pfm(&depth)).expect("encoded depth decodes");
        assert_eq!((again.width(), again.height()), (depth.width(), depth.height()));
    }
});
