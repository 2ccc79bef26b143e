#![no_main]

use libfuzzer_sys::fuzz_target;
use splatfill::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = PipelineConfig::parse(text) {
        let back = PipelineConfig::parse(&cfg.to_key_values()).expect("written config parses");
        assert_eq!(back, cfg);
    }
});
