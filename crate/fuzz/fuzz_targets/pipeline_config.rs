#![no_main]
use std::path::Path;

use libfuzzer_sys::fuzz_target;
use u2ut_cli::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PipelineConfig::parse(text, Path::new("."));
    }
});
