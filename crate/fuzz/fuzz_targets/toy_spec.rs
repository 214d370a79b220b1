#![no_main]
use libfuzzer_sys::fuzz_target;
use u2ut_core::synth::ToySpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = ToySpec::parse(text) {
            let _ = spec.validate();
        }
    }
});
