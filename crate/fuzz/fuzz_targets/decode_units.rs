#![no_main]
use libfuzzer_sys::fuzz_target;
use u2ut_core::seqprep::{decode_units, encode_units};

fuzz_target!(|data: &[u8]| {
    if let Ok(units) = decode_units(data) {
        assert_eq!(encode_units(&units).unwrap(), data);
    }
});
