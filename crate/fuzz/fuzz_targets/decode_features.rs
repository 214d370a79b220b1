#![no_main]
use libfuzzer_sys::fuzz_target;
use u2ut_core::quantizer::{decode_features, encode_features};

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = decode_features(data) {
        assert_eq!(decode_features(&encode_features(&f)).unwrap(), f);
    }
});
