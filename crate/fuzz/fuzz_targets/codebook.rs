#![no_main]
use libfuzzer_sys::fuzz_target;
use u2ut_core::quantizer::Codebook;

fuzz_target!(|data: &[u8]| {
    if let Ok(cb) = Codebook::from_bytes(data) {
        assert_eq!(cb.centroids().len(), cb.k() * cb.dim());
        let bytes = cb.to_bytes();
        assert_eq!(Codebook::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
