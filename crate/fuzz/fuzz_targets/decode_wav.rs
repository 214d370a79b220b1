#![no_main]
use libfuzzer_sys::fuzz_target;
use u2ut_core::audio::{decode_wav, encode_wav};

fuzz_target!(|data: &[u8]| {
    if let Ok(audio) = decode_wav(data) {
        // anything accepted must survive a re-encode
        let again = decode_wav(&encode_wav(&audio)).expect("re-encoded WAV decodes");
        assert_eq!(again.len(), audio.len());
    }
});
