#![no_main]
use libfuzzer_sys::fuzz_target;
use u2ut_core::eval::tokenize_text;

fuzz_target!(|text: &str| {
    for tok in tokenize_text(text) {
        assert!(!tok.is_empty());
        assert!(!tok.chars().any(char::is_whitespace));
    }
});
