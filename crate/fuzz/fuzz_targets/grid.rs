#![no_main]
use libfuzzer_sys::fuzz_target;
use u2ut_core::ablation::parse_grid;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(grid) = parse_grid(text) {
            assert!(grid.rows.iter().all(|r| r.heads > 0 && r.epochs > 0 && r.learning_rate > 0.0));
        }
    }
});
