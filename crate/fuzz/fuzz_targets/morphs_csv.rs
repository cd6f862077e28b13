#![no_main]
use libfuzzer_sys::fuzz_target;
use morphlab::pipeline::parse_morphs_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for row in parse_morphs_csv(text).into_iter().flatten() {
            assert!(!row.file.starts_with('/'));
        }
    }
});
