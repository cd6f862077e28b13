#![no_main]
use libfuzzer_sys::fuzz_target;
use morphlab::pipeline::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = RunConfig::parse(text) {
            assert_eq!(RunConfig::parse(&c.to_text()).expect("re-parse"), c);
        }
    }
});
