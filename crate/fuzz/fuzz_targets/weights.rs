#![no_main]
use libfuzzer_sys::fuzz_target;
use morphlab::weights::ModelWeights;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(w) = ModelWeights::parse(text) {
            let again = ModelWeights::parse(&w.to_text()).expect("re-parse");
            assert_eq!(again, w);
        }
    }
});
