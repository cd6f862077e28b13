#![no_main]
use libfuzzer_sys::fuzz_target;
use morphlab::sphere::embeddings_from_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = embeddings_from_csv(text) {
            for (_, e) in rows {
                let n: f64 = e.as_slice().iter().map(|v| v * v).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }
});
