#![no_main]
use libfuzzer_sys::fuzz_target;
use morphlab::eval::{render_svg, VulnerabilityReport};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = VulnerabilityReport::parse(text) {
            let _ = render_svg(&r);
            let _ = r.summary_csv();
        }
    }
});
