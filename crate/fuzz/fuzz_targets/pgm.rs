#![no_main]
use libfuzzer_sys::fuzz_target;
use morphlab::image::Image;

fuzz_target!(|data: &[u8]| {
    if let Ok(im) = Image::from_pgm(data) {
        let again = Image::from_pgm(&im.to_pgm()).expect("re-decode");
        assert_eq!(again, im);
    }
});
