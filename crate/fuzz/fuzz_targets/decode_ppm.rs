#![no_main]

use libfuzzer_sys::fuzz_target;
use personvit::data::{decode_ppm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm(data) {
        assert_eq!(img.data().len(), img.height() * img.width() * 3);
        let again = decode_ppm(&encode_ppm(&img)).expect("encoded image decodes");
        assert_eq!((again.height(), again.width()), (img.height(), img.width()));
    }
});
