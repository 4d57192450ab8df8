#![no_main]

use libfuzzer_sys::fuzz_target;
use personvit::data::{parse_manifest, render_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text, "fuzz.csv") {
        let again = parse_manifest(&render_manifest(&entries), "fuzz.csv").expect("rendered manifest parses");
        assert_eq!(again, entries);
    }
});
