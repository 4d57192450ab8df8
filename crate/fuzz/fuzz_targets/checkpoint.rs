#![no_main]

use libfuzzer_sys::fuzz_target;
use personvit::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes().expect("parsed checkpoint serializes");
        Checkpoint::from_bytes(&bytes).expect("serialized checkpoint parses");
    }
});
