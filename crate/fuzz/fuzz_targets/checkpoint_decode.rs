#![no_main]

use libfuzzer_sys::fuzz_target;
use vpbsd_core::pipeline::ModelCheckpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = ModelCheckpoint::decode(data) {
        let bytes = c.encode();
        assert_eq!(ModelCheckpoint::decode(&bytes).unwrap().encode(), bytes);
    }
});
