#![no_main]

use libfuzzer_sys::fuzz_target;
use vpbsd_core::Volume;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = Volume::decode(data) {
        let bytes = v.encode().unwrap();
        assert_eq!(Volume::decode(&bytes).unwrap().encode().unwrap(), bytes);
    }
});
