#![no_main]

use libfuzzer_sys::fuzz_target;
use sslmil::encoder::CheckpointManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = CheckpointManifest::parse(data) {
        let _ = m.total_len();
    }
});
