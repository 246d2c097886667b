#![no_main]

use libfuzzer_sys::fuzz_target;
use sslmil::data::{Dataset, DatasetManifest};

fuzz_target!(|data: &[u8]| {
    // trailing bytes after a NUL act as the instance blob
    let (json, blob) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(manifest) = DatasetManifest::parse(json) {
        let _ = manifest.total_instances();
        let _ = Dataset::decode(manifest, blob);
    }
});
