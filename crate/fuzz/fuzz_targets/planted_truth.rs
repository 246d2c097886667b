#![no_main]

use libfuzzer_sys::fuzz_target;
use sslmil::data::PlantedTruth;

fuzz_target!(|data: &[u8]| {
    if let Ok(truth) = PlantedTruth::parse(data) {
        let _ = truth.is_planted("b0", 0);
    }
});
