#![no_main]

use libfuzzer_sys::fuzz_target;
use sslmil::io::{decode_f32_le, encode_f32_le};

fuzz_target!(|data: &[u8]| {
    for expected in [data.len() / 4, data.len() / 4 + 1, usize::MAX / 2] {
        if let Ok(values) = decode_f32_le(data, expected) {
            let again = encode_f32_le(values.iter().map(|&v| f64::from(v)));
            assert_eq!(again, data);
        }
    }
});
