#![no_main]

use libfuzzer_sys::fuzz_target;
use sslmil::metrics::{parse_attention_csv, write_attention_csv};

fuzz_target!(|text: &str| {
    if let Ok((c, records)) = parse_attention_csv(text) {
        if let Ok(out) = write_attention_csv(&records, c) {
            assert_eq!(parse_attention_csv(&out).unwrap(), (c, records));
        }
    }
});
