#![no_main]

use libfuzzer_sys::fuzz_target;
use sslmil::metrics::{parse_predictions_csv, MetricsReport};

fuzz_target!(|text: &str| {
    if let Ok(preds) = parse_predictions_csv(text) {
        let _ = MetricsReport::compute(&preds, None);
    }
});
