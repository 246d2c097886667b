#![no_main]

use libfuzzer_sys::fuzz_target;
use sslmil::config::ExperimentConfig;

fuzz_target!(|text: &str| {
    if let Ok(config) = ExperimentConfig::parse(text) {
        // the flat dump must parse back to the same config
        let again = ExperimentConfig::parse(&config.to_flat_string()).unwrap();
        assert_eq!(again.hash(), config.hash());
    }
});
