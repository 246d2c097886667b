//! Replays the checked-in fuzz seeds through the same checks the fuzz
//! targets run, so regressions surface without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use sslmil::config::ExperimentConfig;
use sslmil::data::{Dataset, DatasetManifest, PlantedTruth};
use sslmil::encoder::CheckpointManifest;
use sslmil::io::{decode_f32_le, encode_f32_le};
use sslmil::metrics::{parse_attention_csv, parse_predictions_csv, write_attention_csv, MetricsReport};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok()
}

#[test]
fn dataset_manifest_seeds() {
    let mut decoded = 0;
    for (_, data) in seeds("dataset_manifest") {
        let (json, blob) = match data.iter().position(|&b| b == 0) {
            Some(i) => (&data[..i], &data[i + 1..]),
            None => (&data[..], &[][..]),
        };
        if let Ok(m) = DatasetManifest::parse(json) {
            decoded += Dataset::decode(m, blob).is_ok() as usize;
        }
    }
    assert_eq!(decoded, 1);
}

#[test]
fn planted_truth_seeds() {
    let parsed: Vec<bool> = seeds("planted_truth").iter().map(|(_, d)| PlantedTruth::parse(d).is_ok()).collect();
    assert_eq!(parsed, [true, false]);
}

#[test]
fn checkpoint_manifest_seeds() {
    for (name, data) in seeds("checkpoint_manifest") {
        let m = CheckpointManifest::parse(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(m.total_len().unwrap() > 0);
    }
}

#[test]
fn config_seeds() {
    for (name, data) in seeds("config") {
        match ExperimentConfig::parse(text(&data).unwrap()) {
            Ok(c) => assert_eq!(ExperimentConfig::parse(&c.to_flat_string()).unwrap().hash(), c.hash()),
            Err(_) => assert_eq!(name, "bad_type"),
        }
    }
}

#[test]
fn attention_csv_seeds() {
    for (name, data) in seeds("attention_csv") {
        match parse_attention_csv(text(&data).unwrap()) {
            Ok((c, records)) => {
                let again = write_attention_csv(&records, c).unwrap();
                assert_eq!(parse_attention_csv(&again).unwrap(), (c, records));
            }
            Err(_) => assert_eq!(name, "nan"),
        }
    }
}

#[test]
fn predictions_csv_seeds() {
    for (name, data) in seeds("predictions_csv") {
        match parse_predictions_csv(text(&data).unwrap()) {
            Ok(p) => {
                MetricsReport::compute(&p, None).unwrap();
            }
            Err(_) => assert_eq!(name, "label_out_of_range"),
        }
    }
}

#[test]
fn f32_blob_seeds() {
    for (name, data) in seeds("f32_blob") {
        match decode_f32_le(&data, data.len() / 4) {
            Ok(v) => assert_eq!(encode_f32_le(v.iter().map(|&x| f64::from(x))), data),
            Err(_) => assert_eq!(name, "nan"),
        }
        assert!(decode_f32_le(&data, data.len() / 4 + 1).is_err());
    }
}
