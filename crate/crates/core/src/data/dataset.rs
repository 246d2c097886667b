//! On-disk dataset: `manifest.json` (bag table and provenance),
//! `instances.bin` (little-endian `f32`, row-major, one row per instance)
//! and the optional `planted_truth.json`, which training code never reads.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::io::{decode_f32_le, encode_f32_le, read_bytes, write_bytes};
use crate::linalg::Matrix;
use crate::mil::Bag;

pub const DATASET_FORMAT: &str = "sslmil-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "instances.bin";
pub const TRUTH_FILE: &str = "planted_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Provenance {
    Synthetic { seed: u64, config: SyntheticConfig },
    External { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagRecord {
    pub bag_id: String,
    pub label: usize,
    pub n_instances: usize,
    /// First instance row of this bag in the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub n_bags: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub provenance: Provenance,
    pub bags: Vec<BagRecord>,
}

impl DatasetManifest {
    /// Parses a manifest and checks its internal consistency. Blob bounds are
    /// checked separately once the blob size is known.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::format("dataset manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::format("dataset manifest", r));
        if self.format != DATASET_FORMAT || self.version != DATASET_VERSION {
            return bad(format!("unsupported format {:?} v{}", self.format, self.version));
        }
        if self.dtype != "f32-le" {
            return bad(format!("unsupported dtype {:?}", self.dtype));
        }
        if self.feature_dim == 0 || self.n_classes == 0 {
            return bad("zero feature dimension or class count".into());
        }
        if self.n_bags != self.bags.len() {
            return bad(format!("n_bags {} but {} records", self.n_bags, self.bags.len()));
        }
        let mut ids = BTreeSet::new();
        for b in &self.bags {
            if b.label >= self.n_classes {
                return bad(format!("bag {} label {} ≥ {}", b.bag_id, b.label, self.n_classes));
            }
            if b.n_instances == 0 {
                return bad(format!("bag {} is empty", b.bag_id));
            }
            if b.offset.checked_add(b.n_instances).is_none() {
                return bad(format!("bag {} range overflows", b.bag_id));
            }
            if !ids.insert(b.bag_id.as_str()) {
                return bad(format!("duplicate bag id {}", b.bag_id));
            }
        }
        let mut ranges: Vec<(usize, usize)> = self
            .bags
            .iter()
            .map(|b| (b.offset, b.offset + b.n_instances))
            .collect();
        ranges.sort_unstable();
        if ranges.windows(2).any(|w| w[1].0 < w[0].1) {
            return bad("bag instance ranges overlap".into());
        }
        Ok(())
    }

    /// Number of instance rows the bag table reaches into.
    pub fn rows_needed(&self) -> usize {
        self.bags.iter().map(|b| b.offset + b.n_instances).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn total_instances(&self) -> usize {
        self.bags.iter().map(|b| b.n_instances).sum()
    }
}

/// Hidden ground truth: which instances of each bag carry the class signal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedTruth {
    pub planted: BTreeMap<String, Vec<u32>>,
}

impl PlantedTruth {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::format("planted truth", e.to_string()))
    }

    pub fn is_planted(&self, bag_id: &str, instance: u32) -> bool {
        self.planted
            .get(bag_id)
            .is_some_and(|v| v.binary_search(&instance).is_ok())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Self::parse(&read_bytes(&dir.join(TRUTH_FILE))?)
    }
}

/// Manifest plus decoded instance values. Exposes bags and labels only;
/// the planted truth is a separate file and type.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    manifest: DatasetManifest,
    values: Vec<f64>,
}

impl Dataset {
    pub(crate) fn from_parts(manifest: DatasetManifest, values: Vec<f64>) -> Result<Self> {
        manifest.validate()?;
        let rows = values.len() / manifest.feature_dim;
        if values.len() % manifest.feature_dim != 0 || manifest.rows_needed() > rows {
            return Err(Error::format(
                "dataset",
                format!(
                    "blob holds {} values, bag table needs {} rows of {}",
                    values.len(),
                    manifest.rows_needed(),
                    manifest.feature_dim
                ),
            ));
        }
        Ok(Self { manifest, values })
    }

    /// Decodes a blob against a parsed manifest.
    pub fn decode(manifest: DatasetManifest, blob: &[u8]) -> Result<Self> {
        if blob.len() % (4 * manifest.feature_dim) != 0 {
            return Err(Error::format("instance blob", "length is not a whole number of rows"));
        }
        let n = blob.len() / 4;
        let values = decode_f32_le(blob, n)?.into_iter().map(f64::from).collect();
        Self::from_parts(manifest, values)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::parse(&read_bytes(&dir.join(MANIFEST_FILE))?)?;
        let blob = read_bytes(&dir.join(BLOB_FILE))?;
        Self::decode(manifest, &blob)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_bytes(&dir.join(MANIFEST_FILE), &json)?;
        write_bytes(&dir.join(BLOB_FILE), &encode_f32_le(self.values.iter().copied()))
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn n_bags(&self) -> usize {
        self.manifest.bags.len()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.labels()
    }

    pub fn bag_id(&self, i: usize) -> &str {
        &self.manifest.bags[i].bag_id
    }

    pub fn instances(&self, i: usize) -> Matrix {
        let b = &self.manifest.bags[i];
        let d = self.manifest.feature_dim;
        let slice = &self.values[b.offset * d..(b.offset + b.n_instances) * d];
        Matrix::from_raw(b.n_instances, d, slice.to_vec())
    }

    pub fn bag(&self, i: usize) -> Bag {
        let b = &self.manifest.bags[i];
        Bag {
            bag_id: b.bag_id.clone(),
            label: b.label,
            instances: self.instances(i),
            instance_ids: (0..b.n_instances as u32).collect(),
        }
    }

    /// Label-free view of the instances of the given bags, stacked in order.
    pub fn instance_pool(&self, bags: &[usize]) -> InstancePool {
        let d = self.feature_dim();
        let mut data = Vec::new();
        for &i in bags {
            data.extend_from_slice(self.instances(i).data());
        }
        InstancePool {
            features: Matrix::from_raw(data.len() / d, d, data),
        }
    }
}

/// Unlabelled instances for self-supervised pre-training. Carries no bag
/// labels and no planted truth.
#[derive(Debug, Clone)]
pub struct InstancePool {
    features: Matrix,
}

impl InstancePool {
    pub fn new(features: Matrix) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}
