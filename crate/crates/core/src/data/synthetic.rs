use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{
    BagRecord, Dataset, DatasetManifest, PlantedTruth, Provenance, DATASET_FORMAT, DATASET_VERSION,
};
use crate::error::{Error, Result};

/// Planted-instance bag generator settings.
///
/// Bags of the control class hold background instances only. Every other
/// class `c` plants `round(planted_fraction · N)` instances drawn around a
/// class direction `μ_c` (mutually orthogonal, `|μ_c| = class_signal_strength`)
/// among `N` background instances drawn from zero-mean isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_bags_per_class: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub planted_fraction: f64,
    pub feature_dim: usize,
    pub class_signal_strength: f64,
    pub noise_scale: f64,
    pub control_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_bags_per_class: 40,
            instances_min: 30,
            instances_max: 80,
            planted_fraction: 0.15,
            feature_dim: 64,
            class_signal_strength: 2.0,
            noise_scale: 1.0,
            control_class: 0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("synthetic config: {m}")));
        if self.n_classes < 2 {
            return bad("need at least two classes");
        }
        if self.n_bags_per_class == 0 {
            return bad("n_bags_per_class must be positive");
        }
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return bad("instance count range is empty");
        }
        if !(self.planted_fraction > 0.0 && self.planted_fraction < 1.0) {
            return bad("planted_fraction must lie in (0, 1)");
        }
        if !(self.class_signal_strength > 0.0 && self.noise_scale > 0.0) {
            return bad("signal strength and noise scale must be positive");
        }
        if self.control_class >= self.n_classes {
            return bad("control class out of range");
        }
        if self.feature_dim < self.n_classes - 1 {
            return bad("feature_dim too small for orthogonal class directions");
        }
        Ok(())
    }
}

/// Orthogonal directions of the given norm via Gram-Schmidt on Gaussian draws.
fn class_directions(count: usize, dim: usize, norm: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for d in &dirs {
            let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            dirs.push(v);
        }
    }
    dirs.into_iter()
        .map(|d| d.into_iter().map(|x| x * norm).collect())
        .collect()
}

/// Number of planted instances in a non-control bag of `n` instances.
pub fn planted_count(planted_fraction: f64, n: usize) -> usize {
    (planted_fraction * n as f64).round() as usize
}

/// Generates the dataset and its hidden planted truth. Values are rounded to
/// `f32` so the in-memory dataset equals what a write/read cycle yields.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, PlantedTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;
    let signal_classes: Vec<usize> = (0..config.n_classes)
        .filter(|&c| c != config.control_class)
        .collect();
    let dirs = class_directions(signal_classes.len(), d, config.class_signal_strength, &mut rng);
    let mut mean_of: Vec<Option<&Vec<f64>>> = vec![None; config.n_classes];
    for (c, dir) in signal_classes.iter().zip(&dirs) {
        mean_of[*c] = Some(dir);
    }

    let mut values = Vec::new();
    let mut bags = Vec::new();
    let mut truth = BTreeMap::new();
    let mut offset = 0;
    for class in 0..config.n_classes {
        for b in 0..config.n_bags_per_class {
            let n = rng.random_range(config.instances_min..=config.instances_max);
            let planted = match mean_of[class] {
                Some(_) => planted_count(config.planted_fraction, n),
                None => 0,
            };
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.shuffle(&mut rng);
            let mut planted_ids: Vec<u32> = order[..planted].to_vec();
            planted_ids.sort_unstable();
            for i in 0..n as u32 {
                let is_planted = planted_ids.binary_search(&i).is_ok();
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    let mut v = config.noise_scale * noise;
                    if is_planted {
                        v += mean_of[class].expect("signal class")[j];
                    }
                    values.push(f64::from(v as f32));
                }
            }
            let bag_id = format!("c{class}_b{b:03}");
            truth.insert(bag_id.clone(), planted_ids);
            bags.push(BagRecord {
                bag_id,
                label: class,
                n_instances: n,
                offset,
            });
            offset += n;
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        dtype: "f32-le".into(),
        n_bags: bags.len(),
        n_classes: config.n_classes,
        feature_dim: d,
        provenance: Provenance::Synthetic {
            seed: config.seed,
            config: config.clone(),
        },
        bags,
    };
    Ok((Dataset::from_parts(manifest, values)?, PlantedTruth { planted: truth }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_bags_per_class: 10,
            instances_min: 20,
            instances_max: 40,
            feature_dim: 16,
            seed: 9,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let (a, ta) = generate_synthetic(&small()).unwrap();
        let (b, tb) = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_synthetic(&SyntheticConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_counts() {
        let (ds, _) = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.n_bags(), 50);
        for c in 0..5 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn planted_counts_follow_rounding() {
        assert_eq!(planted_count(0.2, 50), 10);
        let cfg = SyntheticConfig {
            instances_min: 50,
            instances_max: 50,
            planted_fraction: 0.2,
            ..small()
        };
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        for i in 0..ds.n_bags() {
            let want = if ds.labels()[i] == 0 { 0 } else { 10 };
            assert_eq!(truth.planted[ds.bag_id(i)].len(), want);
        }
    }

    #[test]
    fn planted_instances_carry_signal() {
        let cfg = SyntheticConfig {
            class_signal_strength: 6.0,
            ..small()
        };
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        let (mut planted, mut background) = (Vec::new(), Vec::new());
        for i in 0..ds.n_bags() {
            let x = ds.instances(i);
            for r in 0..x.rows() {
                let norm2: f64 = x.row(r).iter().map(|v| v * v).sum();
                if truth.is_planted(ds.bag_id(i), r as u32) {
                    planted.push(norm2);
                } else {
                    background.push(norm2);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // E|x|² = d·σ² for background, d·σ² + |μ|² for planted
        assert!((mean(&background) - 16.0).abs() < 1.0);
        assert!((mean(&planted) - 52.0).abs() < 4.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_synthetic(&SyntheticConfig { planted_fraction: 1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { instances_min: 50, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { feature_dim: 3, ..small() }).is_err());
    }
}
