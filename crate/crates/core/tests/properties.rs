use proptest::prelude::*;

use sslmil::encoder::{Activation, Mlp, MlpConfig};
use sslmil::experiment::{load_encoder, load_mil, save_encoder, save_mil};
use sslmil::io::{decode_f32_le, encode_f32_le};
use sslmil::linalg::{entropy, softmax_rows};
use sslmil::metrics::{
    binary_roc_auc, macro_f1, parse_attention_csv, parse_predictions_csv, roc_auc_macro, write_attention_csv,
    write_predictions_csv, AttentionRecord, PredictionRecord, PredictionSet,
};
use sslmil::mil::{predict_embedded, MilConfig, MilModel};
use sslmil::params::{ema_update, round_to_f32};
use sslmil::Matrix;

fn mil_case() -> impl Strategy<Value = (MilModel, Matrix)> {
    (2usize..8, 1usize..6, 2usize..5, 1usize..12, any::<u64>()).prop_flat_map(|(k, h, c, n, seed)| {
        (1..k, prop::collection::vec(-3.0f64..3.0, n * k)).prop_map(move |(kr, z)| {
            let cfg = MilConfig {
                k,
                k_reduced: kr,
                attention_hidden: h,
                n_classes: c,
            };
            (MilModel::init(&cfg, seed).unwrap(), Matrix::new(n, k, z).unwrap())
        })
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bag_prediction_ignores_instance_order((model, z) in mil_case(), shift in 0usize..64) {
        let n = z.rows();
        let order: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        let mut seen = order.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assume!(seen.len() == n);
        let a = predict_embedded(&model, &z).unwrap();
        let b = predict_embedded(&model, &z.select_rows(&order)).unwrap();
        prop_assert!(max_diff(a.probabilities.data(), b.probabilities.data()) <= 1e-9);
    }

    #[test]
    fn duplicating_every_instance_keeps_prediction((model, z) in mil_case(), copies in 2usize..4) {
        let idx: Vec<usize> = (0..z.rows()).flat_map(|i| std::iter::repeat_n(i, copies)).collect();
        let a = predict_embedded(&model, &z).unwrap();
        let b = predict_embedded(&model, &z.select_rows(&idx)).unwrap();
        prop_assert!(max_diff(a.probabilities.data(), b.probabilities.data()) <= 1e-9);
    }

    #[test]
    fn attention_columns_sum_to_one((model, z) in mil_case()) {
        let p = predict_embedded(&model, &z).unwrap();
        for s in p.attention.col_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn entropy_grows_with_temperature(x in prop::collection::vec(-6.0f64..6.0, 2..10), t in 0.05f64..5.0, f in 1.0f64..4.0) {
        let m = Matrix::new(1, x.len(), x).unwrap();
        let low = entropy(softmax_rows(&m, t).unwrap().row(0));
        let high = entropy(softmax_rows(&m, t * f).unwrap().row(0));
        prop_assert!(high >= low - 1e-12);
    }

    #[test]
    fn ema_with_fixed_student_is_geometric(m in 0.0f64..1.0, steps in 1i32..30, seed in any::<u64>()) {
        let cfg = MlpConfig::new(vec![3, 4, 2], Activation::Relu);
        let mut teacher = Mlp::init(&cfg, seed).unwrap();
        let start = teacher.clone();
        let student = Mlp::init(&cfg, seed ^ 1).unwrap();
        for _ in 0..steps {
            ema_update(&mut teacher, &student, m).unwrap();
        }
        let mk = m.powi(steps);
        for ((t, s0), s) in teacher.layers().iter().zip(start.layers()).zip(student.layers()) {
            for ((a, b), c) in t.weight.data().iter().zip(s0.weight.data()).zip(s.weight.data()) {
                prop_assert!((a - (mk * b + (1.0 - mk) * c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn roc_auc_invariant_under_increasing_maps(
        scores in prop::collection::vec(0u8..12, 2..40),
        labels in prop::collection::vec(any::<bool>(), 40),
    ) {
        let mut pos: Vec<bool> = labels[..scores.len()].to_vec();
        pos[0] = true;
        pos[1] = false;
        let s: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        let base = binary_roc_auc(&s, &pos).unwrap();
        let mapped: Vec<f64> = s.iter().map(|v| (0.3 * v).exp() - 2.0).collect();
        prop_assert_eq!(binary_roc_auc(&mapped, &pos).unwrap(), base);
    }

    #[test]
    fn f32_blob_round_trips(values in prop::collection::vec(-1e30f64..1e30, 0..64)) {
        let bytes = encode_f32_le(values.iter().copied());
        let back = decode_f32_le(&bytes, values.len()).unwrap();
        for (v, b) in values.iter().zip(back) {
            prop_assert_eq!(*v as f32, b);
        }
        prop_assert!(decode_f32_le(&bytes, values.len() + 1).is_err());
    }

    #[test]
    fn prediction_csv_round_trip_preserves_metrics(
        rows in prop::collection::vec((0usize..3, 0usize..3, 1u32..100, 1u32..100, 1u32..100), 3..30)
    ) {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, &(t, p, a, b, c))| {
                let s = f64::from(a + b + c);
                PredictionRecord {
                    bag_id: format!("bag{i}"),
                    true_label: if i < 3 { i } else { t },
                    predicted: p,
                    probabilities: vec![f64::from(a) / s, f64::from(b) / s, f64::from(c) / s],
                }
            })
            .collect();
        let set = PredictionSet::new(3, records).unwrap();
        let back = parse_predictions_csv(&write_predictions_csv(&set).unwrap()).unwrap();
        prop_assert_eq!(macro_f1(&back).unwrap(), macro_f1(&set).unwrap());
        prop_assert_eq!(roc_auc_macro(&back).unwrap(), roc_auc_macro(&set).unwrap());
    }

    #[test]
    fn attention_csv_round_trip(weights in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..20)) {
        let records: Vec<AttentionRecord> = weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| AttentionRecord {
                bag_id: "b".into(),
                instance_id: i as u32,
                true_label: i % 3,
                predicted_class: (i + 1) % 3,
                weights: w,
            })
            .collect();
        let (c, back) = parse_attention_csv(&write_attention_csv(&records, 3).unwrap()).unwrap();
        prop_assert_eq!(c, 3);
        prop_assert_eq!(back, records);
    }
}

#[test]
fn checkpoints_reproduce_forward_passes() {
    let dir = tempfile::tempdir().unwrap();
    let x = Matrix::from_fn(9, 16, |r, c| ((r * 16 + c) % 11) as f64 * 0.3 - 1.5);

    let encoder = Mlp::init(&MlpConfig::new(vec![16, 32, 8], Activation::Relu), 5).unwrap();
    save_encoder(&dir.path().join("enc"), &encoder).unwrap();
    let loaded = load_encoder(&dir.path().join("enc")).unwrap();
    let z = encoder.predict(&x).unwrap();
    let z2 = loaded.predict(&x).unwrap();
    assert!(max_diff(z.data(), z2.data()) <= 1e-5);

    let mut rounded = encoder.clone();
    round_to_f32(&mut rounded);
    assert_eq!(rounded.predict(&x).unwrap(), z2);

    let model = MilModel::init(
        &MilConfig {
            k: 8,
            k_reduced: 4,
            attention_hidden: 6,
            n_classes: 3,
        },
        6,
    )
    .unwrap();
    save_mil(&dir.path().join("mil"), &model).unwrap();
    let back = load_mil(&dir.path().join("mil")).unwrap();
    let a = predict_embedded(&model, &z).unwrap();
    let b = predict_embedded(&back, &z).unwrap();
    assert!(max_diff(a.probabilities.data(), b.probabilities.data()) <= 1e-6);
    assert_eq!(a.predicted_class, b.predicted_class);
}
