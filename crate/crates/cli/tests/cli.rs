use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sslmil::data::{Dataset, BLOB_FILE, TRUTH_FILE};
use sslmil::encoder::checkpoint_hash;
use sslmil::experiment::read_record;
use sslmil::metrics::{
    confusion_matrix, macro_f1, parse_attention_csv, parse_predictions_csv, pr_auc_macro, roc_auc_macro,
};

const SMALL: &[&str] = &[
    "dataset.synthetic.n_classes=3",
    "dataset.synthetic.n_bags_per_class=6",
    "dataset.synthetic.instances_min=8",
    "dataset.synthetic.instances_max=12",
    "dataset.synthetic.feature_dim=16",
    "cv.k=3",
    "cv.runs=1",
    "ssl.epochs=1",
    "ssl.warmup_epochs=0",
    "ssl.batch_size=32",
    "ssl.n_local_crops=1",
    "mil.epochs=3",
    "mil.k_reduced=16",
    "mil.attention_hidden=8",
];

fn sslmil(args: &[&str], extra: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sslmil"));
    cmd.args(args);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    for s in extra {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn generate(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&sslmil(&["generate", "--out", data.to_str().unwrap()], &[]));
    data
}

fn out_dir(dir: &Path) -> String {
    format!("output.dir={}", dir.join("exp").display())
}

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (generate(a.path()), generate(b.path()));
    for f in ["manifest.json", BLOB_FILE, TRUTH_FILE] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pretrain_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let d = data.to_str().unwrap();
    let exp = tmp.path().join("exp");
    let set = vec![out_dir(tmp.path()), "ssl.method=swav".into()];

    ok(&sslmil(&["pretrain", "--data", d], &set));
    let stem = exp.join("encoders/fold0");
    let before = checkpoint_hash(&stem).unwrap();
    let train = sslmil(&["train-mil", "--data", d], &set);
    ok(&train);
    assert_eq!(checkpoint_hash(&stem).unwrap(), before, "frozen encoder checkpoint changed");

    let run = exp.join("runs/fold0_run0");
    let record = read_record(&run).unwrap();
    assert_eq!(record.encoder_hash_before, record.encoder_hash_after);

    // exported predictions reproduce the recorded metrics
    let preds = parse_predictions_csv(&fs::read_to_string(run.join("predictions.csv")).unwrap()).unwrap();
    let m = &record.metrics;
    assert!((macro_f1(&preds).unwrap() - m.f1_macro).abs() <= 1e-9);
    assert!((roc_auc_macro(&preds).unwrap() - m.roc_auc_macro).abs() <= 1e-9);
    assert!((pr_auc_macro(&preds).unwrap() - m.pr_auc_macro).abs() <= 1e-9);
    assert_eq!(confusion_matrix(&preds).unwrap(), m.confusion);

    let (c, att) = parse_attention_csv(&fs::read_to_string(run.join("attention.csv")).unwrap()).unwrap();
    assert_eq!(c, 3);
    for bag in preds.records() {
        let rows: Vec<_> = att.iter().filter(|r| r.bag_id == bag.bag_id).collect();
        assert!(!rows.is_empty());
        for k in 0..c {
            let s: f64 = rows.iter().map(|r| r.weights[k]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    let eval_dir = tmp.path().join("eval");
    ok(&sslmil(
        &["eval", "--data", d, "--run", run.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()],
        &set,
    ));
    assert_eq!(
        fs::read(eval_dir.join("predictions.csv")).unwrap(),
        fs::read(run.join("predictions.csv")).unwrap()
    );
    assert!(eval_dir.join("embeddings.csv").exists());

    let report = sslmil(&["report", "--dir", exp.to_str().unwrap()], &[]);
    ok(&report);
    assert_eq!(report.stdout, train.stdout);
    assert_eq!(report.stdout, fs::read(exp.join("report.txt")).unwrap());
}

#[test]
fn eval_refuses_bags_the_run_trained_on() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let d = data.to_str().unwrap();
    let set = vec![out_dir(tmp.path())];
    ok(&sslmil(&["train-mil", "--data", d, "--random-encoder"], &set));
    let run = tmp.path().join("exp/runs/fold1_run0");
    let r = run.to_str().unwrap();

    for split in ["train", "validation", "all"] {
        let out = sslmil(&["eval", "--data", d, "--run", r, "--bags", split], &set);
        assert_eq!(code(&out), 1, "{split}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("--allow-train-fold"));
    }
    ok(&sslmil(&["eval", "--data", d, "--run", r, "--bags", "train", "--allow-train-fold"], &set));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&sslmil(&["--help"], &[])), 0);
    assert_eq!(code(&sslmil(&["frobnicate"], &[])), 1);
    assert_eq!(code(&sslmil(&["generate", "--out", "x"], &["mil.no_such_key=1".into()])), 1);
    assert_eq!(code(&sslmil(&["generate", "--out", "x"], &["mil.epochs=-3".into()])), 1);
    assert_eq!(code(&sslmil(&["train-mil"], &[])), 1);

    let missing = tmp.path().join("nothing");
    assert_eq!(code(&sslmil(&["pretrain", "--data", missing.to_str().unwrap()], &[out_dir(tmp.path())])), 3);

    let data = generate(tmp.path());
    fs::write(data.join(BLOB_FILE), [0u8; 7]).unwrap();
    assert_eq!(code(&sslmil(&["pretrain", "--data", data.to_str().unwrap()], &[out_dir(tmp.path())])), 3);

    let args = ["gradcheck", "--scope", "mil", "--shapes", "3"];
    assert_eq!(code(&sslmil(&args, &[])), 0);
    let mut faulty = args.to_vec();
    faulty.extend(["--inject-fault", "mil"]);
    assert_eq!(code(&sslmil(&faulty, &[])), 2);
}

/// Self-supervised pre-training must not read labels or planted truth:
/// relabelling every bag and deleting the truth file leaves the checkpoint
/// byte-identical.
#[test]
fn pretraining_is_label_blind() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let set = |name: &str| vec![format!("output.dir={}", tmp.path().join(name).display()), "ssl.global_pretrain=true".into()];

    ok(&sslmil(&["pretrain", "--data", data.to_str().unwrap()], &set("a")));

    let dataset = Dataset::read(&data).unwrap();
    let mut manifest = dataset.manifest().clone();
    let c = manifest.n_classes;
    for bag in &mut manifest.bags {
        bag.label = (bag.label + 1) % c;
    }
    let blob = fs::read(data.join(BLOB_FILE)).unwrap();
    let relabelled = tmp.path().join("relabelled");
    Dataset::decode(manifest, &blob).unwrap().write(&relabelled).unwrap();
    assert!(!relabelled.join(TRUTH_FILE).exists());
    ok(&sslmil(&["pretrain", "--data", relabelled.to_str().unwrap()], &set("b")));

    for ext in ["json", "bin"] {
        let f = format!("encoders/global.{ext}");
        assert_eq!(
            fs::read(tmp.path().join("a").join(&f)).unwrap(),
            fs::read(tmp.path().join("b").join(&f)).unwrap(),
            "{f}"
        );
    }
}
