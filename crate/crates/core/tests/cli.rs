mod common;

use std::fs;

use common::*;
use cvfc::checkpoint::Checkpoint;
use cvfc::data::png_io::{read_mask, write_mask};
use cvfc::eval::{EvalReport, PseudoMask};
use cvfc::gradcheck::suite;
use cvfc::train::{TrainConfig, Trainer};
use tempfile::tempdir;

fn synth(dir: &std::path::Path, count: usize, size: usize, seed: u64) {
    let out = cvfc(&[
        "synth",
        "--out",
        p(dir),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn synth_layout_and_determinism() {
    let t = tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, 10, 32, 4);
    synth(&b, 10, 32, 4);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 10);
    assert_eq!(fs::read_dir(a.join("masks")).unwrap().count(), 10);
    assert!(a.join("manifest.json").is_file());
    assert_eq!(tree(&a), tree(&b));

    let c = t.path().join("c");
    synth(&c, 10, 32, 5);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn synth_rejects_zero_count() {
    let t = tempdir().unwrap();
    let out = cvfc(&["synth", "--out", p(&t.path().join("d")), "--count", "0"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_input_is_a_usage_error_without_side_effects() {
    let t = tempdir().unwrap();
    let d = t.path().join("d");
    for args in [
        vec!["frobnicate"],
        vec!["synth", "--out", p(&d), "--count", "2", "--colour", "red"],
        vec![],
    ] {
        let out = cvfc(&args);
        assert_eq!(code(&out), 1, "{args:?}");
        assert!(stderr(&out).contains("Usage"), "{args:?}: {}", stderr(&out));
    }
    assert!(!d.exists());
}

fn log_lines(stdout: &str) -> Vec<serde_json::Value> {
    stdout
        .lines()
        .map(|l| serde_json::from_str(l).expect("JSON line"))
        .collect()
}

#[test]
fn train_logs_resumes_and_matches_uninterrupted() {
    let t = tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 8, 16, 1);
    let cfg = t.path().join("cfg.json");
    write_json(&cfg, &tiny_config(3));

    let full = t.path().join("full.cvfc");
    let out = cvfc(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&full)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let full_log = log_lines(&stdout(&out));
    let epochs: Vec<u64> = full_log.iter().map(|l| l["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, [1, 2, 3]);
    for key in ["l_cls_1", "l_cls_2", "l_cls_3", "l_cls_total", "l_cons", "l_cross", "total"] {
        assert!(full_log[0][key].is_number(), "missing {key}");
    }

    let part = t.path().join("part.cvfc");
    let out = cvfc(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&part), "--epochs", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = cvfc(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&part), "--resume", p(&part),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resumed = log_lines(&stdout(&out));
    assert_eq!(resumed.len(), 1);
    assert_eq!(resumed[0], full_log[2]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&part).unwrap());
}

#[test]
fn train_config_errors_exit_1() {
    let t = tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 4, 16, 1);
    let missing = t.path().join("nowhere.json");
    let out = cvfc(&["train", "--config", p(&missing), "--data", p(&data), "--out", "x.cvfc"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nowhere.json"), "{}", stderr(&out));

    let bad = t.path().join("bad.json");
    fs::write(&bad, r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap();
    let out = cvfc(&["train", "--config", p(&bad), "--data", p(&data), "--out", "x.cvfc"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn diverging_training_exits_2() {
    let t = tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 8, 16, 1);
    let cfg = t.path().join("cfg.json");
    let mut v = tiny_config(5);
    v["lr"] = serde_json::json!(1e30);
    write_json(&cfg, &v);
    let out = cvfc(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&t.path().join("c"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

fn untrained_checkpoint(path: &std::path::Path) {
    let cfg: TrainConfig = serde_json::from_value(tiny_config(1)).unwrap();
    Trainer::<f32>::new(cfg).unwrap().to_checkpoint().unwrap().save(path).unwrap();
}

#[test]
fn infer_writes_one_mask_per_image_idempotently() {
    let t = tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 5, 16, 2);
    let ckpt = t.path().join("m.cvfc");
    untrained_checkpoint(&ckpt);
    let images = data.join("images");

    let (o1, o2) = (t.path().join("o1"), t.path().join("o2"));
    for o in [&o1, &o1, &o2] {
        let out = cvfc(&["infer", "--ckpt", p(&ckpt), "--images", p(&images), "--out", p(o)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let names = |d: &std::path::Path| {
        let mut v: Vec<String> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names(&o1), names(&images));
    assert_eq!(tree(&o1), tree(&o2));

    let hi = t.path().join("hi");
    let out = cvfc(&[
        "infer", "--ckpt", p(&ckpt), "--images", p(&images), "--out", p(&hi), "--threshold", "0.99",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (mut bg, mut total) = (0usize, 0usize);
    for name in names(&hi) {
        let m = read_mask(&hi.join(name)).unwrap();
        bg += m.labels.iter().filter(|&&l| l == 0).count();
        total += m.labels.len();
    }
    assert!(bg * 2 > total, "{bg} of {total} background");

    let out = cvfc(&[
        "infer", "--ckpt", p(&ckpt), "--images", p(&images), "--out", p(&hi), "--threshold", "1.0",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn infer_rejects_corrupt_checkpoint() {
    let t = tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 2, 16, 2);
    let ckpt = t.path().join("m.cvfc");
    untrained_checkpoint(&ckpt);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, &bytes).unwrap();
    let out = cvfc(&[
        "infer", "--ckpt", p(&ckpt), "--images", p(&data.join("images")), "--out", p(&t.path().join("o")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(Checkpoint::load(&ckpt).is_err());
}

/// Three 100×100 masks, one per class, whose class-`c` pixels give exactly
/// `num[c]` intersecting pixels out of a union of 10000.
fn crafted_pairs(dir: &std::path::Path, num: [usize; 3]) -> (std::path::PathBuf, std::path::PathBuf) {
    let (pred, gt) = (dir.join("pred"), dir.join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    for (c, &inter) in num.iter().enumerate() {
        let half = (10_000 - inter) / 2;
        let only_gt = 10_000 - inter - half;
        let label = c as u8 + 1;
        let g: Vec<u8> = (0..10_000).map(|i| if i < inter + only_gt { label } else { 0 }).collect();
        let q: Vec<u8> = (0..10_000)
            .map(|i| if i < inter || i >= inter + only_gt { label } else { 0 })
            .collect();
        let id = format!("img{c}");
        write_mask(&gt.join(format!("{id}.png")), &PseudoMask::new(g, 100, 100, &id).unwrap()).unwrap();
        write_mask(&pred.join(format!("{id}.png")), &PseudoMask::new(q, 100, 100, &id).unwrap()).unwrap();
    }
    (pred, gt)
}

#[test]
fn eval_reports_crafted_iou_and_round_trips_json() {
    let t = tempdir().unwrap();
    let (pred, gt) = crafted_pairs(t.path(), [7846, 5907, 7613]);
    let json = t.path().join("r.json");
    let out = cvfc(&[
        "eval", "--pred", p(&pred), "--gt", p(&gt), "--classes", "tumor,stroma,normal", "--json", p(&json),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("0.7846") && table.contains("0.5907") && table.contains("0.7613"), "{table}");
    assert!(table.lines().any(|l| l.starts_with("mIoU") && l.contains("0.7122")), "{table}");

    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let report = EvalReport::from_json(&v).unwrap();
    assert!((report.miou - (0.7846 + 0.5907 + 0.7613) / 3.0).abs() < 1e-12);

    let out = cvfc(&["eval", "--pred", p(&gt), "--gt", p(&gt)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).lines().any(|l| l.starts_with("mIoU") && l.contains("1.0000")));
}

#[test]
fn eval_rejects_unpaired_files() {
    let t = tempdir().unwrap();
    let (pred, gt) = crafted_pairs(t.path(), [5000, 5000, 5000]);
    fs::remove_file(gt.join("img1.png")).unwrap();
    let out = cvfc(&["eval", "--pred", p(&pred), "--gt", p(&gt)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_lists_each_check_once_and_bites() {
    let out = cvfc(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for (name, _) in suite() {
        let n = text.lines().filter(|l| l.split_whitespace().next() == Some(name)).count();
        assert_eq!(n, 1, "{name} listed {n} times");
    }

    let out = cvfc(&["gradcheck", "--inject-fault", "conv2d"]);
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).lines().any(|l| l.starts_with("conv2d ") && l.ends_with("FAIL")));
}
