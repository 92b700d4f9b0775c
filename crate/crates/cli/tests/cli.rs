use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_charlab");

/// Small deterministic text with words, quotes, parentheses and newlines.
fn corpus(len: usize) -> String {
    let words = [
        "the",
        "lord",
        "said",
        "unto",
        "moses",
        "and",
        "he",
        "went",
        "(into",
        "the",
        "land)",
        "\"behold\"",
        "of",
        "israel",
        "king",
        "house",
        "day",
        "spake",
        "saying",
        "them",
    ];
    let mut state: u64 = 0x2545_f491_4f6c_dd1d;
    let mut out = String::new();
    let mut on_line = 0;
    while out.len() < len {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let w = words[(state >> 33) as usize % words.len()];
        out.push_str(w);
        on_line += w.len() + 1;
        if on_line > 60 {
            out.push_str(".\n");
            on_line = 0;
        } else {
            out.push(' ');
        }
    }
    out
}

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Value {
    let out = run(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn run_dir(v: &Value) -> PathBuf {
    PathBuf::from(v["run_dir"].as_str().expect("run_dir"))
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn prepared() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input.txt");
    fs::write(&input, corpus(12_000)).unwrap();
    let root = tmp.path().join("runs");
    let v = ok(&root, &["prep", "--input", input.to_str().unwrap()]);
    Fixture {
        data: run_dir(&v),
        root,
        _tmp: tmp,
    }
}

const TINY: [&str; 8] = [
    "--set",
    "epochs=1",
    "--set",
    "batch_size=4",
    "--set",
    "unroll=20",
    "--set",
    "eval_chunk=50",
];

#[test]
fn prep_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input.txt");
    fs::write(&input, corpus(5_000)).unwrap();
    let a = ok(&tmp.path().join("a"), &["prep", "--input", input.to_str().unwrap()]);
    let b = ok(&tmp.path().join("b"), &["prep", "--input", input.to_str().unwrap()]);
    let name = |v: &Value| run_dir(v).file_name().unwrap().to_owned();
    assert_eq!(name(&a), name(&b));
    for f in ["dataset.json", "train.ids", "val.ids", "test.ids"] {
        assert_eq!(
            fs::read(run_dir(&a).join(f)).unwrap(),
            fs::read(run_dir(&b).join(f)).unwrap(),
            "{f}"
        );
    }
    let total = corpus(5_000).chars().count() as u64;
    let b: Vec<u64> = a["boundaries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect();
    assert_eq!(b, vec![total * 8 / 10, total * 9 / 10, total]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run_dir(&a).join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "prep");
    assert!(manifest["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
    assert!(!run_dir(&a).join(".lock").exists());
}

#[test]
fn train_eval_ngram_oracle_end_to_end() {
    let fx = prepared();
    let data = fx.data.to_str().unwrap();
    let mut args = vec![
        "train", "--kind", "lstm", "--layers", "1", "--hidden", "8", "--data", data,
    ];
    args.extend(TINY);
    let t = ok(&fx.root, &args);
    let tdir = run_dir(&t);
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "summary.json", "run.json"] {
        assert!(tdir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(tdir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,epoch,lr,train_loss,val_loss"));
    assert!(t["summary"]["best_val_loss"].as_f64().unwrap().is_finite());

    let ckpt = tdir.join("best.ckpt");
    let e = ok(
        &fx.root,
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data,
            "--distributions",
        ],
    );
    let edir = run_dir(&e);
    let loss = e["summary"]["mean_loss"].as_f64().unwrap();
    assert!(loss > 0.0 && loss < 5.0);
    assert!(e["summary"]["bootstrap_sigma"].as_f64().unwrap() > 0.0);
    assert!(edir.join("distributions.bin").exists());
    let records = fs::read_to_string(edir.join("records.csv")).unwrap();
    assert!(records.starts_with("position,target_id,p_target"));

    let n = ok(&fx.root, &["ngram", "--data", data, "--n", "1,2,3", "--save-models"]);
    let ndir = run_dir(&n);
    let losses: Vec<f64> = n["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(losses[0] >= losses[1] && losses[1] >= losses[2], "{losses:?}");
    assert!(ndir.join("model_n3.kn").exists());

    let rec = |k: usize| ndir.join(format!("records_n{k}.csv"));
    let model = edir.join("records.csv");
    let o = ok(
        &fx.root,
        &[
            "oracle",
            "--data",
            data,
            "--model",
            model.to_str().unwrap(),
            "--ngram",
            rec(1).to_str().unwrap(),
            "--ngram",
            rec(2).to_str().unwrap(),
            "--ngram",
            rec(3).to_str().unwrap(),
        ],
    );
    let slices = o["slices"].as_array().unwrap();
    let total: u64 = slices.iter().map(|s| s["count"].as_u64().unwrap()).sum();
    assert_eq!(total, o["total_errors"].as_u64().unwrap());
    let frac: f64 = slices.iter().map(|s| s["fraction"].as_f64().unwrap()).sum();
    if total > 0 {
        assert!((frac - 1.0).abs() < 1e-9, "{frac}");
    }
    let bpath = run_dir(&o).join("breakdown.json");
    let c = ok(
        &fx.root,
        &[
            "oracle-compare",
            "--a",
            bpath.to_str().unwrap(),
            "--b",
            bpath.to_str().unwrap(),
        ],
    );
    assert!(run_dir(&c).join("comparison.json").exists());

    let s = ok(
        &fx.root,
        &[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--prime",
            "the ",
            "--length",
            "40",
        ],
    );
    assert_eq!(s["text"].as_str().unwrap().chars().count(), 40);

    let sat = ok(
        &fx.root,
        &[
            "analyze",
            "saturation",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data,
        ],
    );
    let csv = fs::read_to_string(run_dir(&sat).join("saturation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "layer,gate,unit,frac_left,frac_right");
    let rows: Vec<&str> = lines.collect();
    // Three sigmoid gates of eight units in one layer.
    assert_eq!(rows.len(), 24);
    for row in rows {
        let f: Vec<f64> = row.split(',').skip(3).map(|x| x.parse().unwrap()).collect();
        assert!(f[0] >= 0.0 && f[1] >= 0.0 && f[0] + f[1] <= 1.0 + 1e-12, "{row}");
    }
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let fx = prepared();
    let out = run(
        &fx.root,
        &["train", "--data", fx.data.to_str().unwrap(), "--set", "bogus=1"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "invalid_argument");
    assert!(err["error"]["message"].as_str().unwrap().contains("bogus"));

    let out = run(
        &fx.root,
        &[
            "eval",
            "--checkpoint",
            "/nonexistent.ckpt",
            "--data",
            fx.data.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
}

#[test]
fn locked_run_directory_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input.txt");
    fs::write(&input, corpus(3_000)).unwrap();
    let root = tmp.path().join("runs");
    let dir = run_dir(&ok(&root, &["prep", "--input", input.to_str().unwrap()]));
    fs::write(dir.join(".lock"), "").unwrap();
    let out = run(&root, &["prep", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("locked"));
    // The failed attempt must not remove someone else's lock.
    assert!(dir.join(".lock").exists());
}

#[test]
fn train_help_lists_defaults() {
    let out = Command::new(BIN).args(["train", "--help"]).output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    for key in [
        "batch_size",
        "unroll",
        "base_lr",
        "rmsprop_decay",
        "clip",
        "init_range",
        "dropout",
    ] {
        assert!(help.contains(key), "missing {key} in help");
    }
}
