use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowdistill::io::{load_checkpoint, METRICS_HEADER};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowdistill"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join(format!("data_{seed}"));
    ok(&["synth", "--seed", &seed.to_string(), "--scenes", "2", "--out", p(&data)]);
    data
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn zero_scenes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--scenes", "0", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn synth_is_reproducible_and_lists_three_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 0);
    let b = dir.path().join("again");
    ok(&["synth", "--seed", "0", "--scenes", "2", "--out", p(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for scene in manifest["scenes"].as_array().unwrap() {
        for frame in scene["frames"].as_array().unwrap() {
            assert_eq!(frame["images"].as_array().unwrap().len(), 3);
        }
    }
}

#[test]
fn unwritable_output_fails_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, b"x").unwrap();
    let out = run(&["synth", "--scenes", "1", "--out", p(&file.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1);
    let ckpt = dir.path().join("m.sfck");
    ok(&["pretrain", "--data", p(&data), "--out", p(&ckpt), "--steps", "1"]);
    let csv = fs::read_to_string(dir.path().join("m.sfck.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2);

    let c = load_checkpoint(&ckpt).unwrap();
    assert_eq!((c.config.dt, c.config.num_sweeps, c.config.tau), (0.5, 2, 0.07));
    assert!(c.config.enable_vc && c.config.enable_d2s && c.config.enable_fcl);

    let metrics = dir.path().join("ablate.csv");
    let ck2 = dir.path().join("ablate.sfck");
    ok(&[
        "pretrain", "--data", p(&data), "--out", p(&ck2), "--steps", "3", "--no-d2s", "--no-fcl", "--metrics", p(&metrics),
    ]);
    let csv = fs::read_to_string(&metrics).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[2] > 0.0);
        assert_eq!((cols[3], cols[4]), (0.0, 0.0));
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2);
    let full = dir.path().join("full.sfck");
    let part = dir.path().join("part.sfck");
    let done = dir.path().join("done.sfck");
    ok(&["pretrain", "--data", p(&data), "--out", p(&full), "--steps", "6"]);
    ok(&["pretrain", "--data", p(&data), "--out", p(&part), "--steps", "6", "--stop-after", "2"]);
    ok(&["pretrain", "--data", p(&data), "--out", p(&done), "--resume", p(&part)]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&done).unwrap());
    assert_eq!(
        fs::read(dir.path().join("full.sfck.csv")).unwrap(),
        fs::read(dir.path().join("done.sfck.csv")).unwrap()
    );
}

#[test]
fn corrupt_blob_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let blob = data.join("scene_0001/kf_01/cam_2.sfim");
    let mut bytes = fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    let out = run(&["pretrain", "--data", p(&data), "--out", p(&dir.path().join("x.sfck")), "--steps", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cam_2.sfim"), "{err}");
    assert!(!dir.path().join("x.sfck").exists());
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "7"]);
    assert!(out.contains("all passed"), "{out}");
    assert!(out.lines().filter(|l| l.ends_with(" ok")).count() >= 6);
}

#[test]
fn random_probe_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&["probe", "--random", "--data", p(&data), "--out", p(&a), "--seed", "5"]);
    ok(&["probe", "--random", "--data", p(&data), "--out", p(&b), "--seed", "5"]);
    let report = fs::read_to_string(&a).unwrap();
    assert_eq!(report, fs::read_to_string(&b).unwrap());
    assert!(report.starts_with("class_id,class_name,iou\n"));
    assert!(report.lines().last().unwrap().starts_with(",mIoU,"));

    let neither = run(&["probe", "--data", p(&data), "--out", p(&a)]);
    assert_eq!(neither.status.code(), Some(2));
}

#[test]
fn eval_robust_against_itself_gives_unit_ce() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let ckpt = dir.path().join("m.sfck");
    ok(&["pretrain", "--data", p(&data), "--out", p(&ckpt), "--steps", "2"]);
    let out = ok(&["eval-robust", "--ckpt", p(&ckpt), "--data", p(&data), "--baseline", p(&ckpt)]);
    assert!(out.lines().any(|l| l == "CE,1"), "{out}");
    let default = ok(&["eval-robust", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(default.starts_with("severity,drop_fraction,model_miou,baseline_miou\n"));
    assert!(default.lines().any(|l| l.starts_with("RR,")));
}

#[test]
fn missing_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let missing = dir.path().join("nope.sfck");
    for args in [
        vec!["probe", "--ckpt", p(&missing), "--data", p(&data), "--out", p(&dir.path().join("r.csv"))],
        vec!["eval-robust", "--ckpt", p(&missing), "--data", p(&data)],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains("nope.sfck"));
    }
}
