use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtfa")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// One synthesized dataset and one tiny trained model, shared by all tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(
            &[
                "synthesize", "--synthetic", "--out", "data", "--count", "1", "--clip-seconds", "3", "--sources-per-kind", "1",
                "--backgrounds", "1", "--seed", "2",
            ],
            &root,
        );
        ok(
            &[
                "train", "--data", "data", "--class", "beep", "--dropout", "0.3", "--threshold", "0.4", "--channels", "2",
                "--units", "2", "--max-epochs", "1", "--validation-fraction", "0.3", "--out", "model",
            ],
            &root,
        );
        Fixture { _dir: dir, root }
    })
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let d = scratch();
    assert_eq!(code(&run(&[], d.path())), 2);
    assert_eq!(code(&run(&["train", "--class", "beep"], d.path())), 2);
    let out = run(&["synthesize", "--synthetic", "--out", "x", "--presence", "1.5"], d.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--presence"), "{}", stderr(&out));
    assert_eq!(code(&run(&["infer", "--ckpt", "a", "--wav-dir", "b", "--out", "c", "--threshold", "1"], d.path())), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let d = scratch();
    let out = run(&["evaluate", "--ref", "nope.tsv", "--det", "nope.tsv"], d.path());
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("nope.tsv"));
    assert_eq!(code(&run(&["featurize", "--wav-dir", "missing", "--out", "f"], d.path())), 3);
}

#[test]
fn unknown_class_without_settings_exits_4() {
    let f = fixture();
    let d = scratch();
    let data = f.root.join("data");
    let out = run(&["train", "--data", data.to_str().unwrap(), "--class", "dog", "--out", "m"], d.path());
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("dog"));
}

#[test]
fn known_classes_get_their_defaults() {
    let f = fixture();
    let d = scratch();
    let data = f.root.join("data");
    let ann = data.join("annotations.tsv");
    for (class, dropout, threshold) in [("gunshot", 0.4, 0.4), ("babycry", 0.3, 0.4), ("glassbreak", 0.3, 0.2)] {
        let out_dir = d.path().join(class);
        ok(
            &[
                "train", "--data", data.to_str().unwrap(), "--annotations", ann.to_str().unwrap(), "--class", class,
                "--channels", "2", "--units", "2", "--max-epochs", "1", "--validation-fraction", "0.3", "--out",
                out_dir.to_str().unwrap(),
            ],
            d.path(),
        );
        let m = json(&out_dir.join("run.json"));
        assert_eq!(m["config"]["model"]["dropout"], dropout, "{class}");
        assert_eq!(m["config"]["model"]["threshold"], threshold, "{class}");
        assert_eq!(m["config"]["model"]["label"], class);
        let log = std::fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
        let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["epoch", "train_loss", "val_loss", "seconds"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }
}

#[test]
fn featurize_is_idempotent_and_survives_bad_files() {
    let f = fixture();
    let d = scratch();
    let wavs = d.path().join("wavs");
    std::fs::create_dir(&wavs).unwrap();
    for e in std::fs::read_dir(f.root.join("data")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "wav") {
            std::fs::copy(&p, wavs.join(p.file_name().unwrap())).unwrap();
        }
    }
    ok(&["featurize", "--wav-dir", "wavs", "--out", "a"], d.path());
    ok(&["featurize", "--wav-dir", "wavs", "--out", "b"], d.path());
    let listing = |dir: &str| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(d.path().join(dir))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "mtfaspec"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let a = listing("a");
    assert_eq!(a.len(), 3);
    assert_eq!(a, listing("b"));
    for (_, bytes) in &a {
        assert_eq!(&bytes[..8], b"MTFASPEC");
    }

    std::fs::write(wavs.join("broken.wav"), b"RIFF....not a wave").unwrap();
    let out = run(&["featurize", "--wav-dir", "wavs", "--out", "c"], d.path());
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("broken.wav"), "{}", stderr(&out));
    assert_eq!(listing("c"), a);
}

#[test]
fn infer_uses_a_27_frame_median_and_dumps_four_scales() {
    let f = fixture();
    let d = scratch();
    let ckpt = f.root.join("model/model.ckpt");
    let data = f.root.join("data");
    ok(
        &[
            "infer", "--ckpt", ckpt.to_str().unwrap(), "--wav-dir", data.to_str().unwrap(), "--out", "det.tsv",
            "--dump-attention", "att",
        ],
        d.path(),
    );
    let m = json(&d.path().join("det.tsv.run.json"));
    assert_eq!(m["config"]["median_frames"], 27);
    assert_eq!(m["config"]["threshold"], 0.4);
    let clips: Vec<PathBuf> = std::fs::read_dir(d.path().join("att")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(clips.len(), 3);
    for c in clips {
        let mut images: Vec<String> = std::fs::read_dir(&c)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("scale") && n.ends_with(".pgm"))
            .collect();
        images.sort();
        assert_eq!(images, ["scale1.pgm", "scale2.pgm", "scale3.pgm", "scale4.pgm"]);
        let header = std::fs::read(c.join("scale1.pgm")).unwrap();
        // 3 s clip: 151 frames by 128 bins at the finest scale.
        assert!(header.starts_with(b"P5\n151 128\n255\n"));
        let header = std::fs::read(c.join("scale4.pgm")).unwrap();
        assert!(header.starts_with(b"P5\n19 16\n255\n"));
    }
    let even = run(
        &["infer", "--ckpt", ckpt.to_str().unwrap(), "--wav-dir", data.to_str().unwrap(), "--out", "x.tsv", "--median-ms", "520"],
        d.path(),
    );
    assert_eq!(code(&even), 4);
}

#[test]
fn checkpoint_mismatch_exits_5_naming_the_record() {
    let f = fixture();
    let d = scratch();
    let mut bytes = std::fs::read(f.root.join("model/model.ckpt")).unwrap();
    // Header: magic, version, then channels.
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    bytes[12..16].copy_from_slice(&3u32.to_le_bytes());
    std::fs::write(d.path().join("bad.ckpt"), bytes).unwrap();
    let data = f.root.join("data");
    let out = run(&["infer", "--ckpt", "bad.ckpt", "--wav-dir", data.to_str().unwrap(), "--out", "det.tsv"], d.path());
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    assert!(stderr(&out).contains("`stem."), "{}", stderr(&out));
}

#[test]
fn evaluate_scores_perfect_and_empty_detections() {
    let f = fixture();
    let d = scratch();
    let refs = f.root.join("data/annotations.tsv");
    let r = refs.to_str().unwrap();
    let out = ok(&["evaluate", "--ref", r, "--det", r, "--out", "same.tsv"], d.path());
    let table = String::from_utf8(out.stdout).unwrap();
    let average = table.lines().find(|l| l.starts_with("average")).unwrap();
    assert!(average.ends_with("\t0.00|100.0"), "{average}");
    assert_eq!(std::fs::read_to_string(d.path().join("same.tsv")).unwrap(), table);
    assert!(d.path().join("same.tsv.run.json").exists());

    std::fs::write(d.path().join("empty.tsv"), "").unwrap();
    let out = ok(&["evaluate", "--ref", r, "--det", "empty.tsv", "--class", "beep"], d.path());
    let table = String::from_utf8(out.stdout).unwrap();
    let average = table.lines().find(|l| l.starts_with("average")).unwrap();
    assert!(average.ends_with("\t1.00|0.0"), "{average}");
}
