use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mspad::dataset::to_voc_xml;

fn mspad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mspad"))
        .args(args)
        .env_remove("MSPAD_DATASET_ROOT")
        .output()
        .unwrap()
}

fn dataset(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let index = mspad::synthetic::plad_like(n, 11);
    for rec in index.images() {
        fs::write(dir.path().join(format!("{}.xml", rec.image_id)), to_voc_xml(rec, &index.registry)).unwrap();
    }
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = mspad(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn version_names_document_format() {
    let o = mspad(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("document format 1"), "{}", stdout(&o));
}

#[test]
fn missing_output_dir_is_usage_error() {
    let data = dataset(2);
    let o = mspad(&["--dataset-root", s(data.path()), "detect"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn stats_prints_table() {
    let data = dataset(5);
    let o = mspad(&["stats", s(data.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for label in ["tower", "insulator", "spacer", "plate", "damper"] {
        assert!(out.contains(label), "{out}");
    }
}

#[test]
fn detect_then_eval_is_perfect() {
    let data = dataset(4);
    let out = tempfile::tempdir().unwrap();
    let o = mspad(&["--dataset-root", s(data.path()), "-o", s(out.path()), "detect"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dets = out.path().join("detections");
    assert_eq!(fs::read_dir(&dets).unwrap().count(), 4);

    let rep = tempfile::tempdir().unwrap();
    let o = mspad(&["--dataset-root", s(data.path()), "-o", s(rep.path()), "eval", "--detections", s(&dets)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["map"], 1.0);
}

#[test]
fn eval_with_unknown_image_names_it() {
    let data = dataset(2);
    let out = tempfile::tempdir().unwrap();
    let o = mspad(&["--dataset-root", s(data.path()), "-o", s(out.path()), "detect"]);
    assert!(o.status.success());
    let dets = out.path().join("detections");
    let doc = fs::read_to_string(dets.join("synth_0000.json")).unwrap();
    fs::write(dets.join("ghost.json"), doc.replace("synth_0000", "ghost_image_7")).unwrap();
    let o = mspad(&["--dataset-root", s(data.path()), "eval", "--detections", s(&dets)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ghost_image_7"), "{}", stderr(&o));
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn cv_is_deterministic_and_rerunnable() {
    let data = dataset(10);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = |o: &Path| {
        vec![
            "--dataset-root".to_string(),
            s(data.path()).into(),
            "--seed".into(),
            "2021".into(),
            "-o".into(),
            s(o).into(),
            "cv".into(),
            "--k".into(),
            "3".into(),
            "--original-backend".into(),
            "jitter:sigma.damper=20,seed=4".into(),
        ]
    };
    for dir in [a.path(), b.path()] {
        let argv = args(dir);
        let o = mspad(&argv.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ta = read_tree(a.path());
    assert_eq!(ta.len(), 5, "{:?}", ta.iter().map(|t| &t.0).collect::<Vec<_>>());
    assert_eq!(ta, read_tree(b.path()));
    assert!(!fs::read(a.path().join("config.json")).unwrap().is_empty());

    let o = mspad(&["-o", s(c.path()), "rerun", s(&a.path().join("config.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(ta, read_tree(c.path()));

    // splits partition the dataset
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("splits/run_01.json")).unwrap()).unwrap();
    assert_eq!(split["train"].as_array().unwrap().len(), 8);
    assert_eq!(split["test"].as_array().unwrap().len(), 2);

    // and eval with that split scores only its test images
    let det = tempfile::tempdir().unwrap();
    let o = mspad(&["--dataset-root", s(data.path()), "-o", s(det.path()), "detect"]);
    assert!(o.status.success());
    let o = mspad(&[
        "--dataset-root",
        s(data.path()),
        "eval",
        "--detections",
        s(&det.path().join("detections")),
        "--split",
        s(&a.path().join("splits/run_01.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn slice_writes_manifests() {
    let data = dataset(2);
    let out = tempfile::tempdir().unwrap();
    let o = mspad(&["--dataset-root", s(data.path()), "-o", s(out.path()), "slice", "--grid", "2x3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("tiles/synth_0000.json")).unwrap()).unwrap();
    assert_eq!(m["tiles"].as_array().unwrap().len(), 6);
}
