use std::io::Write;

use mspad::backend::{BackendDescriptor, BackendError, InferenceRequest};
use mspad::dataset::ClassRegistry;
use mspad::geometry::{BBox, ClassId};

fn script(body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(".py").tempfile().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

fn python_available() -> bool {
    std::process::Command::new("python3").arg("--version").output().is_ok()
}

fn requests(n: usize) -> Vec<InferenceRequest> {
    let reg = ClassRegistry::plad();
    (0..n)
        .map(|i| InferenceRequest {
            image_id: format!("img{i}"),
            region: BBox::new(i as f64 * 100.0, 0.0, i as f64 * 100.0 + 100.0, 50.0).unwrap(),
            resize_to: (512, 512),
            allowed_classes: reg.parse_set("damper").unwrap(),
        })
        .collect()
}

/// Reads every request first, then answers in reverse order; the box
/// encodes the request's region origin so answers can be matched.
const REVERSING: &str = r#"
import json, sys
reqs = []
for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    reqs.append(json.loads(line))
    if len(reqs) == 3:
        for r in reversed(reqs):
            x0 = r["region"][0]
            dets = [{"label": r["allowed_classes"][0], "score": 0.5, "box": [x0 / 100, 1, x0 / 100 + 2, 3]}]
            print(json.dumps({"request_id": r["request_id"], "detections": dets}), flush=True)
        reqs = []
"#;

#[test]
fn out_of_order_responses_are_matched() {
    if !python_available() {
        eprintln!("python3 not found; skipping");
        return;
    }
    let s = script(REVERSING);
    let desc = BackendDescriptor::ExternalProcess {
        command: vec!["python3".into(), s.path().display().to_string()],
    };
    let reg = ClassRegistry::plad();
    let backend = desc.build(&reg).unwrap();
    let reqs = requests(3);
    for _round in 0..2 {
        let out = backend.infer_batch(&reqs, None);
        for (i, r) in out.into_iter().enumerate() {
            let dets = r.unwrap();
            assert_eq!(dets.len(), 1);
            assert_eq!(dets[0].bbox.x_min(), i as f64);
            assert_eq!(dets[0].class_id, ClassId(4));
        }
    }
}

#[test]
fn nonzero_exit_reports_status_and_stderr() {
    let desc = BackendDescriptor::ExternalProcess {
        command: vec!["sh".into(), "-c".into(), "read line; echo 'model weights missing' >&2; exit 3".into()],
    };
    let backend = desc.build(&ClassRegistry::plad()).unwrap();
    let err = backend.infer(&requests(1)[0], None).unwrap_err();
    match err {
        BackendError::ProcessExit { ref status, ref stderr, .. } => {
            assert!(status.contains('3'), "{status}");
            assert!(stderr.contains("model weights missing"));
        }
        other => panic!("unexpected error: {other}"),
    }
}

#[test]
fn unknown_label_is_a_decode_error() {
    let desc = BackendDescriptor::ExternalProcess {
        command: vec![
            "sh".into(),
            "-c".into(),
            r#"read line; id=$(echo "$line" | sed 's/.*"request_id":\([0-9]*\).*/\1/'); echo "{\"request_id\":$id,\"detections\":[{\"label\":\"bird\",\"score\":0.5,\"box\":[0,0,1,1]}]}"; sleep 1"#.into(),
        ],
    };
    let backend = desc.build(&ClassRegistry::plad()).unwrap();
    let err = backend.infer(&requests(1)[0], None).unwrap_err();
    assert!(err.to_string().contains("bird"), "{err}");
}

#[test]
fn missing_program_fails_to_spawn() {
    let desc = BackendDescriptor::ExternalProcess { command: vec!["/nonexistent/detector".into()] };
    let backend = desc.build(&ClassRegistry::plad()).unwrap();
    assert!(matches!(backend.infer(&requests(1)[0], None), Err(BackendError::Process { .. })));
}
