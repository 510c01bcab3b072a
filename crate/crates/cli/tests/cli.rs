use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn seqrank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrank"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let t = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = seqrank(t.path(), &["gen-data", "--seed", "7", "--users", "100", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = seqrank(t.path(), &["gen-data", "--seed", "8", "--users", "100", "--out", "c"]);
    assert_eq!(code(&o), 0);
    for f in ["store.tav2", "train.tex2", "eval.tex2"] {
        let a = std::fs::read(t.path().join("a").join(f)).unwrap();
        let b = std::fs::read(t.path().join("b").join(f)).unwrap();
        let c = std::fs::read(t.path().join("c").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
        assert_ne!(a, c, "{f} ignores the seed");
    }
}

#[test]
fn negative_nal_weight_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let o = seqrank(t.path(), &["train", "--w-nal", "-1"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("w_nal"));
}

#[test]
fn unknown_flags_and_values_exit_1() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&seqrank(t.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&seqrank(t.path(), &["frobnicate"])), 1);
    assert_eq!(code(&seqrank(t.path(), &["train", "--nal-mode", "sideways"])), 1);
    assert_eq!(code(&seqrank(t.path(), &["bench", "--ablation", "fastest"])), 1);
    assert_eq!(code(&seqrank(t.path(), &["bench", "--duration", "3 weeks"])), 1);
    assert_eq!(code(&seqrank(t.path(), &["--help"])), 0);
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let t = tempfile::tempdir().unwrap();
    let o = seqrank(t.path(), &["train", "--data", "nowhere", "--steps", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = seqrank(t.path(), &["eval", "--data", "nowhere"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_precedence_and_echo() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("gen.conf"), "# small run\nusers = 20\nseed = 5\nout = from_file\n").unwrap();
    let o = seqrank(t.path(), &["gen-data", "--config", "gen.conf", "--users", "30"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("users = 30"), "{err}");
    assert!(err.contains("seed = 5"));
    assert!(err.contains("clusters = 32"));
    assert!(t.path().join("from_file/store.tav2").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("30 users"));

    std::fs::write(t.path().join("bad.conf"), "userz = 20\n").unwrap();
    let o = seqrank(t.path(), &["gen-data", "--config", "bad.conf"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("userz"));
}

#[test]
fn train_eval_ablate_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let o = seqrank(t.path(), args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    run(&["gen-data", "--users", "24", "--seed", "3", "--nn-features"]);
    run(&["train", "--steps", "4", "--batch-size", "16", "--out", "full.ckpt"]);
    run(&["train", "--steps", "4", "--batch-size", "16", "--out", "base.ckpt", "--no-sequence", "--sequential"]);
    let metrics = std::fs::read_to_string(t.path().join("full.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let report = run(&["eval", "--model", "base.ckpt,full.ckpt", "--out", "eval.json"]);
    assert!(report.contains("HIT@3/repin"));
    assert!(report.lines().nth(2).unwrap().starts_with("full"));
    assert!(report.contains('%'));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    let table = run(&[
        "ablate", "--steps", "2", "--batch-size", "16", "--w-nal", "0,0.01", "--modes", "impression", "--losses", "cross_entropy",
    ]);
    assert_eq!(table.lines().count(), 3, "{table}");
}

#[test]
fn grad_check_passes() {
    let t = tempfile::tempdir().unwrap();
    let o = seqrank(t.path(), &["grad-check", "--precision", "both"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("precision=f32") && out.contains("precision=f64"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn bench_writes_report_and_records() {
    let t = tempfile::tempdir().unwrap();
    let o = seqrank(
        t.path(),
        &[
            "bench", "--ablation", "baseline,all", "--rate", "200", "--duration", "400ms", "--users", "8", "--ll", "100",
            "--candidates-min", "1", "--candidates-max", "8", "--out", "rep.txt",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = std::fs::read_to_string(t.path().join("rep.txt")).unwrap();
    for cfg in ["baseline", "all"] {
        assert!(rep.contains(&format!("config={cfg} stage=forward")), "{rep}");
    }
    assert!(!rep.contains("config=dedup_only"));
    let records = std::fs::read_to_string(t.path().join("rep.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);
}

#[test]
fn serve_answers_health_and_rank() {
    let t = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_seqrank"))
        .current_dir(t.path())
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("serve exited early").unwrap();
        if let Some(a) = line.strip_prefix("listening on ") {
            break a.to_string();
        }
    };
    let http = |req: String| {
        let mut s = TcpStream::connect(&addr).unwrap();
        s.write_all(req.as_bytes()).unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    };
    let health = http("GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n".into());
    assert!(health.starts_with("HTTP/1.1 200") && health.ends_with("ok"), "{health}");
    let body = serde_json::json!({"user_id": 1, "candidates": [{"pin_id": 9, "embedding": vec![0.1f32; 32]}]}).to_string();
    let rank = http(format!(
        "POST /rank HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    ));
    assert!(rank.starts_with("HTTP/1.1 200"), "{rank}");
    assert!(rank.contains("\"cold_start\":true") && rank.contains("\"pin_id\":9"));
    child.kill().unwrap();
    child.wait().unwrap();
}
