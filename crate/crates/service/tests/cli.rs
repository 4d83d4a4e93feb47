mod common;

use std::io::Write;
use std::process::{Command, Output, Stdio};

use common::{fixture, toy_engine};
use dtraj_core::document::{parse_input, trajectory_from_records};

const INPUT: &str = r#"[{"code":"SEX_M","age_years":0},{"code":"E11","age_years":42},{"code":"I10","age_years":48.5}]"#;

fn dtraj(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dtraj"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut pipe = child.stdin.take().unwrap();
    if let Some(text) = stdin {
        pipe.write_all(text.as_bytes()).unwrap();
    }
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn model_args() -> Vec<String> {
    vec![
        "--model".into(),
        fixture("toy_model.dtw").display().to_string(),
        "--vocab".into(),
        fixture("toy_vocab.tsv").display().to_string(),
    ]
}

fn run(sub: &str, extra: &[&str], stdin: Option<&str>) -> Output {
    let mut args: Vec<String> = vec![sub.into()];
    args.extend(model_args());
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dtraj(&refs, stdin)
}

#[test]
fn generate_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.json");
    std::fs::write(&input, INPUT).unwrap();
    let outs: Vec<_> = ["a.jsonl", "b.jsonl"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = run(
                "generate",
                &["--input", input.to_str().unwrap(), "--samples", "5", "--seed", "7", "--out", out.to_str().unwrap()],
                None,
            );
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            std::fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0].iter().filter(|&&b| b == b'\n').count(), 5);
}

#[test]
fn hundred_samples_reparse_as_valid_trajectories() {
    let o = run("generate", &["--input", "-", "--samples", "100", "--seed", "1"], Some(INPUT));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let engine = toy_engine();
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 100);
    for line in lines {
        let doc = parse_input(line).unwrap();
        let t = trajectory_from_records(doc.events(), engine.vocab()).unwrap();
        assert!(t.len() >= 3);
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["seed"].is_u64());
        assert!(t.events()[3..].iter().all(|e| e.age_years > 48.5 && e.age_years <= 85.0));
    }
}

#[test]
fn max_age_flag_is_honoured() {
    let o = run("generate", &["--input", "-", "--samples", "20", "--seed", "3", "--max-age", "50"], Some(INPUT));
    assert!(o.status.success());
    for line in String::from_utf8(o.stdout).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for e in v["events"].as_array().unwrap() {
            assert!(e["age_years"].as_f64().unwrap() <= 50.0);
        }
    }
}

#[test]
fn exit_codes() {
    // missing --model
    let o = dtraj(&["generate", "--vocab", "v.tsv", "--input", "-"], Some(INPUT));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = dtraj(&["generate", "--samples", "0"], None);
    assert_eq!(o.status.code(), Some(2));

    let o = dtraj(
        &["generate", "--model", "/nonexistent.dtw", "--vocab", fixture("toy_vocab.tsv").to_str().unwrap(), "--input", "-"],
        Some(INPUT),
    );
    assert_eq!(o.status.code(), Some(3));

    let o = run("generate", &["--input", "-"], Some(r#"[{"code":"ZZZ","age_years":3}]"#));
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ZZZ"));

    let o = run("generate", &["--input", "-"], Some("not json"));
    assert_eq!(o.status.code(), Some(4));

    let o = run("generate", &["--input", "-"], Some(r#"[{"code":"E11","age_years":90}]"#));
    assert_eq!(o.status.code(), Some(4));

    assert_eq!(dtraj(&["--help"], None).status.code(), Some(0));
}

#[test]
fn risk_table() {
    let o = run(
        "risk",
        &["--input", "-", "--targets", "E11,I21,DEATH", "--horizon", "70", "--samples", "300", "--seed", "5"],
        Some(INPUT),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["target", "probability", "std_error", "n"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1], ["E11", "1", "0", "300"]);
    for r in &rows[1..] {
        let p: f64 = r[1].parse().unwrap();
        let se: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!((se - (p * (1.0 - p) / 300.0).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn risk_precondition_failures() {
    let o = run("risk", &["--input", "-", "--targets", "E11", "--horizon", "48.5"], Some(INPUT));
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
    let o = run("risk", &["--input", "-", "--targets", "E11,Q99", "--horizon", "60"], Some(INPUT));
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Q99"));
}

#[test]
fn risk_agrees_across_independent_seeds() {
    let table = |seed: &str| {
        let o = run(
            "risk",
            &["--input", "-", "--targets", "I21,I50,N18,DEATH", "--horizon", "75", "--samples", "1000", "--seed", seed],
            Some(INPUT),
        );
        assert!(o.status.success());
        String::from_utf8(o.stdout)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let c: Vec<&str> = l.split('\t').collect();
                (c[1].parse::<f64>().unwrap(), c[2].parse::<f64>().unwrap())
            })
            .collect::<Vec<_>>()
    };
    for ((p1, s1), (p2, s2)) in table("100").into_iter().zip(table("200")) {
        let combined = (s1 * s1 + s2 * s2).sqrt();
        assert!((p1 - p2).abs() <= 4.0 * combined, "{p1} vs {p2}");
    }
}

#[test]
fn env_overrides_paths() {
    let o = Command::new(env!("CARGO_BIN_EXE_dtraj"))
        .args(["generate", "--input", "-", "--seed", "2"])
        .env("DTRAJ_MODEL", fixture("toy_model.dtw"))
        .env("DTRAJ_VOCAB", fixture("toy_vocab.tsv"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            c.stdin.take().unwrap().write_all(INPUT.as_bytes())?;
            c.wait_with_output()
        })
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn serve_refuses_non_loopback_without_flag() {
    let mut args = vec!["serve".to_string()];
    args.extend(model_args());
    args.extend(["--bind".into(), "0.0.0.0:0".into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = dtraj(&refs, None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("allow-remote"));
}

#[test]
fn make_toy_reproduces_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.dtw");
    let v = dir.path().join("v.tsv");
    let o = dtraj(&["make-toy", "--model-out", m.to_str().unwrap(), "--vocab-out", v.to_str().unwrap()], None);
    assert!(o.status.success());
    assert_eq!(std::fs::read(m).unwrap(), std::fs::read(fixture("toy_model.dtw")).unwrap());
    assert_eq!(std::fs::read(v).unwrap(), std::fs::read(fixture("toy_vocab.tsv")).unwrap());
}
