use std::path::Path;
use std::process::{Command, Output};

fn eatt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eatt")).args(args).env_remove("EATT_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

#[test]
fn energy_csv_and_json_agree() {
    let args = ["energy", "--variant", "all", "--level", "attention", "--chip", "all", "--sweep", "d=64..256:64"];
    let csv = eatt(&[&args[..], &["--format", "csv"]].concat());
    let json = eatt(&[&args[..], &["--json"]].concat());
    assert!(csv.status.success() && json.status.success());
    let (header, rows) = csv_rows(&stdout(&csv));
    let parsed: Vec<serde_json::Value> = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(rows.len(), parsed.len());
    assert!(rows.len() >= 3 * 2 * 4);
    for (row, obj) in rows.iter().zip(&parsed) {
        for (h, cell) in header.iter().zip(row) {
            let v = &obj[h.as_str()];
            match v {
                serde_json::Value::Number(n) => {
                    let (a, b) = (n.as_f64().unwrap(), cell.parse::<f64>().unwrap());
                    assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12), "{h}: {a} vs {b}");
                }
                serde_json::Value::String(s) => assert_eq!(s, cell, "{h}"),
                other => panic!("unexpected {other}"),
            }
        }
    }
}

#[test]
fn energy_reports_ratio_against_vanilla() {
    let o = eatt(&["energy", "--variant", "vanilla,e-att", "--level", "alignment", "--seq-len", "22", "--dim", "512"]);
    assert!(o.status.success());
    let (header, rows) = csv_rows(&stdout(&o));
    let col = header.iter().position(|h| h == "ratio_percent").unwrap();
    assert_eq!(rows[0][col].parse::<f64>().unwrap(), 100.0);
    assert!(rows[1][col].parse::<f64>().unwrap() < 1.0);
}

#[test]
fn unsupported_and_bad_flags_exit_2() {
    assert_eq!(eatt(&["energy", "--variant", "dense", "--level", "block"]).status.code(), Some(2));
    assert_eq!(eatt(&["energy", "--variant", "nope"]).status.code(), Some(2));
    assert_eq!(eatt(&["energy", "--sweep", "q=1..2"]).status.code(), Some(2));
    assert_eq!(eatt(&["energy", "--json", "--format", "csv"]).status.code(), Some(2));
    assert_eq!(eatt(&["stats", "--checkpoint", "/definitely/not/here"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_eatt")).args(["audit"]).env("EATT_THREADS", "4").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_reports_surrogate_peak() {
    let o = eatt(&["gradcheck", "--op", "all", "--trials", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("0.797884560802865"), "{text}");
    assert_eq!(text.matches(" pass").count(), 5);

    let j = eatt(&["gradcheck", "--op", "binarize", "--trials", "2", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&j.stdout).unwrap();
    assert_eq!(v["all_passed"], true);
    assert_eq!(v["results"].as_array().unwrap().len(), 2);
}

#[test]
fn audit_matches_and_counts_muls() {
    let o = eatt(&["audit", "--seq-len", "4", "--dim", "8", "--format", "csv"]);
    assert!(o.status.success());
    let (header, rows) = csv_rows(&stdout(&o));
    let get = |r: &Vec<String>, h: &str| r[header.iter().position(|x| x == h).unwrap()].clone();
    let van = rows.iter().find(|r| get(r, "variant") == "vanilla" && get(r, "level") == "alignment").unwrap();
    assert_eq!(get(van, "measured_multiplications"), "640");
    assert!(rows.iter().all(|r| get(r, "match") == "true"));
    let eatt_align = rows.iter().find(|r| get(r, "variant") == "e-att" && get(r, "level") == "alignment").unwrap();
    assert_eq!(get(eatt_align, "measured_multiplications"), "0");
}

#[test]
fn train_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let metrics = dir.path().join("m.csv");
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"task": {"train_examples": 400, "eval_examples": 16, "seed": 5}, "options": {"steps": 999}}"#).unwrap();
    let o = eatt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--task",
        "reverse",
        "--attention",
        "self=vanilla,cross=e-att",
        "--steps",
        "12",
        "--eval-every",
        "6",
        "--metrics-out",
        metrics.to_str().unwrap(),
        "--checkpoint-out",
        ck.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = String::from_utf8(o.stderr.clone()).unwrap();
    assert!(echoed.contains("\"steps\":12") && echoed.contains("\"train_examples\":400"), "{echoed}");
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["step"], 12);
    let (header, rows) = csv_rows(&std::fs::read_to_string(&metrics).unwrap());
    assert_eq!(header, ["step", "loss", "token_accuracy", "lr"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "6", "12"]);
    assert!(Path::new(&ck).join("manifest.json").exists());

    let s = eatt(&["stats", "--checkpoint", ck.to_str().unwrap()]);
    assert!(s.status.success());
    let (header, rows) = csv_rows(&stdout(&s));
    assert_eq!(header, ["module_label", "layer_index", "rho"]);
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["decoder-cross-query", "decoder-cross-query", "decoder-cross-key", "decoder-cross-key"]);
    let sj = eatt(&["stats", "--checkpoint", ck.to_str().unwrap(), "--json"]);
    let parsed: Vec<serde_json::Value> = serde_json::from_slice(&sj.stdout).unwrap();
    for (row, obj) in rows.iter().zip(&parsed) {
        assert!((obj["rho"].as_f64().unwrap() - row[2].parse::<f64>().unwrap()).abs() <= 5e-6);
    }
}

#[test]
fn stats_on_vanilla_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let o = eatt(&["train", "--steps", "1", "--train-examples", "100", "--eval-examples", "8", "--checkpoint-out", ck.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(eatt(&["stats", "--checkpoint", ck.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let o = eatt(&["train", "--steps", "20", "--lr-peak", "1e30", "--warmup", "1", "--train-examples", "100", "--eval-examples", "8"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
