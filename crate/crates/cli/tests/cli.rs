use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn otsforge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otsforge"))
        .args(args)
        .current_dir(dir)
        .env_remove("OTSFORGE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = otsforge(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text.trim()).unwrap()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn parse_summary_and_json_dump() {
    let dir = tempfile::tempdir().unwrap();
    let summary = ok(&["parse", "case2"], dir.path());
    assert!(summary.contains("buses 2"));
    assert!(summary.contains("generators 1"));
    assert!(summary.contains("branches 1"));
    let dump = json(&ok(&["parse", "case2", "--json"], dir.path()));
    assert_eq!(dump["branch_rows"][0]["rate_a"], 150.0);
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.m");
    fs::write(&bad, "mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0;\n];\n").unwrap();
    let out = otsforge(&["opf", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let rec = json(&String::from_utf8(out.stderr).unwrap());
    assert!(rec["error"].is_string());
    assert!(rec["message"].as_str().unwrap().contains("bad.m"));

    let out = otsforge(&["opf", "no_such_case"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&String::from_utf8(out.stderr).unwrap())["error"], "Io");
}

#[test]
fn braess_case_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let opf = json(&ok(&["opf", "case3b"], dir.path()));
    assert!((opf["objective"].as_f64().unwrap() - 1400.0).abs() < 1e-4);
    for mode in ["bb", "exhaustive"] {
        let ots = json(&ok(&["ots", "case3b", "--mode", mode, "--time-limit", "30"], dir.path()));
        assert!((ots["objective"].as_f64().unwrap() - 1000.0).abs() < 1e-4);
        assert_eq!(ots["open_lines"], serde_json::json!([2]));
        assert_eq!(ots["proved_optimal"], true);
    }
    let ed = json(&ok(&["ed", "case3b"], dir.path()));
    assert!(ed["objective"].as_f64().unwrap() <= 1000.0 + 1e-6);

    let z = dir.path().join("z.txt");
    fs::write(&z, "1 1 0\n").unwrap();
    let fixed = json(&ok(&["opf", "case3b", "--z", "z.txt"], dir.path()));
    assert!((fixed["objective"].as_f64().unwrap() - 1000.0).abs() < 1e-4);
    let csv = ok(&["opf", "case3b", "--z", "z.txt", "--format", "csv"], dir.path());
    assert!(csv.starts_with("schema,quantity,index,value\n"));
    assert!(csv.contains("dispatch.v1,objective,,1000\n"));
}

#[test]
fn gradcheck_reports() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(&ok(&["gradcheck", "case2", "--trials", "10"], dir.path()));
    assert_eq!(r["instances"], 10);
    assert_eq!(r["passed"], true);
    let r = json(&ok(&["gradcheck", "case3b", "--trials", "25", "--seed", "3"], dir.path()));
    assert_eq!(r["passed"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-4);
    let r = json(&ok(&["gradcheck", "case2", "--trials", "0"], dir.path()));
    assert_eq!(r["instances"], 0);
}

#[test]
fn pipeline_outputs_manifests_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "case3b", "--n", "60", "--seed", "4", "--out", "data.txt"], d);
    assert!(d.join("data.txt.manifest.json").exists());
    let manifest = json(&fs::read_to_string(d.join("data.txt.manifest.json")).unwrap());
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seeds"]["data"], 4);
    assert_eq!(manifest["inputs_sha256"]["case"].as_str().unwrap().len(), 64);

    let train = ["train", "case3b", "--data", "data.txt", "--epochs", "2", "--batch", "10", "--deterministic"];
    ok(&[&train[..], &["--out", "a.json"]].concat(), d);
    ok(&[&train[..], &["--out", "b.json"]].concat(), d);
    for suffix in ["", ".loss.csv", ".zhat.csv"] {
        let a = fs::read(d.join(format!("a.json{suffix}"))).unwrap();
        let b = fs::read(d.join(format!("b.json{suffix}"))).unwrap();
        assert_eq!(a, b, "a.json{suffix} differs between runs");
        assert!(d.join(format!("a.json{suffix}.manifest.json")).exists());
    }
    let loss = fs::read_to_string(d.join("a.json.loss.csv")).unwrap();
    assert!(loss.starts_with("schema,epoch,train_loss,val_cost,infeasible\n"));
    assert_eq!(rows(&loss).len(), 2);
    let hist = rows(&fs::read_to_string(d.join("a.json.zhat.csv")).unwrap());
    assert_eq!(hist.len(), 20);
    // The untrained network puts every relaxed status in the top bin.
    let before: Vec<usize> = hist.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(before.iter().sum::<usize>(), 30 * 3);
    assert_eq!(before[19], 30 * 3);

    let bench = ok(&["bench", "case3b", "--data", "data.txt", "--ckpt", "a.json", "--ots-budget", "30"], d);
    let table = rows(&bench);
    let names: Vec<&str> = table.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["ED", "DC-OPF", "DC-OTS", "DA-DNN"]);
    let cost = |i: usize| table[i][2].parse::<f64>().unwrap();
    assert!(cost(0) <= cost(2) && cost(2) < cost(1));
    assert!(cost(3) <= cost(1) + 1e-6);

    let ns = rows(&ok(&["bench", "case3b", "--data", "data.txt", "--ots-budget", "0"], d));
    assert_eq!(ns.len(), 3);
    assert_eq!(ns[2][1], "DC-OTS");
    assert_eq!(ns[2][2], "NS");
    assert_eq!(ns[2][6], "NS");

    ok(&["eval", "case3b", "--data", "data.txt", "--ckpt", "a.json", "--out", "report.csv"], d);
    let report = fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(rows(&report).len(), 20);
    assert!(d.join("report.csv.manifest.json").exists());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "case3b", "--n", "30", "--out", "data.txt"], d);
    let out = otsforge(&["bench", "case2", "--data", "data.txt"], d);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&String::from_utf8(out.stderr).unwrap())["error"], "FingerprintMismatch");

    ok(&["train", "case3b", "--data", "data.txt", "--epochs", "0", "--batch", "5", "--out", "ck.json"], d);
    let out = otsforge(&["eval", "case3b", "--theta-max", "0.4", "--data", "data.txt", "--ckpt", "ck.json"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_otsforge"))
            .args(["gen-data", "case3b", "--n", "12", "--out", out])
            .current_dir(d)
            .env("OTSFORGE_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read_to_string(d.join(out)).unwrap()
    };
    let a = run("9", "a.txt");
    assert!(a.contains("\nseed 9\n"));
    assert_eq!(a, run("9", "b.txt"));
    assert_ne!(a, run("10", "c.txt"));
}
