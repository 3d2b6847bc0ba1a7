use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cgsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgsd")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let g = dir.path().join("g.json");
    let d = dir.path().join("d.json");
    let report = dir.path().join("report.json");
    let traj = dir.path().join("traj.csv");

    let o = cgsd(&["gen-data", "--out", p(&data), "--n", "200", "--d", "8", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("source.csv").exists() && data.join("target.csv.meta.json").exists());

    let o = cgsd(&["train-guidance", "--data", p(&data), "--out", p(&g), "--epochs", "4", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let stage1: Vec<&str> = stdout.lines().filter(|l| l.starts_with("stage1,")).collect();
    assert_eq!(stage1.len(), 4);
    assert_eq!(stage1[0].split(',').count(), 5);

    let o = cgsd(&[
        "train-diffusion", "--data", p(&data), "--guidance", p(&g), "--out", p(&d),
        "--timesteps", "25", "--epochs", "2", "--seed", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = cgsd(&["eval", "--data", p(&data), "--guidance", p(&g), "--diffusion", p(&d), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(&report).unwrap();
    let o = cgsd(&[
        "eval", "--data", p(&data), "--guidance", p(&g), "--diffusion", p(&d), "--report", p(&report), "--serial",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(first, fs::read(&report).unwrap());

    let o = cgsd(&[
        "export-trajectory", "--data", p(&data), "--guidance", p(&g), "--diffusion", p(&d),
        "--steps", "25,10,0", "--out", p(&traj),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&traj).unwrap().starts_with("t,item_id,true_label,px,py\n"));

    let o = cgsd(&[
        "export-trajectory", "--data", p(&data), "--guidance", p(&g), "--diffusion", p(&d),
        "--steps", "", "--out", p(&traj),
    ]);
    assert_eq!(code(&o), 2);

    // checkpoint from a future format
    let text = fs::read_to_string(&g).unwrap().replace("cgsd-guidance-v1", "cgsd-guidance-v9");
    fs::write(&g, text).unwrap();
    let o = cgsd(&["eval", "--data", p(&data), "--guidance", p(&g), "--report", p(&report)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported checkpoint format"));
}

#[test]
fn config_file_supplies_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, format!(r#"{{"out": "{}", "n": 120, "d": 4, "seed": 9}}"#, p(&data))).unwrap();
    let o = cgsd(&["gen-data", "--config", p(&cfg), "--n", "150"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta = fs::read_to_string(data.join("source.csv.meta.json")).unwrap();
    assert!(meta.contains("\"n\": 150") && meta.contains("\"d_in\": 4"), "{meta}");

    fs::write(&cfg, r#"{"out": "x", "colour": 3}"#).unwrap();
    let o = cgsd(&["gen-data", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // missing required option
    assert_eq!(code(&cgsd(&["gen-data"])), 2);
    // bad generator setting
    let out = dir.path().join("x");
    assert_eq!(code(&cgsd(&["gen-data", "--out", p(&out), "--n", "3"])), 2);
    assert_eq!(code(&cgsd(&["gen-data", "--out", p(&out), "--proportions", "0.5,abc"])), 2);
    // no data on disk
    let missing = dir.path().join("nothing");
    let o = cgsd(&["ablate", "--data", p(&missing), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    // malformed dataset
    let data = dir.path().join("bad");
    assert_eq!(code(&cgsd(&["gen-data", "--out", p(&data), "--n", "50", "--d", "3"])), 0);
    let csv = data.join("target.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let broken = text.replacen("\n0,", "\n9,", 1).replacen("\n1,", "\n9,", 1);
    fs::write(&csv, broken).unwrap();
    let o = cgsd(&["train-guidance", "--data", p(&data), "--out", p(&dir.path().join("g.json"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at line"));
    // same path for input and output
    let o = cgsd(&["train-guidance", "--data", p(&data), "--out", p(&data)]);
    assert_eq!(code(&o), 2);
}
