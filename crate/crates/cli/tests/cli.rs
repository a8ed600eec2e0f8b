use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coadapt_cli::report;

fn coadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coadapt")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, views: &str) -> Output {
    let out = dir.to_str().unwrap();
    coadapt(&["gen", "--kind", "random-blob-field", "--count", "60", "--rig", "arc", "--views", views, "--width", "16", "--height", "16", "--seed", "1", "--out", out])
}

fn small_dataset(root: &Path) -> PathBuf {
    let d = root.join("d");
    let o = gen(&d, "6");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    d
}

fn write_config(root: &Path, name: &str, json: &str) -> PathBuf {
    let p = root.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn trained(root: &Path, ds: &Path) -> PathBuf {
    let cfg = write_config(root, "c.json", r#"{"iterations": 20, "ca_interval": 10, "init_count": 60, "dropout_p": 0.2, "n_train": 2}"#);
    let out = root.join("r");
    let o = coadapt(&["train", ds.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    report::parse(&fs::read_to_string(path).unwrap()).unwrap()
}

fn column<'a>(t: &'a (Vec<String>, Vec<Vec<String>>), name: &str) -> Vec<&'a str> {
    let i = t.0.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    t.1.iter().map(|r| r[i].as_str()).collect()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_one_manifest_entry_per_view() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(code(&gen(&d, "12")), 0);
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    assert!(d.join("gt.cspl").exists());
    assert!(d.join("views/view_011.ppm").exists());
}

#[test]
fn gen_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, "4")), 0);
    assert_eq!(code(&gen(&b, "4")), 0);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn zero_views_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(&tmp.path().join("d"), "0")), 64);
}

#[test]
fn unwritable_output_exits_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = gen(&blocker.join("d"), "2");
    assert_eq!(code(&o), 2);
    assert!(!stderr(&o).is_empty());
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let cfg = write_config(tmp.path(), "bad.json", r#"{"dropout_prob": 0.2}"#);
    let o = coadapt(&["train", ds.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 64);
    let msg = stderr(&o);
    assert!(msg.contains("dropout_prob"), "{msg}");
    assert!(msg.contains("dropout_p,") && msg.contains("noise_sigma"), "{msg}");
}

#[test]
fn nested_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let cfg = write_config(tmp.path(), "nested.json", r#"{"seed": {"value": 1}}"#);
    let o = coadapt(&["train", ds.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 64);
}

#[test]
fn divergence_exits_3_and_names_the_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let cfg = write_config(tmp.path(), "nan.json", r#"{"iterations": 10, "init_count": 40, "n_train": 2, "lr_position": 1e308}"#);
    let o = coadapt(&["train", ds.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("iteration"), "{}", stderr(&o));
}

#[test]
fn train_log_has_ca_columns_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let r = trained(tmp.path(), &ds);
    let log = table(&r.join("trainlog.csv"));
    assert!(log.0.iter().any(|h| h == "test_ca"));
    assert_eq!(column(&log, "iteration"), ["0", "10", "20"]);
    for f in ["final.cspl", "inference.cspl", "config.json"] {
        assert!(r.join(f).exists(), "{f}");
    }
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["dropout_p"], 0.2);

    let first = fs::read(r.join("trainlog.csv")).unwrap();
    let again = trained(tmp.path(), &ds);
    assert_eq!(first, fs::read(again.join("trainlog.csv")).unwrap());
}

#[test]
fn ca_reports_corrected_drop_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let gt = ds.join("gt.cspl");
    for (p, expect) in [("0.2", "0.6"), ("0.0", "0.5")] {
        let out = tmp.path().join(format!("ca_{p}.csv"));
        let o = coadapt(&["ca", gt.to_str().unwrap(), ds.to_str().unwrap(), "--train-p", p, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let t = table(&out);
        assert_eq!(t.0, coadapt_cli::CA_COLUMNS);
        assert_eq!(t.1.len(), 6);
        assert!(column(&t, "drop_ratio").iter().all(|d| *d == expect));
        assert_eq!(column(&t, "split").iter().filter(|s| **s == "train").count(), 3);
    }
}

#[test]
fn ca_needs_two_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let gt = ds.join("gt.cspl");
    let run = |k: &str| coadapt(&["ca", gt.to_str().unwrap(), ds.to_str().unwrap(), "--K", k]);
    assert_eq!(code(&run("1")), 64);
    let ok = run("2");
    assert_eq!(code(&ok), 0);
    let t = report::parse(&String::from_utf8(ok.stdout).unwrap()).unwrap();
    assert!(column(&t, "K").iter().all(|k| *k == "2"));
}

#[test]
fn ca_marks_empty_regions_na() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let gt = ds.join("gt.cspl");
    let o = coadapt(&["ca", gt.to_str().unwrap(), ds.to_str().unwrap(), "--threshold", "1"]);
    assert_eq!(code(&o), 0);
    let t = report::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert!(column(&t, "ca").iter().all(|c| *c == "NA"));
    assert!(column(&t, "visible_fraction").iter().all(|c| *c == "0"));
}

#[test]
fn reports_and_renders_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let gt = ds.join("gt.cspl");
    let (g, d) = (gt.to_str().unwrap(), ds.to_str().unwrap());
    let maps = tmp.path().join("maps");
    let cmds: Vec<Vec<&str>> = vec![
        vec!["ca", g, d, "--train-p", "0.2", "--seed", "5", "--maps", maps.to_str().unwrap()],
        vec!["cv", g, d],
        vec!["metrics", g, d, "--strategy", "B", "--train-p", "0.3"],
    ];
    for c in cmds {
        let a = coadapt(&c);
        let b = coadapt(&c);
        assert_eq!(code(&a), 0, "{}", stderr(&a));
        assert!(!a.stdout.is_empty());
        assert_eq!(a.stdout, b.stdout, "{c:?}");
        assert!(String::from_utf8_lossy(&a.stdout).starts_with("# coadapt "));
    }
    assert!(maps.join("ca_view_005.pfm").exists());

    let render = |name: &str| {
        let p = tmp.path().join(name);
        let o = coadapt(&["render", g, d, "--view", "2", "--strategy", "A", "--train-p", "0.5", "--seed", "3", "--out", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(p).unwrap()
    };
    assert_eq!(render("a.pfm"), render("b.pfm"));
    assert!(render("c.ppm").starts_with(b"P6"));
}

#[test]
fn metrics_of_ground_truth_are_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let gt = ds.join("gt.cspl");
    let o = coadapt(&["metrics", gt.to_str().unwrap(), ds.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let t = report::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    for s in column(&t, "ssim") {
        assert!((s.parse::<f64>().unwrap() - 1.0).abs() < 1e-6);
    }
    for a in column(&t, "depth_absrel") {
        assert_eq!(a.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn sweep_keeps_completed_rows_on_partial_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let cfg = write_config(tmp.path(), "base.json", r#"{"iterations": 8, "ca_interval": 8, "init_count": 40, "ca_threshold": 0.0}"#);
    let out = tmp.path().join("sweep.csv");
    let o = coadapt(&["sweep", ds.to_str().unwrap(), "--kind", "views", "--config", cfg.to_str().unwrap(), "--grid", "2,3,9", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("1 of 3"), "{}", stderr(&o));
    let t = table(&out);
    assert_eq!(t.0, coadapt_cli::SWEEP_COLUMNS);
    assert_eq!(column(&t, "value"), ["2", "3", "9"]);
    let status = column(&t, "status");
    assert_eq!(&status[..2], ["ok", "ok"]);
    assert!(status[2].starts_with("failed"));
    assert!(column(&t, "test_ca")[..2].iter().all(|c| c.parse::<f64>().is_ok()));
}

#[test]
fn strategy_sweep_trains_once_per_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(tmp.path());
    let cfg = write_config(tmp.path(), "base.json", r#"{"iterations": 8, "ca_interval": 8, "init_count": 40, "dropout_p": 0.3}"#);
    let out = tmp.path().join("sweep.csv");
    let o = coadapt(&["sweep", ds.to_str().unwrap(), "--kind", "strategy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = table(&out);
    assert_eq!(column(&t, "value"), ["A", "B", "C"]);
    // One trained cloud, so CA columns agree across strategies.
    let ca = column(&t, "test_ca");
    assert!(ca.iter().all(|c| *c == ca[0]));
}
