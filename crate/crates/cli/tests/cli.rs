use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
per_class = 16
height = 8
width = 8

[coreset]
budget = 3

[searchspace]
intermediates = 2
num_cells = 1
channels = 2

[bilevel]
epochs = 1
steps_per_epoch = 2
batch_size = 8

[retrain]
epochs = 1
batch_size = 8

[pipeline]
num_seeds = 1
variants = ["initial", "cf", "cf_e"]
"#;

fn cfdarts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfdarts"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cfdarts(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = cfdarts(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    let out = Command::new(env!("CARGO_BIN_EXE_cfdarts")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn bad_thread_count_is_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_cfdarts"))
        .args(["report", "nowhere"])
        .env("CFDARTS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("CFDARTS_THREADS"));
}

#[test]
fn phase_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root);
    let (data, corr, init, coll, sel, refd) = (
        root.join("data"),
        root.join("corr"),
        root.join("init"),
        root.join("coll"),
        root.join("sel"),
        root.join("refine"),
    );
    ok(&["gen-data", "--config", &cfg, "--out", p(&data)]);
    for f in ["train.cfds", "val.cfds", "test.cfds", "splits.txt", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let test_bytes = fs::read(data.join("test.cfds")).unwrap();

    ok(&[
        "corrupt",
        "--spec",
        "gaussian_noise:3:1",
        "--in",
        p(&data.join("test.cfds")),
        "--out",
        p(&corr),
    ]);
    let corrupted = corr.join("test-gauss3.cfds");
    assert!(corrupted.is_file());
    assert_eq!(fs::read(data.join("test.cfds")).unwrap(), test_bytes);

    ok(&["search", "--config", &cfg, "--data", p(&data), "--out", p(&init)]);
    let genotype = fs::read_to_string(init.join("genotype.txt")).unwrap();
    assert!(!genotype.is_empty());
    assert!(init.join("model.json").is_file() && init.join("trace1.csv").is_file());

    ok(&[
        "collect",
        "--model",
        p(&init.join("model.json")),
        "--in",
        p(&corrupted),
        "--spec",
        "gaussian_noise:3:1",
        "--out",
        p(&coll),
    ]);
    let failures = coll.join("failures.txt");
    assert!(fs::read_to_string(&failures).unwrap().contains("gaussian_noise:3:1"));

    let select = |budget: &str, mode: &str| {
        ok(&[
            "select",
            "--model",
            p(&init.join("model.json")),
            "--train",
            p(&data.join("train.cfds")),
            "--failures",
            p(&failures),
            "--corrupted",
            p(&corrupted),
            "--budget",
            budget,
            "--mode",
            mode,
            "--out",
            p(&sel),
        ]);
        fs::read_to_string(sel.join("selection.csv")).unwrap()
    };
    assert_eq!(select("0", "kcenter").lines().count(), 1);
    let first = select("2", "kcenter");
    assert!(first.lines().count() <= 3);
    assert_eq!(select("2", "kcenter"), first);

    let n_fail = fs::read_to_string(&failures).unwrap().lines().count();
    if n_fail > 4 {
        ok(&[
            "refine",
            "--config",
            &cfg,
            "--data",
            p(&data),
            "--initial",
            p(&init),
            "--failures",
            p(&failures),
            "--corrupted",
            p(&corrupted),
            "--out",
            p(&refd),
        ]);
        assert!(refd.join("genotype.txt").is_file() && refd.join("held_out.txt").is_file());
        assert!(refd.join("selection1.csv").is_file());
    }

    fs::write(data.join("val.cfds"), b"tampered").unwrap();
    let out = cfdarts(&["search", "--config", &cfg, "--data", p(&data), "--out", p(&root.join("never"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hash mismatch"), "{}", stderr(&out));
    assert!(!root.join("never").exists());
}

#[test]
fn runs_with_same_seed_report_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--config", &cfg, "--out", p(&a)]);
    ok(&["run", "--config", &cfg, "--out", p(&b)]);
    let ra = ok(&["report", p(&a)]).stdout;
    let rb = ok(&["report", p(&b)]).stdout;
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
    for f in ["report.csv", "genotypes.txt", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = tmp.path().join("c");
    ok(&["run", "--config", &cfg, "--seed", "4", "--out", p(&c)]);
    assert_ne!(ok(&["report", p(&c)]).stdout, ra);

    fs::write(a.join("report.csv"), "edited").unwrap();
    let out = cfdarts(&["report", p(&a)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hash mismatch"));
}

#[test]
fn input_errors_have_distinct_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let missing = cfdarts(&["run", "--config", p(&tmp.path().join("absent.toml")), "--out", p(&out_dir)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("missing file"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[coreset]\nbudget = \"many\"\n").unwrap();
    let malformed = cfdarts(&["run", "--config", p(&bad), "--out", p(&out_dir)]);
    assert_eq!(malformed.status.code(), Some(2));
    assert!(stderr(&malformed).contains("malformed config"));

    let spec = cfdarts(&["corrupt", "--spec", "fog:1:1", "--in", p(&bad), "--out", p(&out_dir)]);
    assert_eq!(spec.status.code(), Some(2));
    assert!(stderr(&spec).contains("unknown corruption kind"));

    let report = cfdarts(&["report", p(tmp.path())]);
    assert_eq!(report.status.code(), Some(2));
    assert!(!out_dir.exists());

    let usage = cfdarts(&["select", "--budget", "x"]);
    assert_eq!(usage.status.code(), Some(1));
}
