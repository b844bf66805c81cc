use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mint_core::{read_traces, write_traces, Method};

fn mint(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mint"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mint")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", name, "--n-docs", "30", "--n-tokens", "80"];
    if !extra.contains(&"--seed") {
        args.extend(["--seed", "5"]);
    }
    args.extend_from_slice(extra);
    let o = mint(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join(name)
}

#[test]
fn unknown_method_exits_2_with_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "t.jsonl", &[]);
    let o = mint(
        &[
            "score", "--traces", "t.jsonl", "--method", "nope", "--out", "s.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("ERROR 2:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    for m in Method::ALL {
        assert!(err.contains(m.name()), "{err}");
    }
}

#[test]
fn binoculars_without_ce_exits_3_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "t.jsonl", &[]);
    let mut ts = read_traces(std::io::BufReader::new(File::open(&path).unwrap())).unwrap();
    for d in &mut ts.traces {
        d.tokens.iter_mut().for_each(|t| t.ce = None);
    }
    write_traces(&ts, File::create(&path).unwrap()).unwrap();
    let o = mint(
        &[
            "score",
            "--traces",
            "t.jsonl",
            "--method",
            "binoculars",
            "--out",
            "s.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("ERROR 3:") && err.contains("ce"), "{err}");
    assert!(!dir.path().join("s.jsonl").exists());
}

#[test]
fn min_k_with_k_and_parameter_misuse() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "t.jsonl", &[]);
    let o = mint(
        &[
            "score", "--traces", "t.jsonl", "--method", "min_k", "--k", "20", "--out", "s.jsonl",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s.jsonl")).unwrap();
    assert!(text
        .lines()
        .next()
        .unwrap()
        .contains(r#""params":"k_percent=20""#));
    assert_eq!(text.lines().count(), 61);
    assert!(stdout(&o).contains("60 scored, 0 skipped"));

    let o = mint(
        &[
            "score", "--traces", "t.jsonl", "--method", "loss", "--k", "20", "--out", "l.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = mint(
        &[
            "score",
            "--traces",
            "missing.jsonl",
            "--method",
            "loss",
            "--out",
            "l.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = mint(&["score", "--traces", "t.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR 2:"));
}

#[test]
fn synth_is_deterministic_and_validates_clean() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.jsonl", &["--mu1=-2.2"]);
    let b = synth(dir.path(), "b.jsonl", &["--mu1=-2.2"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = synth(dir.path(), "c.jsonl", &["--seed", "6"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let o = mint(
        &[
            "validate",
            "--traces",
            "a.jsonl",
            "--method",
            "binoculars",
            "--require",
            "samples",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 violations"));
}

#[test]
fn validate_reports_missing_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "t.jsonl", &[]);
    let mut ts = read_traces(std::io::BufReader::new(File::open(&path).unwrap())).unwrap();
    ts.traces[1].tokens[0].mu = None;
    write_traces(&ts, File::create(&path).unwrap()).unwrap();
    let o = mint(
        &["validate", "--traces", "t.jsonl", "--method", "entropy"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("line 3 "), "{}", stdout(&o));
    assert!(stdout(&o).contains("missing:mu@token0"));
    assert!(stdout(&o).contains("1 violations"));
}

#[test]
fn transfer_on_identical_tables_prints_rho_one() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "t.jsonl", &[]);
    let mut scores = Vec::new();
    for m in ["loss", "zlib", "min_k", "recall"] {
        let out = format!("{m}.jsonl");
        let o = mint(
            &["score", "--traces", "t.jsonl", "--method", m, "--out", &out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        scores.push(out);
    }
    let mut args = vec![
        "eval",
        "--out",
        "results.csv",
        "--bootstrap-iters",
        "200",
        "--seed",
        "3",
        "--scores",
    ];
    args.extend(scores.iter().map(String::as_str));
    let o = mint(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(
        table.starts_with("task,domain,model_id,method,params,auroc,n_pos,n_neg,ci_low,ci_high\n")
    );

    let o = mint(
        &[
            "transfer",
            "--a",
            "results.csv",
            "--b",
            "results.csv",
            "--out",
            "transfer.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rho=1.0"), "{}", stdout(&o));
    let transfer = fs::read_to_string(dir.path().join("transfer.csv")).unwrap();
    assert!(transfer.starts_with("method,family,mean_auroc_a,mean_auroc_b,rank_a,rank_b\n"));
    assert!(transfer.contains("\nrho,1,"));
    assert!(transfer.contains("\np_value,"));

    let o = mint(
        &[
            "report",
            "--out-dir",
            "rep",
            "--bins",
            "10",
            "--pair",
            "loss:zlib",
            "--scores",
            "loss.jsonl",
            "zlib.jsonl",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let js = fs::read_to_string(dir.path().join("rep/js.csv")).unwrap();
    assert_eq!(js.lines().count(), 4);
    let o = mint(
        &["report", "--out-dir", "rep", "--zlib-traces", "t.jsonl"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("rep/zlib_entropy.csv").exists());
}

#[test]
fn help_lists_every_method_with_fields() {
    let dir = tempfile::tempdir().unwrap();
    let o = mint(&["--help"], dir.path());
    assert!(o.status.success());
    let help = stdout(&o);
    for m in Method::ALL {
        let line = help
            .lines()
            .find(|l| l.split_whitespace().next() == Some(m.name()))
            .unwrap_or_else(|| panic!("{} missing from help", m.name()));
        for f in m.required_fields() {
            assert!(line.contains(f.name()), "{line}");
        }
    }
    let o = mint(&["score", "--help"], dir.path());
    assert!(stdout(&o).contains("fast_detectgpt"));
}

#[test]
fn batch_run_is_identical_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "mia.jsonl", &[]);
    synth(dir.path(), "mgtd.jsonl", &["--task", "mgtd", "--mu1=-2.7"]);
    for (name, out) in [("one.toml", "out1"), ("eight.toml", "out8")] {
        let cfg = format!(
            "output_dir = \"{out}\"\nmethods = [\"loss\", \"min_k(k=10)\", \"binoculars\", \"lastde\", \"neighborhood\"]\nseed = 9\n\
             [[inputs]]\npath = \"mia.jsonl\"\n[[inputs]]\npath = \"mgtd.jsonl\"\n[bootstrap]\niters = 150\n"
        );
        fs::write(dir.path().join(name), cfg).unwrap();
    }
    let o1 = mint(&["--jobs", "1", "run", "--config", "one.toml"], dir.path());
    assert!(o1.status.success(), "{}", stderr(&o1));
    let o8 = mint(
        &["run", "--config", "eight.toml", "--jobs", "8"],
        dir.path(),
    );
    assert!(o8.status.success(), "{}", stderr(&o8));
    assert!(stdout(&o1).contains("rho="));
    let files = |root: &Path| {
        let mut v: Vec<PathBuf> = walk(root);
        v.sort();
        v
    };
    let (a, b) = (
        files(&dir.path().join("out1")),
        files(&dir.path().join("out8")),
    );
    assert_eq!(a.len(), 4 + 10);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }

    let o = mint(&["--jobs", "0", "run", "--config", "one.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(
        dir.path().join("bad.toml"),
        "output_dir = 'o'\nmethods = ['loss']\nbogus = 1\n[[inputs]]\npath = 'mia.jsonl'\n",
    )
    .unwrap();
    let o = mint(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR 2:"));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn mint_log_enables_progress_output() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "t.jsonl", &[]);
    let o = Command::new(env!("CARGO_BIN_EXE_mint"))
        .args([
            "score", "--traces", "t.jsonl", "--method", "loss", "--out", "s.jsonl",
        ])
        .env("MINT_LOG", "info")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("60 scored"), "{}", stderr(&o));
}
