use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, name: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name}\t")))
        .unwrap_or_else(|| panic!("no `{name}` line in:\n{text}"))
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(dir: &Path) -> PathBuf {
    let path = dir.join("data.txt");
    let o = gsim(&["gen-data", "--out", s(&path)]);
    assert_eq!(o.status.code(), Some(0));
    path
}

#[test]
fn gen_data_reports_default_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    let o = gsim(&["gen-data", "--out", s(&path)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(field(&out, "samples"), "480");
    assert_eq!(field(&out, "classes"), "40");
    assert!(out.contains("# num_classes = 40"));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("GSIM-DATA 1 32 32\n"));
    assert_eq!(text.lines().count(), 481);
}

#[test]
fn config_file_with_command_line_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nnum_classes = 12\nseed = 4\n").unwrap();
    let path = dir.path().join("d.txt");
    let o = gsim(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--set",
        "samples_per_class_x=2",
        "--out",
        s(&path),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("# seed = 9"));
    assert!(out.contains("# num_classes = 12"));
    assert_eq!(field(&out, "samples_x"), "24");
    assert_eq!(field(&out, "samples_y"), "72");
}

#[test]
fn train_eval_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let model = dir.path().join("model.txt");
    let trace = dir.path().join("trace.txt");
    let o = gsim(&[
        "train",
        "--set",
        "iterations=40",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--trace",
        s(&trace),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 40);
    assert!(lines[0].starts_with("1\t"));
    let last: f64 = lines[39].split('\t').nth(1).unwrap().parse().unwrap();
    let reported: f64 = field(&stdout(&o), "final_mean_loss").parse().unwrap();
    assert!((last - reported).abs() <= 1e-15 * reported.abs().max(1.0));

    let o = gsim(&["eval", "--model", s(&model), "--data", s(&data), "--mode", "cmc", "--splits", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("split\t")).count(), 3);
    let r1: f64 = field(&out, "rank-1").parse().unwrap();
    let r10: f64 = field(&out, "rank-10").parse().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert_eq!(r10, 1.0);

    let o = gsim(&["eval", "--model", s(&model), "--data", s(&data), "--mode", "verify"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(field(&out, "pairs"), "120");
    let acc: f64 = field(&out, "accuracy").parse().unwrap();
    assert!((0.5..=1.0).contains(&acc));

    let x = dir.path().join("x.txt");
    let y = dir.path().join("y.txt");
    std::fs::write(&x, vec!["0.25"; 32].join(" ")).unwrap();
    std::fs::write(&y, vec!["-0.5"; 32].join("\n")).unwrap();
    let o = gsim(&["score", "--model", s(&model), s(&x), s(&y)]);
    assert_eq!(o.status.code(), Some(0));
    let score: f64 = field(&stdout(&o), "score").parse().unwrap();
    let state = gsim::dataio::load_model(&model).unwrap();
    let sample = |v: f64, domain| gsim::trainer::Sample {
        id: 0,
        domain,
        class_id: 0,
        raw: gsim::simcore::Vector::from_element(32, v),
    };
    let want = state
        .score(&sample(0.25, gsim::Domain::X), &sample(-0.5, gsim::Domain::Y))
        .unwrap();
    assert_eq!(score, want);
}

#[test]
fn train_writes_trace_to_stdout_without_trace_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let model = dir.path().join("m.txt");
    let o = gsim(&["train", "--set", "iterations=3", "--data", s(&data), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("3\t")));
}

#[test]
fn grad_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let fine = gsim(&["grad-check", "--data", s(&data)]);
    assert_eq!(fine.status.code(), Some(0), "{}", stdout(&fine));
    let fine_err: f64 = field(&stdout(&fine), "max_rel_error").parse().unwrap();
    assert!(fine_err <= 1e-6);

    let coarse = gsim(&["grad-check", "--data", s(&data), "--step", "1e-2"]);
    let coarse_err: f64 = field(&stdout(&coarse), "max_rel_error").parse().unwrap();
    assert!(coarse_err > fine_err);

    let corrupt = gsim(&["grad-check", "--data", s(&data), "--corrupt-gradient"]);
    assert_eq!(corrupt.status.code(), Some(1));
    assert_eq!(field(&stdout(&corrupt), "status"), "FAIL");
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let model = dir.path().join("m.txt");

    // IO and parse failures
    let o = gsim(&["train", "--data", s(&missing), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.txt"));
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "GSIM-DATA 1 2 2\nX 0 1.0\n").unwrap();
    let o = gsim(&["train", "--data", s(&bad), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let o = gsim(&["gen-data", "--config", s(&cfg), "--out", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(gsim(&["frobnicate"]).status.code(), Some(2));

    // validation failures
    let o = gsim(&["gen-data", "--set", "learning_rate=0", "--out", s(&bad)]);
    assert_eq!(o.status.code(), Some(0), "gen-data ignores training keys");
    let data = dataset(dir.path());
    let o = gsim(&["train", "--set", "learning_rate=0", "--data", s(&data), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = gsim(&["gen-data", "--set", "nope=1", "--out", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!model.exists());
}

#[test]
fn eval_rejects_mismatched_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let small = dir.path().join("small.txt");
    let o = gsim(&["gen-data", "--set", "input_dim_x=5", "--out", s(&small)]);
    assert_eq!(o.status.code(), Some(0));
    let model = dir.path().join("m.txt");
    let o = gsim(&["train", "--set", "iterations=2", "--data", s(&small), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(0));
    let o = gsim(&["eval", "--model", s(&model), "--data", s(&data), "--mode", "cmc"]);
    assert_eq!(o.status.code(), Some(1));
}
