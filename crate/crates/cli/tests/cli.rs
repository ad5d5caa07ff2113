use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-tucker")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.split_whitespace().rev().find_map(|tok| tok.strip_prefix(key)?.strip_prefix('='))
}

#[test]
fn analyze_params_reports_counts_and_ratio() {
    let o = run(&["analyze-params", "--arch", "default"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let total = out.lines().find(|l| l.starts_with("total layerwise=")).expect("total line");
    assert_eq!(value(total, "layerwise"), Some("1376688"));
    assert_eq!(value(total, "grouped"), Some("172146"));
    assert_eq!(value(total, "ratio_rounded"), Some("8"));
    let frac: f64 = value(&out, "adapt_fraction").unwrap().parse().unwrap();
    assert!((0.025..=0.045).contains(&frac));
}

#[test]
fn score_at_reference_error_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("errors.txt");
    std::fs::write(
        &path,
        "# reference errors\ntask=a baseline=0.1 error=0.2\ntask=b baseline=0.25 error=0.5 exponent=2\n",
    )
    .unwrap();
    let o = run(&["score", "--errors", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let total: f64 = value(&out, "score").unwrap().parse().unwrap();
    assert_eq!(total, 0.0);
}

#[test]
fn score_rejects_duplicate_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("errors.txt");
    std::fs::write(&path, "task=a baseline=0.1 error=0\ntask=a baseline=0.1 error=0\n").unwrap();
    let o = run(&["score", "--errors", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_checkpoint_has_its_own_exit_code() {
    let o = run(&["eval", "--checkpoint", "/nonexistent/model.ltk"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing-checkpoint"));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(run(&["analyze-params", "--arch", "huge"]).status.code(), Some(2));
}

#[test]
fn generate_then_train_adapt_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let data = ["--classes", "2", "--samples-per-class", "4", "--test-samples-per-class", "2", "--resolution", "16"];
    let train = ["--epochs", "1", "--batch-size", "4"];

    let o = run(&[&["generate-data", "--out", &p("train.ltds")][..], &data].concat());
    assert!(o.status.success());
    assert!(Path::new(&p("train.ltds")).exists());
    assert_eq!(value(&stdout(&o), "records"), Some("8"));

    let o = run(&[&["train-source", "--out", &p("m.ltk")][..], &data, &train].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch=0 split=train"));

    let shifted = [&data[..], &["--invert"]].concat();
    let o = run(&[&["adapt", "--checkpoint", &p("m.ltk"), "--task", "inv"][..], &shifted, &train].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for task in ["source", "inv"] {
        let o = run(&[&["eval", "--checkpoint", &p("m.ltk"), "--task", task][..], &data].concat());
        assert!(o.status.success());
        let acc: f64 = value(&stdout(&o), "accuracy").unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let o = run(&[&["eval", "--checkpoint", &p("m.ltk"), "--task", "nope"][..], &data].concat());
    assert_eq!(o.status.code(), Some(4));

    std::fs::write(p("m.ltk"), b"LTUCKER\0garbage").unwrap();
    let o = run(&[&["eval", "--checkpoint", &p("m.ltk")][..], &data].concat());
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn identical_flags_give_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        let out = dir.path().join(out).to_str().unwrap().to_string();
        let base = "train-source --classes 2 --samples-per-class 3 --test-samples-per-class 2 --resolution 16 --epochs 2 --batch-size 3 --seed 4";
        let mut v: Vec<String> = base.split(' ').map(String::from).collect();
        v.extend(["--out".to_string(), out]);
        v
    };
    let first = args("a.ltk");
    let second = args("b.ltk");
    let a = run(&first.iter().map(String::as_str).collect::<Vec<_>>());
    let b = run(&second.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(a.status.success() && b.status.success());
    let strip = |o: &Output| stdout(o).lines().filter(|l| !l.starts_with("checkpoint=")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(std::fs::read(dir.path().join("a.ltk")).unwrap(), std::fs::read(dir.path().join("b.ltk")).unwrap());
}
