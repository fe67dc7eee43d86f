use std::path::Path;
use std::process::{Command, Output, Stdio};

fn nestpref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nestpref"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_bench(out: &Path) -> Output {
    nestpref(&[
        "bench",
        "run",
        "--function",
        "2d",
        "--model",
        "gp,random",
        "--acq",
        "pi",
        "--scenarios",
        "1",
        "--budget",
        "2",
        "--baseline-reps",
        "20",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn bench_run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_bench(dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["curves.csv", "runs.csv", "traces.csv", "failures.csv", "curves.svg", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().filter(|l| l.starts_with("gp+pi,")).count(), 2);
    assert_eq!(curves.lines().filter(|l| l.starts_with("random,")).count(), 2);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("method,t,mean_gap\n"));
}

#[test]
fn bench_run_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(small_bench(a.path()).status.success());
    assert!(small_bench(b.path()).status.success());
    for f in ["curves.csv", "runs.csv", "traces.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_is_accepted_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "target = \"4d\"\nmodels = []\nscenarios = 1\nbudget = 3\nbaseline_repetitions = 10\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = nestpref(&["bench", "run", "--config", cfg.to_str().unwrap(), "--budget", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(written.contains("target = \"4d\""));
    assert!(written.contains("budget = 2"));
    let curves = std::fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = nestpref(&["bench", "run", "--function", "3d"]);
    assert!(!out.status.success());
    let out = nestpref(&["bench", "run", "--model", "gp", "--budget", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
    let out = nestpref(&["bench", "run", "--dataset", "flights"]);
    assert!(!out.status.success());
}

#[test]
fn itinerary_synthesize_matches_the_bundled_file() {
    let out = nestpref(&["itinerary", "synthesize"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), nestpref::itinerary::SYNTHETIC_ITINERARIES_CSV);
}

#[test]
fn itinerary_probs_sum_to_one() {
    let out = nestpref(&["itinerary", "probs"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let total: f64 = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert_eq!(text.lines().count(), 544);
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn elicit_reads_answers_from_stdin() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.csv");
    std::fs::write(&pool, "id,nest,label,price\n1,a,cheap,1\n2,a,mid,2\n3,b,dear,3\n4,b,luxury,4\n5,a,budget,0.5\n").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_nestpref"))
        .args(["elicit", pool.to_str().unwrap(), "--model", "gp", "--budget", "1"])
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    // always prefer the first option
    child.stdin.take().unwrap().write_all(b"x\n1\n1\n1\n1\n1\n1\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("warm-up: which do you prefer?"));
    assert!(text.contains("answer 1 or 2"));
    assert!(text.contains("finished"), "{text}");
}
