use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use metatune::config::RunConfig;

fn metatune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metatune")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SCENE: [&str; 6] = [
    "--set", "n_pretrain=300",
    "--set", "n_support=80",
    "--set", "n_query=60",
];

const SMALL_RUN: [&str; 12] = [
    "--set", "episodes=4",
    "--set", "n_trials=3",
    "--set", "inner_iterations=40",
    "--set", "pretrain_iterations=400",
    "--set", "eval_repeats=2",
    "--set", "ablate_seeds=2",
];

fn small_bench(dir: &Path) -> std::path::PathBuf {
    let bench = dir.join("bench");
    let mut args = vec!["gen", "--seed", "3", "--out", p(&bench)];
    args.extend(SMALL_SCENE);
    let out = metatune(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    bench
}

#[test]
fn flat_polynomial_curve_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.txt");
    fs::write(&params, "variant=dynamic\na=0\nb=0\nc=0\n").unwrap();
    let out = dir.path().join("out");
    let r = metatune(&["curves", "--out", p(&out), "--set", &format!("params={}", p(&params))]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(out.join("curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,temperature"));
    let temps: Vec<f64> = lines.map(|l| l.split_once(',').unwrap().1.parse().unwrap()).collect();
    assert_eq!(temps.len(), 101);
    assert!(temps.iter().all(|&t| t == 1.0));
}

#[test]
fn scaled_dynamic_curve_leads_with_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.txt");
    fs::write(&params, "variant=scaled_dynamic\na=0.5\nb=-1\nc=0\nalpha=2\naug=0.25\n").unwrap();
    let out = dir.path().join("out");
    let r = metatune(&["curves", "--out", p(&out), "--set", &format!("params={}", p(&params))]);
    assert!(r.status.success());
    let csv = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(csv.starts_with("alpha=2\nt,temperature\n0,1\n"));
    let last = csv.lines().last().unwrap();
    let tau: f64 = last.split_once(',').unwrap().1.parse().unwrap();
    assert!((tau - (-0.5f64).exp()).abs() < 1e-15);
}

#[test]
fn empty_detections_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let bench = small_bench(dir.path());
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, "image_id,x,y,w,h,class_id,score\n").unwrap();
    let out = dir.path().join("eval");
    let r = metatune(&[
        "eval", "--out", p(&out),
        "--set", &format!("benchmark={}", p(&bench)),
        "--set", &format!("detections={}", p(&dets)),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains("\nmap_novel,0\n"));
    assert!(csv.contains("\nhm,0\n"));
}

#[test]
fn config_is_written_and_flags_beat_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, "# test config\nseed = 5\nepisodes = 30\nvariant = dynamic\neta = 0.001\n").unwrap();
    let out = dir.path().join("out");
    let r = metatune(&[
        "curves", "--config", p(&cfg_path), "--seed", "9", "--out", p(&out),
        "--set", "episodes=31",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let written = out.join("config.txt");
    let back = RunConfig::from_text(&fs::read_to_string(&written).unwrap(), &written).unwrap();
    let mut want = RunConfig::default();
    want.seed = 9;
    want.episodes = 31;
    want.variant = "dynamic".parse().unwrap();
    want.eta = 0.001;
    want.out = out.clone();
    assert_eq!(back, want);
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(metatune(&["--help"]).status.code(), Some(0));
    assert_eq!(metatune(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(metatune(&["curves", "--seed", "x"]).status.code(), Some(1));
    let out = dir.path().join("o");
    assert_eq!(metatune(&["curves", "--out", p(&out), "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(metatune(&["curves", "--out", p(&out), "--set", "stages=aug,loss"]).status.code(), Some(1));
    let missing = dir.path().join("missing");
    let r = metatune(&["pretrain", "--out", p(&out), "--set", &format!("benchmark={}", p(&missing))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!r.stderr.is_empty());

    // Present but malformed input is a runtime failure.
    let broken = dir.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("annotations.csv"), "garbage\n").unwrap();
    let r = metatune(&["pretrain", "--out", p(&out), "--set", &format!("benchmark={}", p(&broken))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("error"));
}

#[test]
fn metatune_is_reproducible_and_worker_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let bench = small_bench(dir.path());
    let bench_set = format!("benchmark={}", p(&bench));
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "metatune", "--seed", "11", "--workers", workers, "--out", p(&out),
            "--set", &bench_set, "--set", "variant=scaled_dynamic", "--set", "stages=loss,aug",
        ];
        args.extend(SMALL_RUN);
        let r = metatune(&args);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        (
            fs::read(out.join("trajectory.csv")).unwrap(),
            fs::read_to_string(out.join("learned_params.txt")).unwrap(),
        )
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "2");
    assert_eq!(a, b);
    assert_eq!(a, c);
    let csv = String::from_utf8(a.0).unwrap();
    // Four loss parameters and one augmentation parameter, four episodes each.
    assert_eq!(csv.lines().count(), 1 + 4 * 4 + 4);
    assert!(a.1.starts_with("variant=scaled_dynamic\na="));
    assert!(a.1.contains("\naug="));
}

#[test]
fn finetune_detections_rescore_identically() {
    let dir = tempfile::tempdir().unwrap();
    let bench = small_bench(dir.path());
    let bench_set = format!("benchmark={}", p(&bench));
    let model_dir = dir.path().join("model");
    let mut args = vec!["pretrain", "--out", p(&model_dir), "--set", &bench_set];
    args.extend(SMALL_RUN);
    assert!(metatune(&args).status.success());

    let tuned = dir.path().join("tuned");
    let model_set = format!("model={}", p(&model_dir.join("model.txt")));
    let mut args = vec!["finetune", "--out", p(&tuned), "--set", &bench_set, "--set", &model_set];
    args.extend(SMALL_RUN);
    let r = metatune(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(tuned.join("model_finetuned.txt").exists());

    let scored = dir.path().join("scored");
    let dets_set = format!("detections={}", p(&tuned.join("detections.csv")));
    let r = metatune(&["eval", "--out", p(&scored), "--set", &bench_set, "--set", &dets_set]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        fs::read_to_string(tuned.join("report.csv")).unwrap(),
        fs::read_to_string(scored.join("report.csv")).unwrap()
    );
}
