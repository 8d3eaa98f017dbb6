use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nrr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nrr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Parses the data row printed after the metrics header.
fn metrics(stdout: &str) -> Vec<Option<f64>> {
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("rmse,corr_err,auc,overlap"));
    lines.next().unwrap().split(',').map(|f| f.parse().ok()).collect()
}

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["generate", "bent-plane", "--resolution", "10", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn identical_inputs_are_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    generate(&input, &["--magnitude", "0"]);
    let src = input.join("source.ply");
    let out = dir.path().join("out");
    let stdout = ok(&["register", p(&src), p(&src), "--gt", p(&src), "--out", p(&out)]);
    assert!(metrics(&stdout)[0].unwrap() < 1e-6, "{stdout}");
    let rows = |name: &str| fs::read_to_string(out.join(name)).unwrap().lines().count() - 1;
    assert!(rows("iterations_coarse.csv") <= 2);
    assert!(rows("iterations_fine.csv") <= 2);
}

#[test]
fn register_writes_all_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    generate(&input, &["--magnitude", "10", "--resample"]);
    let names = ["deformed.ply", "errormap.ply", "metrics.csv", "curve.csv", "iterations_coarse.csv", "iterations_fine.csv"];
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        ok(&[
            "register",
            p(&input.join("source.ply")),
            p(&input.join("target.ply")),
            "--gt",
            p(&input.join("gt.ply")),
            "--gt",
            p(&input.join("gt_pairs.txt")),
            "--out",
            p(&out),
        ]);
        runs.push(names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(runs[0], runs[1]);
    let m = String::from_utf8(runs[0][2].clone()).unwrap();
    assert!(m.starts_with("rmse,corr_err,auc,overlap,coarse_iters,fine_iters,seconds\n"), "{m}");
    let row: Vec<&str> = m.lines().nth(1).unwrap().split(',').collect();
    assert!(row[..4].iter().all(|f| f.parse::<f64>().is_ok()), "{m}");
    assert_eq!(row[6], "", "untimed runs leave seconds empty");
}

#[test]
fn registration_beats_doing_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    generate(&input, &["--magnitude", "20", "--resample"]);
    let (src, tgt, gt) = (input.join("source.ply"), input.join("target.ply"), input.join("gt.ply"));
    let before = metrics(&ok(&["evaluate", p(&src), "--source", p(&src), "--target", p(&tgt), "--gt", p(&gt)]))[0].unwrap();
    let out = dir.path().join("out");
    let after = metrics(&ok(&["register", p(&src), p(&tgt), "--gt", p(&gt), "--out", p(&out)]))[0].unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn evaluate_result_equal_to_truth() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &["--magnitude", "15"]);
    let gt = dir.path().join("gt.ply");
    let pairs = dir.path().join("gt_pairs.txt");
    let m = metrics(&ok(&[
        "evaluate",
        p(&gt),
        "--source",
        p(&dir.path().join("source.ply")),
        "--target",
        p(&dir.path().join("target.ply")),
        "--gt",
        p(&gt),
        "--gt",
        p(&pairs),
    ]));
    assert_eq!(m[0], Some(0.0));
    assert_eq!(m[1], Some(0.0));
    assert_eq!(m[2], Some(1.0));
}

#[test]
fn config_and_flags_limit_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    generate(&input, &["--magnitude", "30"]);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[fine]\nmax_iters = 5\ntol = 1e-12\n").unwrap();
    let (src, tgt) = (input.join("source.ply"), input.join("target.ply"));
    let fine_rows = |out: &Path| fs::read_to_string(out.join("iterations_fine.csv")).unwrap().lines().count() - 1;

    let out = dir.path().join("a");
    ok(&["register", p(&src), p(&tgt), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(fine_rows(&out), 5);

    let out = dir.path().join("b");
    ok(&["register", p(&src), p(&tgt), "--config", p(&cfg), "--fine-iters", "2", "--skip-coarse", "--out", p(&out)]);
    assert_eq!(fine_rows(&out), 2);
    assert_eq!(fs::read_to_string(out.join("iterations_coarse.csv")).unwrap().lines().count(), 1);
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    generate(&input, &[]);
    let src = input.join("source.ply");
    let out = p(dir.path());

    let missing = nrr(&["register", p(&src), p(&dir.path().join("absent.ply")), "--out", out]);
    assert_eq!(missing.status.code(), Some(2));

    let negative = nrr(&["register", p(&src), p(&src), "--w-smo", "-0.5", "--out", out]);
    assert_eq!(negative.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&negative.stderr).contains("coarse.w_smo"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[run]\nseed = 1\n[fine]\nk = 3\n").unwrap();
    let bad = nrr(&["register", p(&src), p(&src), "--config", p(&cfg), "--out", out]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&bad.stderr));

    let landmarks = dir.path().join("lm.txt");
    fs::write(&landmarks, "100000 0\n").unwrap();
    let lm = nrr(&["register", p(&src), p(&src), "--landmarks", p(&landmarks), "--out", out]);
    assert_eq!(lm.status.code(), Some(2));

    assert_eq!(nrr(&["register", p(&src), p(&src), "--metric", "l1"]).status.code(), Some(2));
}

#[test]
fn bench_table_is_a_cartesian_product() {
    let args = ["bench", "--scenarios", "bent_plane", "--seeds", "1", "--resolution", "8", "--magnitude", "10"];
    let table = ok(&args);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "scenario,metric,weights,status,rmse,corr_err,auc,overlap,coarse_iters,fine_iters,seconds");
    assert_eq!(lines.len(), 4);
    for (line, metric) in lines[1..].iter().zip(["sp2p", "p2pl", "p2p"]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[1], f[2], f[3], f[10]), (metric, "robust", "ok", ""));
    }
    assert_eq!(ok(&args), table);

    let mut timed = args.to_vec();
    timed.push("--timings");
    let t = ok(&timed);
    assert!(t.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() >= 0.0));
}
