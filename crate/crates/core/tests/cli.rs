use std::fs;
use std::path::Path;
use std::process::Command;

use usta::cli::{main_with, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use usta::network::{ChangeDetector, NetworkConfig};
use usta::raster::{read_change_map, read_image, read_scalar_map};
use usta::selftrain::TrainConfig;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with(
        std::iter::once("usta").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CFG: &str = "\
# small enough for a test
scale = 16
crop = 32
stride = 32
epochs_teacher = 1
epochs_student = 1
seed = 3
";

/// Synthetic 64x64 scene plus a tiny training config in `dir`.
fn setup(dir: &Path) {
    let o = run(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        "2",
        "--h",
        "64",
        "--w",
        "64",
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
}

#[test]
fn synth_writes_a_readable_scene() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let x1 = read_image(dir.path().join("x1.ppm")).unwrap();
    let x2 = read_image(dir.path().join("x2.ppm")).unwrap();
    let reference = read_change_map(dir.path().join("ref.pgm")).unwrap();
    assert_eq!((x1.height(), x1.width(), x1.channels()), (64, 64, 3));
    assert!(x1.same_shape(&x2));
    assert_eq!((reference.height(), reference.width()), (64, 64));
    assert!(reference.count_changed() > 0);
}

#[test]
fn baseline_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let (x1, x2, reference) = (d.join("x1.ppm"), d.join("x2.ppm"), d.join("ref.pgm"));
    for method in ["diff", "ratio", "cva", "pca", "mad", "irmad"] {
        let out = d.join(method);
        let o = run(&[
            "baseline",
            "--method",
            method,
            "--x1",
            p(&x1),
            "--x2",
            p(&x2),
            "--out",
            p(&out),
        ]);
        assert_eq!(o.code, EXIT_OK, "{method}: {}", o.stderr);
        assert!(o.stdout.starts_with("threshold "), "{}", o.stdout);
        let di = read_scalar_map(out.join("di.ustaf")).unwrap();
        assert!(di.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let o = run(&[
            "eval",
            "--pred",
            p(&out.join("map.pgm")),
            "--ref",
            p(&reference),
        ]);
        assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
        let fields: Vec<f64> = o
            .stdout
            .trim()
            .split(',')
            .map(|f| f.parse().unwrap())
            .collect();
        assert_eq!(fields.len(), 3);
        assert!(fields.iter().all(|v| (0.0..=100.0).contains(v)));
    }
    let o = run(&["eval", "--pred", p(&reference), "--ref", p(&reference)]);
    assert_eq!(o.stdout, "100.0,100.0,100.0\n");
}

#[test]
fn predetect_writes_label_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = d.join("pre");
    let o = run(&[
        "predetect",
        "--x1",
        p(&d.join("x1.ppm")),
        "--x2",
        p(&d.join("x2.ppm")),
        "--cfg",
        p(&d.join("tiny.cfg")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let cm1 = read_change_map(out.join("cm1.pgm")).unwrap();
    let pc1 = read_scalar_map(out.join("pc1.ustaf")).unwrap();
    assert_eq!((cm1.height(), pc1.height()), (64, 64));
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = d.join("run");
    let o = run(&[
        "run",
        "--x1",
        p(&d.join("x1.ppm")),
        "--x2",
        p(&d.join("x2.ppm")),
        "--cfg",
        p(&d.join("tiny.cfg")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    for name in ["cm1.pgm", "cm2.pgm", "final.pgm"] {
        let m = read_change_map(out.join(name)).unwrap();
        assert_eq!((m.height(), m.width()), (64, 64), "{name}");
    }
    for name in [
        "pc1.ustaf",
        "pc2.ustaf",
        "teacher_di.ustaf",
        "final_di.ustaf",
    ] {
        let m = read_scalar_map(out.join(name)).unwrap();
        assert_eq!((m.height(), m.width()), (64, 64), "{name}");
    }
    let cfg = usta::config::read(&d.join("tiny.cfg")).unwrap();
    for name in ["teacher.ustaw", "student.ustaw"] {
        let mut net = ChangeDetector::build(cfg.network(3), &mut rand::thread_rng()).unwrap();
        net.load(&out.join(name)).unwrap();
    }
    // a checkpoint does not load into a network of another width
    let mut wider =
        ChangeDetector::build(NetworkConfig::with_scale(8), &mut rand::thread_rng()).unwrap();
    assert!(wider.load(&out.join("teacher.ustaw")).is_err());

    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log.lines().next(), Some("stage,epoch,loss,wall_s"));
}

#[test]
fn sweep_and_ablation_print_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let (x1, x2, reference, cfg) = (
        d.join("x1.ppm"),
        d.join("x2.ppm"),
        d.join("ref.pgm"),
        d.join("tiny.cfg"),
    );
    let o = run(&[
        "sweep",
        "--param",
        "beta",
        "--values",
        "0,1",
        "--x1",
        p(&x1),
        "--x2",
        p(&x2),
        "--ref",
        p(&reference),
        "--cfg",
        p(&cfg),
        "--seeds",
        "1,2",
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines[0], "param,value,seed,f1");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("beta,0,1,"));
    assert!(lines[4].starts_with("beta,1,2,"));

    let o = run(&[
        "ablate-branch",
        "--mode",
        "single,composite",
        "--x1",
        p(&x1),
        "--x2",
        p(&x2),
        "--ref",
        p(&reference),
        "--cfg",
        p(&cfg),
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines[0], "mode,seed,f1");
    assert!(lines[1].starts_with("single,3,"));
    assert!(lines[2].starts_with("composite,3,"));
}

#[test]
fn beta_sweep_matches_separate_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let x1 = read_image(d.join("x1.ppm")).unwrap();
    let x2 = read_image(d.join("x2.ppm")).unwrap();
    let reference = read_change_map(d.join("ref.pgm")).unwrap();
    let cfg = usta::config::read(&d.join("tiny.cfg")).unwrap();
    let rows = usta::cli::sweep(&x1, &x2, &reference, &cfg, "beta", &[0.6, 0.0], &[3]).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.value).collect::<Vec<_>>(),
        vec![0.0, 0.6]
    );
    for row in rows {
        let c = TrainConfig {
            beta: row.value,
            ..cfg
        };
        let out = usta::selftrain::run_usta(&x1, &x2, &c).unwrap();
        let f1 = usta::metrics::evaluate(&out.final_map, &reference)
            .unwrap()
            .f1;
        assert_eq!(row.f1, f1, "beta {}", row.value);
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).code, EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(run(&["eval", "--pred", "a.pgm"]).code, EXIT_USAGE);
    let o = run(&[
        "baseline", "--method", "nope", "--x1", "a", "--x2", "b", "--out", "c",
    ]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(!o.stderr.is_empty());
}

#[test]
fn help_and_version_exit_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.code, EXIT_OK);
    for sub in [
        "synth",
        "baseline",
        "predetect",
        "run",
        "eval",
        "sweep",
        "ablate-branch",
    ] {
        assert!(o.stdout.contains(sub), "{sub} missing from help");
    }
    let o = run(&["--version"]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.stdout.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.pgm");
    let o = run(&["eval", "--pred", p(&missing), "--ref", p(&missing)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.starts_with("error: "), "{}", o.stderr);

    fs::write(d.join("garbage.pgm"), b"not an image").unwrap();
    let o = run(&[
        "eval",
        "--pred",
        p(&d.join("garbage.pgm")),
        "--ref",
        p(&d.join("garbage.pgm")),
    ]);
    assert_eq!(o.code, EXIT_DATA);

    setup(d);
    fs::write(d.join("bad.cfg"), "beta = 2\n").unwrap();
    let o = run(&[
        "predetect",
        "--x1",
        p(&d.join("x1.ppm")),
        "--x2",
        p(&d.join("x2.ppm")),
        "--cfg",
        p(&d.join("bad.cfg")),
        "--out",
        p(&d.join("o")),
    ]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("beta"), "{}", o.stderr);

    let o = run(&["synth", "--out", p(&d.join("s")), "--change", "1.5"]);
    assert_eq!(o.code, EXIT_DATA);
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_usta");
    let status = Command::new(exe).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
    let status = Command::new(exe).arg("bogus").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    let status = Command::new(exe)
        .args([
            "eval",
            "--pred",
            "/nonexistent/a.pgm",
            "--ref",
            "/nonexistent/b.pgm",
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&status.stderr).starts_with("error: "));
}
