use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kacd_core::eval::auc;
use kacd_core::io;
use kacd_core::raster::ImageCube;
use kacd_core::simulate::gaussian_mixture_cube;

fn kacd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kacd"))
        .args(args)
        .env_remove("ACD_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kacd(args);
    assert!(
        out.status.success(),
        "kacd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    kacd(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Scene {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Scene {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cube = gaussian_mixture_cube(64, 64, 4, 3, 2.0, 1).unwrap();
        io::write_raster(&root.join("x.bin"), &cube).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn simulate(&self) {
        ok(&[
            "simulate",
            "--input",
            s(&self.p("x.bin")),
            "--out",
            s(&self.p("y.bin")),
            "--labels",
            s(&self.p("gt.bin")),
        ]);
    }
}

#[test]
fn pipeline_smoke_and_auc_cross_check() {
    let sc = Scene::new();
    sc.simulate();
    assert_eq!(
        io::read_labels(&sc.p("gt.bin"))
            .unwrap()
            .iter()
            .filter(|&&l| l)
            .count(),
        41
    );
    ok(&[
        "fit",
        "--x",
        s(&sc.p("x.bin")),
        "--y",
        s(&sc.p("y.bin")),
        "--detector",
        "hacd",
        "--dist",
        "ec",
        "--nu",
        "5",
        "--mode",
        "kernel",
        "--train-samples",
        "300",
        "--train-labels",
        s(&sc.p("gt.bin")),
        "--model-out",
        s(&sc.p("model")),
    ]);
    ok(&[
        "score",
        "--model",
        s(&sc.p("model")),
        "--x",
        s(&sc.p("x.bin")),
        "--y",
        s(&sc.p("y.bin")),
        "--out",
        s(&sc.p("scores.bin")),
    ]);
    let stdout = ok(&[
        "roc",
        "--scores",
        s(&sc.p("scores.bin")),
        "--labels",
        s(&sc.p("gt.bin")),
        "--out",
        s(&sc.p("roc.csv")),
    ]);
    let printed: f64 = stdout.trim().strip_prefix("auc ").unwrap().parse().unwrap();
    let (_, scores) = io::read_scores(&sc.p("scores.bin")).unwrap();
    let labels = io::read_labels(&sc.p("gt.bin")).unwrap();
    assert_eq!(printed, auc(&scores, &labels).unwrap());
    assert!(printed > 0.9, "auc {printed}");
    assert!(fs::read_to_string(sc.p("roc.csv"))
        .unwrap()
        .starts_with("fpr,tpr,threshold\n"));

    ok(&[
        "map",
        "--scores",
        s(&sc.p("scores.bin")),
        "--tpr-rate",
        "0.82",
        "--labels",
        s(&sc.p("gt.bin")),
        "--out",
        s(&sc.p("map.pgm")),
    ]);
    let pgm = fs::read(sc.p("map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(pgm.len(), 13 + 64 * 64);
    let flagged_true = pgm[13..]
        .iter()
        .zip(&labels)
        .filter(|(&v, &l)| v == 255 && l)
        .count();
    assert!(flagged_true as f64 >= 0.82 * 41.0);

    ok(&[
        "map",
        "--scores",
        s(&sc.p("scores.bin")),
        "--scaled",
        "--out",
        s(&sc.p("scaled.pgm")),
    ]);
    ok(&[
        "map",
        "--scores",
        s(&sc.p("scores.bin")),
        "--quantile",
        "0.01",
        "--out",
        s(&sc.p("q.pgm")),
    ]);
    let q = fs::read(sc.p("q.pgm")).unwrap();
    assert_eq!(q[13..].iter().filter(|&&v| v == 255).count(), 40);
}

#[test]
fn every_detector_name_fits() {
    let sc = Scene::new();
    sc.simulate();
    for det in ["rx", "xy", "yx", "hacd"] {
        ok(&[
            "fit",
            "--x",
            s(&sc.p("x.bin")),
            "--y",
            s(&sc.p("y.bin")),
            "--detector",
            det,
            "--train-samples",
            "200",
            "--model-out",
            s(&sc.p(det)),
        ]);
        let m = io::read_manifest(&sc.p(det)).unwrap();
        assert_eq!(m.config.detector.to_string(), det);
    }
    for kernel in ["linear", "rbf", "sam"] {
        ok(&[
            "fit",
            "--x",
            s(&sc.p("x.bin")),
            "--y",
            s(&sc.p("y.bin")),
            "--mode",
            "kernel",
            "--kernel",
            kernel,
            "--sigma",
            "auto",
            "--lambda",
            "1e-4",
            "--train-samples",
            "100",
            "--model-out",
            s(&sc.p(kernel)),
        ]);
    }
}

#[test]
fn simulate_is_seeded() {
    let sc = Scene::new();
    let run = |seed: &str, name: &str| {
        ok(&[
            "--seed",
            seed,
            "simulate",
            "--input",
            s(&sc.p("x.bin")),
            "--out",
            s(&sc.p(name)),
            "--labels",
            s(&sc.p(&format!("{name}.gt"))),
        ]);
        fs::read(sc.p(name)).unwrap()
    };
    assert_eq!(run("7", "a"), run("7", "b"));
    assert_ne!(run("7", "a"), run("8", "c"));
}

#[test]
fn tune_writes_trace_and_model() {
    let sc = Scene::new();
    sc.simulate();
    let out = ok(&[
        "tune",
        "--x",
        s(&sc.p("x.bin")),
        "--y",
        s(&sc.p("y.bin")),
        "--labels",
        s(&sc.p("gt.bin")),
        "--dist",
        "ec",
        "--n-train",
        "300",
        "--n-val",
        "1500",
        "--trace-out",
        s(&sc.p("trace.csv")),
        "--model-out",
        s(&sc.p("best")),
    ]);
    assert!(out.starts_with("best nu "));
    let trace = fs::read_to_string(sc.p("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "nu,sigma,lambda,val_auc");
    assert_eq!(lines.len(), 101);
    let m = io::read_manifest(&sc.p("best")).unwrap();
    assert!(m.tuning.is_some());
}

#[test]
fn kernel_tune_small_grid_runs() {
    let sc = Scene::new();
    sc.simulate();
    ok(&[
        "tune",
        "--x",
        s(&sc.p("x.bin")),
        "--y",
        s(&sc.p("y.bin")),
        "--labels",
        s(&sc.p("gt.bin")),
        "--mode",
        "kernel",
        "--kernel",
        "sam",
        "--sam-grid-points",
        "4",
        "--n-train",
        "80",
        "--n-val",
        "400",
        "--trace-out",
        s(&sc.p("trace.csv")),
    ]);
    let trace = fs::read_to_string(sc.p("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4 * 30);
}

#[test]
fn usage_errors_exit_2() {
    let sc = Scene::new();
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["bogus"]), 2);
    assert_eq!(
        code(&[
            "simulate",
            "--input",
            s(&sc.p("x.bin")),
            "--scramble-frac",
            "0",
            "--out",
            s(&sc.p("y.bin")),
            "--labels",
            s(&sc.p("gt.bin")),
        ]),
        2
    );
    assert!(
        !sc.p("y.bin").exists(),
        "flags are checked before any output"
    );
    assert_eq!(
        code(&[
            "fit",
            "--x",
            s(&sc.p("x.bin")),
            "--y",
            s(&sc.p("x.bin")),
            "--detector",
            "ab",
            "--model-out",
            s(&sc.p("m")),
        ]),
        2
    );
    assert_eq!(
        code(&[
            "fit",
            "--x",
            s(&sc.p("x.bin")),
            "--y",
            s(&sc.p("x.bin")),
            "--dist",
            "ec",
            "--model-out",
            s(&sc.p("m")),
        ]),
        2
    );
    assert_eq!(
        code(&[
            "map",
            "--scores",
            s(&sc.p("x.bin")),
            "--out",
            s(&sc.p("m.pgm"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "--threads",
            "0",
            "simulate",
            "--input",
            s(&sc.p("x.bin")),
            "--out",
            s(&sc.p("y.bin")),
            "--labels",
            s(&sc.p("gt.bin")),
        ]),
        2
    );
    assert_eq!(code(&["simulate", "--help"]), 0);
}

#[test]
fn io_errors_exit_1() {
    let sc = Scene::new();
    assert_eq!(
        code(&[
            "simulate",
            "--input",
            s(&sc.p("missing.bin")),
            "--out",
            s(&sc.p("y.bin")),
            "--labels",
            s(&sc.p("gt.bin")),
        ]),
        1
    );
    assert_eq!(
        code(&[
            "score",
            "--model",
            s(&sc.p("nomodel")),
            "--x",
            s(&sc.p("x.bin")),
            "--y",
            s(&sc.p("x.bin")),
            "--out",
            s(&sc.p("s.bin")),
        ]),
        1
    );
}

#[test]
fn degenerate_labels_exit_4() {
    let sc = Scene::new();
    let none = vec![false; 64 * 64];
    io::write_labels(&sc.p("none.bin"), 64, 64, &none).unwrap();
    let scores = ImageCube::new(64, 64, 1, (0..4096).map(|v| v as f64).collect()).unwrap();
    io::write_raster(&sc.p("scores.bin"), &scores).unwrap();
    assert_eq!(
        code(&[
            "roc",
            "--scores",
            s(&sc.p("scores.bin")),
            "--labels",
            s(&sc.p("none.bin")),
            "--out",
            s(&sc.p("roc.csv")),
        ]),
        4
    );
}

#[test]
fn threads_env_overrides_flag() {
    let sc = Scene::new();
    let out = Command::new(env!("CARGO_BIN_EXE_kacd"))
        .args(["--threads", "2", "simulate", "--input", s(&sc.p("x.bin"))])
        .args(["--out", s(&sc.p("y.bin")), "--labels", s(&sc.p("gt.bin"))])
        .env("ACD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
