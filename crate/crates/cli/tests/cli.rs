use std::path::Path;
use std::process::{Command, Output};

use ergoghost::data::idx::{IdxFile, IMAGES_MAGIC, LABELS_MAGIC};
use ergoghost::data::mnist::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

fn ergoghost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergoghost"))
        .args(args)
        .env_remove("ERGOGHOST_MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A tiny MNIST-shaped dataset: `n` images per split with cycling labels and
/// label-dependent pixel blobs.
fn write_fake_mnist(dir: &Path, train: usize, test: usize) {
    let write = |images: &str, labels: &str, n: usize, salt: usize| {
        let y: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let px: Vec<u8> = (0..n)
            .flat_map(|i| {
                let l = y[i] as usize;
                (0..784).map(move |p| {
                    if (p / 28 + p % 28 + salt * i) % 10 == l {
                        200
                    } else {
                        (p * 7 + i) as u8 % 40
                    }
                })
            })
            .collect();
        let img = IdxFile {
            magic: IMAGES_MAGIC,
            dims: vec![n as u32, 28, 28],
            payload: px,
        };
        let lab = IdxFile {
            magic: LABELS_MAGIC,
            dims: vec![n as u32],
            payload: y,
        };
        std::fs::write(dir.join(images), img.to_bytes()).unwrap();
        std::fs::write(dir.join(labels), lab.to_bytes()).unwrap();
    };
    write(TRAIN_IMAGES, TRAIN_LABELS, train, 1);
    write(TEST_IMAGES, TEST_LABELS, test, 3);
}

const TINY_STUDY: &str = "\
name = tiny
per_class = 2
model = mlp
hidden = 8
eta = 0.2
epochs = 6
runs = 2
lyapunov_every = 3
lyapunov_iterations = 4
";

#[test]
fn selftest_passes() {
    let out = ergoghost(&["selftest"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("ok"));
}

#[test]
fn bypass_demo_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("cert.json");
    let out = ergoghost(&["demo", "bypass", "--json", json.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("VALID"));
    let cert: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert!(cert["certificate"]["points"].as_array().unwrap().len() >= 10);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&ergoghost(&["frobnicate"])), 2);
    assert_eq!(code(&ergoghost(&["selftest", "--bogus"])), 2);
    assert_eq!(code(&ergoghost(&["study", "run"])), 2);
    assert_eq!(code(&ergoghost(&["--help"])), 0);
}

#[test]
fn missing_dataset_exits_two_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.cfg");
    std::fs::write(&cfg, TINY_STUDY).unwrap();
    let empty = dir.path().join("nothing-here");
    let out = ergoghost(&[
        "study",
        "run",
        cfg.to_str().unwrap(),
        "--data-dir",
        empty.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("data fetch --checksum"), "{err}");
    assert_eq!(err.matches("data fetch").count(), 1, "hint repeated: {err}");
}

#[test]
fn missing_config_exits_two() {
    assert_eq!(code(&ergoghost(&["diag", "lyapunov", "/definitely/not/here.cfg"])), 2);
    assert_eq!(code(&ergoghost(&["study", "plot", "/definitely/not/here"])), 2);
}

#[test]
fn invalid_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("unknown.cfg", "target = saddle\nwobble = 3\n"),
        ("eta.cfg", "target = saddle\neta = -1\n"),
        ("dup.cfg", "target = saddle\ntarget = ridge2d\n"),
    ] {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        let out = ergoghost(&["diag", "lyapunov", p.to_str().unwrap()]);
        assert_eq!(code(&out), 1, "{name}: {}", stderr(&out));
    }
    let p = dir.path().join("study.cfg");
    std::fs::write(&p, "ghosts = 0\n").unwrap();
    assert_eq!(code(&ergoghost(&["study", "run", p.to_str().unwrap()])), 1);
}

#[test]
fn saddle_diagnostic_reports_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("saddle.cfg");
    std::fs::write(
        &p,
        "target = saddle\neta = 0.1\nsteps = 50\nstart = 0, 0\ncadences = 1, 10\n",
    )
    .unwrap();
    let a = ergoghost(&["diag", "lyapunov", p.to_str().unwrap()]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(stdout(&a).contains("γ̂=+0.095310"), "{}", stdout(&a));
    assert_eq!(
        stdout(&a),
        stdout(&ergoghost(&["diag", "lyapunov", p.to_str().unwrap()]))
    );
}

#[test]
fn study_run_and_plot_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    write_fake_mnist(&data, 60, 30);
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY_STUDY).unwrap();

    let run = |out: &str| {
        let o = dir.path().join(out);
        let res = ergoghost(&[
            "study",
            "run",
            cfg.to_str().unwrap(),
            "--data-dir",
            data.to_str().unwrap(),
            "--output",
            o.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}{}", stdout(&res), stderr(&res));
        o
    };
    let first = run("a");
    let second = run("b");

    let csv = std::fs::read_to_string(first.join("results.csv")).unwrap();
    assert!(csv.starts_with("run_id,arm,epoch,train_loss,test_loss,test_acc,gamma_hat,f_ghost_mean\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 6);
    let svgs: Vec<String> = std::fs::read_dir(&first)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    assert!(svgs.len() >= 5, "{svgs:?}");
    for name in svgs
        .iter()
        .map(String::as_str)
        .chain(["results.csv", "summary.json", "runs.json"])
    {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name} differs between reruns"
        );
    }

    let before: Vec<Vec<u8>> = svgs.iter().map(|n| std::fs::read(first.join(n)).unwrap()).collect();
    for n in &svgs {
        std::fs::remove_file(first.join(n)).unwrap();
    }
    let plot = ergoghost(&["study", "plot", first.to_str().unwrap()]);
    assert_eq!(code(&plot), 0, "{}", stderr(&plot));
    let after: Vec<Vec<u8>> = svgs.iter().map(|n| std::fs::read(first.join(n)).unwrap()).collect();
    assert_eq!(before, after);
}
