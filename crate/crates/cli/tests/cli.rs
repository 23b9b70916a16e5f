//! The `ffconv` binary end to end: exit codes, diagnostics and artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ffconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffconv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ffconv")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FFCONV_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    ["train-images-idx3-ubyte", "t10k-images-idx3-ubyte"]
        .iter()
        .all(|f| dir.join(f).is_file() || dir.join(format!("{f}.gz")).is_file())
        .then_some(dir)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(&path, body).unwrap();
    path
}

fn tiny_config(dir: &Path, data: &Path) -> PathBuf {
    write_config(
        dir,
        &format!(
            "filters = 4\nlayers = 3\nkernel = 3\nepochs = 1\nbatch_size = 25\nlr = 1e-3\n\
             train_limit = 200\nval_limit = 50\ntest_limit = 50\n\
             data_dir = {}\nout_dir = {}\n",
            data.display(),
            dir.join("run").display()
        ),
    )
}

#[test]
fn help_lists_every_subcommand() {
    let o = ffconv(&["--help"]);
    assert!(o.status.success());
    for sub in ["train", "eval", "cam", "sweep", "compare"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = ffconv(&["fit"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_fails_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "filters = 4\nlearning_rate = 0.1\n");
    let o = ffconv(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_names_the_path() {
    let o = ffconv(&["train", "--config", "/nonexistent/ff.conf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/ff.conf"), "{}", stderr(&o));
}

#[test]
fn missing_data_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &tmp.path().join("no-mnist"));
    let o = ffconv(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no-mnist"), "{}", stderr(&o));
}

#[test]
fn sweep_without_a_grid_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "filters = 4\n");
    let o = ffconv(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sweep"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_cam_on_a_small_subset() {
    let Some(data) = mnist_dir() else {
        eprintln!("MNIST not found, skipping (scripts/fetch_mnist.sh)");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &data);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("run");

    let o = ffconv(&["train", "--config", cfg, "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy"));
    for f in ["metrics.csv", "results.csv", "model.ffcnn", "run.log", "confusion_goodness.png"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.contains("seed = 9"), "seed override not recorded");

    let o = ffconv(&["eval", "--config", cfg, "--mode", "goodness"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("goodness accuracy"));

    let o = ffconv(&["cam", "--config", cfg, "--image-index", "3", "--class", "7", "--layers", "2,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("maps for class 7"));
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("cam"))
        .count();
    assert!(pngs >= 3, "{pngs} map files");

    let o = ffconv(&["cam", "--config", cfg, "--class", "10"]);
    assert_eq!(o.status.code(), Some(1));

    let o = ffconv(&["eval", "--config", cfg, "--model", tmp.path().join("none.ffcnn").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("none.ffcnn"), "{}", stderr(&o));
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let Some(data) = mnist_dir() else {
        eprintln!("MNIST not found, skipping (scripts/fetch_mnist.sh)");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &data);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = ffconv(&["train", "--config", cfg, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.csv", "results.csv", "model.ffcnn"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
