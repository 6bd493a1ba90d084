use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;
use std::time::{Duration, Instant};

use cbsn::cli::raster;
use cbsn::Tensor;

fn cbsn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbsn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cbsn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast experiment rooted at `root`; lines in `extra` replace base keys.
fn tiny_config(root: &Path, extra: &str) -> PathBuf {
    let base = format!(
        "model.in_channels = 1\nmodel.out_channels = 1\nmodel.base_width = 2\n\
         model.modules_per_branch = 1\nmodel.tail_depth = 2\n\
         train.total_iters = 12\ntrain.batch = 2\ntrain.patch = 20\ntrain.log_every = 4\n\
         train.checkpoint_every = 4\ntrain.lr0 = 0.001\nloss.blind_stride = 2\nloss.warmup_iters = 6\n\
         data.count = 5\ndata.height = 24\ndata.width = 24\ndata.channels = 1\ndata.holdout = 0.2\n\
         data.dir = {}\nrun.dir = {}\n",
        root.join("data").display(),
        root.join("run").display()
    );
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    let path = root.join("exp.txt");
    fs::write(&path, text).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn make_noise_manifest_and_determinism() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "noise.sigma = 0.1\n");
    ok(&["make-noise", "--config", s(&cfg)]);
    let data = root.path().join("data");
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let rows = manifest.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 5);
    let first = dir_bytes(&data.join("noisy"));
    assert_eq!(first.len(), 5);

    let again = root.path().join("again");
    ok(&["make-noise", "--config", s(&cfg), "--out", s(&again)]);
    assert_eq!(dir_bytes(&again.join("noisy")), first);
    assert_eq!(dir_bytes(&again.join("clean")), dir_bytes(&data.join("clean")));
    assert_ne!(dir_bytes(&data.join("clean")), first);

    let other = root.path().join("other");
    ok(&["make-noise", "--config", s(&cfg), "--out", s(&other), "--seed", "9"]);
    assert_ne!(dir_bytes(&other.join("noisy")), first);
}

#[test]
fn zero_noise_gives_identical_files() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "noise.sigma = 0\n");
    ok(&["make-noise", "--config", s(&cfg)]);
    let data = root.path().join("data");
    assert_eq!(dir_bytes(&data.join("clean")), dir_bytes(&data.join("noisy")));
}

#[test]
fn train_denoise_eval_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "");
    ok(&["make-noise", "--config", s(&cfg)]);
    ok(&["train", "--config", s(&cfg), "--seed", "42"]);
    let run = root.path().join("run");
    for f in ["model.cbsn", "state.cbsn", "config.txt", "metrics.csv", "holdout.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("train.seed = 42"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,lr,l_total"));
    assert_eq!(metrics.lines().count(), 1 + 4);

    let noisy = root.path().join("data/noisy/img_0000.cbr");
    let out = root.path().join("den.cbr");
    ok(&["denoise", "--checkpoint", s(&run), "--input", s(&noisy), "--out", s(&out)]);
    let (x, y) = (raster::read(&noisy).unwrap(), raster::read(&out).unwrap());
    assert_eq!(x.shape(), y.shape());

    let report = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.cbsn")),
        "--clean",
        s(&root.path().join("data/clean")),
        "--noisy",
        s(&root.path().join("data/noisy")),
        "--table",
    ]);
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("set,psnr_db,ssim,checkerboard"));
    let denoised_mean: f64 = report
        .lines()
        .find(|l| l.starts_with("denoised,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let per_image: Vec<f64> = report
        .lines()
        .filter(|l| l.starts_with("denoised,img_"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(per_image.len(), 5);
    let avg = per_image.iter().sum::<f64>() / 5.0;
    assert!((avg - denoised_mean).abs() < 1e-9);

    let clean = root.path().join("data/clean");
    let same = ok(&["eval", "--checkpoint", s(&run), "--clean", s(&clean), "--noisy", s(&clean)]);
    let rows: Vec<Vec<&str>> = same.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 4));
    assert_eq!(rows[1][..2], ["noisy", "99"]);
    assert!(rows[2][1].parse::<f64>().unwrap().is_finite());
}

#[test]
fn repeated_training_is_bitwise_identical() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "");
    ok(&["make-noise", "--config", s(&cfg)]);
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["model.cbsn", "state.cbsn", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn killed_run_resumes_to_the_same_result() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        root.path(),
        "train.total_iters = 300\ntrain.checkpoint_every = 10\ntrain.log_every = 10\n",
    );
    ok(&["make-noise", "--config", s(&cfg)]);
    let (full, cut) = (root.path().join("full"), root.path().join("cut"));
    ok(&["train", "--config", s(&cfg), "--out", s(&full)]);

    let mut child = Command::new(env!("CARGO_BIN_EXE_cbsn"))
        .args(["train", "--config", s(&cfg), "--out", s(&cut)])
        .spawn()
        .unwrap();
    let start = Instant::now();
    while !cut.join("state.cbsn").exists() && start.elapsed() < Duration::from_secs(60) {
        thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    assert!(!child.wait().unwrap().success(), "run finished before it could be killed");
    // whatever was on disk at the kill must load and continue
    ok(&["train", "--config", s(&cfg), "--out", s(&cut), "--resume"]);
    for f in ["model.cbsn", "state.cbsn", "metrics.csv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(cut.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eight_bit_pass_through_is_identity() {
    let root = tempfile::tempdir().unwrap();
    let input = root.path().join("levels.png");
    let levels = Tensor::from_fn(&[1, 1, 16, 16], |k| raster::from_u8(k as u8));
    raster::write_png(&input, &levels).unwrap();
    let out = root.path().join("out.png");
    ok(&["denoise", "--pass-through", "--input", s(&input), "--out", s(&out)]);
    let back = raster::read_png(&out).unwrap();
    let bytes: Vec<u8> = back.data().iter().map(|&v| raster::to_u8(v)).collect();
    assert_eq!(bytes, (0..=255u8).collect::<Vec<_>>());

    let mismatch = cbsn(&["denoise", "--pass-through", "--input", s(&input), "--out", s(&root.path().join("x.cbr"))]);
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn verify_quick_passes_and_detects_a_corrupt_mask() {
    let out = ok(&["verify", "--level", "quick"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    let bad = cbsn(&["verify", "--level", "quick", "--corrupt-mask"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL blind-spot"));
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(cbsn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cbsn(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(cbsn(&["--help"]).status.code(), Some(0));

    let bad = root.path().join("bad.txt");
    fs::write(&bad, "model.colour = 3\n").unwrap();
    let out = cbsn(&["train", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let missing = root.path().join("nope.txt");
    assert_eq!(cbsn(&["train", "--config", s(&missing)]).status.code(), Some(3));

    let (clean, noisy) = (root.path().join("c"), root.path().join("n"));
    fs::create_dir_all(&clean).unwrap();
    fs::create_dir_all(&noisy).unwrap();
    let out = cbsn(&["eval", "--checkpoint", s(&missing), "--clean", s(&clean), "--noisy", s(&noisy)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no .cbr rasters"));
}
