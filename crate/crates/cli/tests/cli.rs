use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stegattn::pipeline::{load_checkpoint, save_checkpoint, synth_dataset};
use stegattn::{Shape, Tensor};
use tempfile::TempDir;

fn stegattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stegattn"))
        .args(args)
        .env("RUST_LOG", "warn")
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data(count: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path(), count, 16, 3).unwrap();
    dir
}

const TINY: [&str; 6] = ["--image-size", "16", "--steps", "2", "--batch", "2"];

fn train(data: &Path, mode: &str, out: &Path) -> Output {
    let mut args = vec!["train", "--data", s(data), "--mode", mode, "--out", s(out)];
    args.extend(TINY);
    stegattn(&args)
}

/// Parse `key value` lines printed by hide/reveal.
fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = data(4);
    let out = tempfile::tempdir().unwrap();
    let r = train(dir.path(), "bogus", &out.path().join("m.stga"));
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("parallel"), "{}", stderr(&r));
    assert_eq!(code(&stegattn(&["frobnicate"])), 1);
    assert_eq!(code(&stegattn(&["--help"])), 0);

    let empty = tempfile::tempdir().unwrap();
    let r = train(empty.path(), "baseline", &out.path().join("m.stga"));
    assert_eq!(code(&r), 1, "{}", stderr(&r));

    let r = stegattn(&["train", "--data", s(dir.path()), "--mode", "baseline", "--out", "x", "--image-size", "4"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn missing_inputs_exit_two() {
    let out = tempfile::tempdir().unwrap();
    let r = train(&out.path().join("nowhere"), "baseline", &out.path().join("m.stga"));
    assert_eq!(code(&r), 2, "{}", stderr(&r));
    let r = stegattn(&[
        "reveal",
        "--checkpoint",
        s(&out.path().join("missing.stga")),
        "--stego",
        "x.png",
        "--out",
        "y.png",
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn train_is_reproducible() {
    let dir = data(6);
    let out = tempfile::tempdir().unwrap();
    let (a, b) = (out.path().join("a.stga"), out.path().join("b.stga"));
    for p in [&a, &b] {
        let r = train(dir.path(), "channel-spatial-parallel", p);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = |p: &PathBuf| std::fs::read_to_string(format!("{}.loss.csv", p.display())).unwrap();
    assert_eq!(log(&a), log(&b));
    let lines: Vec<String> = log(&a).lines().map(str::to_owned).collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn hide_and_reveal_round_trip() {
    let dir = data(4);
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("m.stga");
    assert_eq!(code(&train(dir.path(), "channel", &ckpt)), 0);
    let (cover, secret) = (dir.path().join("synth_000.png"), dir.path().join("synth_001.png"));
    let (stego, revealed) = (out.path().join("stego.png"), out.path().join("revealed.png"));

    let r = stegattn(&["hide", "--checkpoint", s(&ckpt), "--cover", s(&cover), "--secret", s(&secret), "--out", s(&stego)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = stdout(&r);
    for key in ["psnr_cover", "ssim_cover", "psnr_cover_float", "ssim_cover_float"] {
        assert!(metric(&text, key).is_finite());
    }
    assert_eq!(image::image_dimensions(&stego).unwrap(), (16, 16));
    // 8-bit rounding moves each pixel by at most 1/510, so by the triangle
    // inequality the two RMS errors differ by no more than that.
    let rmse = |psnr: f64| 10f64.powf(-psnr / 20.0);
    let gap = (rmse(metric(&text, "psnr_cover")) - rmse(metric(&text, "psnr_cover_float"))).abs();
    assert!(gap <= 1.0 / 510.0 + 1e-4, "{gap}");

    let r = stegattn(&[
        "reveal",
        "--checkpoint",
        s(&ckpt),
        "--stego",
        s(&stego),
        "--out",
        s(&revealed),
        "--secret",
        s(&secret),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(image::image_dimensions(&revealed).unwrap(), (16, 16));
    let text = stdout(&r);
    let ssim = metric(&text, "ssim_secret");
    assert!((-1.0..=1.0).contains(&ssim));
    assert!(metric(&text, "psnr_secret").is_finite());
}

#[test]
fn checkpoint_shape_mismatch_names_both_shapes() {
    let dir = data(4);
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("m.stga");
    assert_eq!(code(&train(dir.path(), "baseline", &ckpt)), 0);
    let (mut params, config) = load_checkpoint(&ckpt).unwrap();
    params.reveal_out.weight = Tensor::zeros(Shape::new(3, 65, 5, 5));
    save_checkpoint(&params, &config, &ckpt).unwrap();

    let r = stegattn(&[
        "reveal",
        "--checkpoint",
        s(&ckpt),
        "--stego",
        s(&dir.path().join("synth_000.png")),
        "--out",
        s(&out.path().join("r.png")),
    ]);
    assert_eq!(code(&r), 2);
    let err = stderr(&r);
    assert!(err.contains("[3, 65, 5, 5]") && err.contains("[3, 65, 3, 3]"), "{err}");
}

#[test]
fn compare_writes_header_and_six_rows() {
    let dir = data(6);
    let out = tempfile::tempdir().unwrap();
    let csv = out.path().join("table.csv");
    let mut args = vec!["compare", "--data", s(dir.path()), "--out", s(&csv)];
    args.extend(TINY);
    let r = stegattn(&args);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,psnr_cover,ssim_cover,psnr_secret,ssim_secret,mse_cover,mse_secret");
    assert_eq!(lines.len(), 7);
    assert_eq!(stdout(&r), text);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let r = stegattn(&["gradcheck"]);
    assert_eq!(code(&r), 0, "{}", stdout(&r));
    assert!(stdout(&r).contains("worst relative error"));

    let r = stegattn(&["gradcheck", "--inject-fault", "broadcast_mul"]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("broadcast_mul"), "{}", stderr(&r));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = data(6);
    let out = tempfile::tempdir().unwrap();
    let run = |threads: &str, name: &str| {
        let p = out.path().join(name);
        let mut args = vec!["train", "--data", s(dir.path()), "--mode", "spatial", "--out", s(&p)];
        args.extend(TINY);
        let r = Command::new(env!("CARGO_BIN_EXE_stegattn"))
            .args(&args)
            .env("STEGATTN_THREADS", threads)
            .output()
            .unwrap();
        (code(&r), std::fs::read(&p).unwrap_or_default())
    };
    let (c1, a) = run("1", "one.stga");
    let (c2, b) = run("3", "three.stga");
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(a, b);

    let r = Command::new(env!("CARGO_BIN_EXE_stegattn"))
        .args(["gradcheck"])
        .env("STEGATTN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&r), 1);
}
