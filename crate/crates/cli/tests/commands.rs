use std::path::Path;
use std::process::{Command, Output};

use pharnet::data::{load_image, save_image};
use pharnet::tensor::Shape;
use pharnet::Tensor;

fn pharnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pharnet")).args(args).current_dir(dir).env_remove("PHARNET_INJECT_FAULT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a corpus, trains two steps and returns the final checkpoint.
fn trained(dir: &Path) -> std::path::PathBuf {
    let o = pharnet(&["synth-data", "--out", "corpus", "--foregrounds", "3", "--backgrounds", "3", "--size", "64"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pharnet(&["train", "--data", "corpus/manifest.txt", "--out", "run", "--steps", "2", "--batch", "2"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("run/ckpt-000002.phrn")
}

#[test]
fn smoke_train_on_synth_reports_finite_losses() {
    let dir = tempfile::tempdir().unwrap();
    let o = pharnet(&["train", "--data", "synth", "--synth-count", "4", "--steps", "2", "--batch", "2", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    for line in &lines {
        for field in line.split_whitespace().skip(1) {
            let v: f64 = field.split_once('=').unwrap().1.parse().unwrap();
            assert!(v.is_finite(), "{line}");
        }
    }
    let log = std::fs::read_to_string(dir.path().join("run/loss.log")).unwrap();
    assert_eq!(log.lines().collect::<Vec<_>>(), lines);
}

#[test]
fn conflicting_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = pharnet(&["train", "--ablation", "V1", "--residual-layers", "1,2,3,4"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--residual-layers"));
    assert_eq!(pharnet(&["train", "--ablation", "V7"], dir.path()).status.code(), Some(2));
    assert_eq!(pharnet(&["train", "--resume", "x.phrn", "--seed", "3"], dir.path()).status.code(), Some(2));
    assert_eq!(pharnet(&["train", "--size", "70"], dir.path()).status.code(), Some(2));
    assert_eq!(pharnet(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = pharnet(&["train", "--data", "nowhere/manifest.txt", "--steps", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn harmonize_keeps_odd_sizes_and_times() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let (h, w) = (37, 53);
    let shape = Shape::new(1, 3, h, w);
    save_image(&Tensor::from_fn(shape, |_, c, y, x| ((x + 2 * y + c) % 17) as f32 / 17.0), &dir.path().join("c.ppm")).unwrap();
    save_image(&Tensor::from_fn(shape, |_, c, y, _| (c as f32 + y as f32 / h as f32) / 3.0), &dir.path().join("b.png")).unwrap();
    // two separate foreground blobs in one mask
    let mask = Tensor::from_fn(shape.with_channels(1), |_, _, y, x| ((y < 10 && x < 10) || (y > 25 && x > 40)) as u8 as f32);
    save_image(&mask, &dir.path().join("m.pgm")).unwrap();

    let args = ["harmonize", "--composite", "c.ppm", "--background", "b.png", "--mask", "m.pgm", "--checkpoint", ckpt.to_str().unwrap()];
    let o = pharnet(&[&args[..], &["--out", "o.png", "--soft-mask", "s.pgm", "--time", "--reps", "2"]].concat(), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("padding"));
    let out = load_image(&dir.path().join("o.png")).unwrap();
    assert_eq!(out.shape(), shape);
    let text = stdout(&o);
    let timing: Vec<&str> = text.lines().filter(|l| l.starts_with("mean_ms=")).collect();
    assert_eq!(timing.len(), 1);
    assert!(timing[0]["mean_ms=".len()..].parse::<f64>().unwrap() > 0.0);

    save_image(&Tensor::zeros(shape.with_channels(1)), &dir.path().join("empty.pgm")).unwrap();
    let o = pharnet(
        &[
            "harmonize",
            "--composite",
            "c.ppm",
            "--background",
            "b.png",
            "--mask",
            "empty.pgm",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            "x.png",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no pixels"));
}

#[test]
fn resume_continues_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let straight = pharnet(&["train", "--synth-count", "4", "--steps", "3", "--batch", "2", "--out", "a"], dir.path());
    assert!(straight.status.success());
    let first = pharnet(&["train", "--synth-count", "4", "--steps", "1", "--batch", "2", "--out", "b"], dir.path());
    assert!(first.status.success());
    let o = pharnet(&["train", "--synth-count", "4", "--steps", "3", "--resume", "b/ckpt-000001.phrn", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read_to_string(dir.path().join("a/loss.log")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/loss.log")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradcheck_lists_every_op_once_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pharnet(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for op in pharnet::OpKind::ALL {
        let rows = text.lines().filter(|l| l.split_whitespace().next() == Some(op.name())).count();
        assert_eq!(rows, 1, "{}", op.name());
    }
}

#[test]
fn gradcheck_fails_on_an_injected_sign_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pharnet"))
        .arg("gradcheck")
        .current_dir(dir.path())
        .env("PHARNET_INJECT_FAULT", "div")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let text = stdout(&o);
    let failing: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL")).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert!(failing.contains(&"div"), "{failing:?}");
}

#[test]
fn bt_fit_reads_pair_lines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pairs.txt"), "# study\nPAIR ours base 10 0\n").unwrap();
    let o = pharnet(&["bt-fit", "pairs.txt"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("# 0.5 added"));
    let rows: Vec<(&str, f64)> = text.lines().skip(1).map(|l| l.split_once(' ').map(|(n, v)| (n, v.parse().unwrap())).unwrap()).collect();
    assert_eq!(rows[0].0, "ours");
    assert!((rows[0].1 + rows[1].1).abs() < 1e-9);

    std::fs::write(dir.path().join("split.txt"), "PAIR a b 1 1\nPAIR c d 2 2\n").unwrap();
    let o = pharnet(&["bt-fit", "split.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("disconnected"));
}

#[test]
fn encoder_weights_come_from_a_checkpoint_of_the_same_width() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = pharnet::config::TrainConfig::desk();
    config.model.encoder_seed ^= 1;
    let donor = pharnet::train::TrainState::new(config).unwrap();
    let encoder = donor.generator.store.snapshot("E_m.");
    assert!(!encoder.is_empty());
    pharnet::checkpoint::save(&donor, &dir.path().join("donor.phrn")).unwrap();

    let train = ["train", "--synth-count", "4", "--steps", "1", "--batch", "2"];
    let o = pharnet(&[&train[..], &["--out", "taken", "--encoder-weights", "donor.phrn"]].concat(), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let taken = pharnet::checkpoint::load(&dir.path().join("taken/ckpt-000001.phrn")).unwrap();
    assert_eq!(taken.generator.store.snapshot("E_m."), encoder);
    let o = pharnet(&[&train[..], &["--out", "fresh"]].concat(), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fresh = pharnet::checkpoint::load(&dir.path().join("fresh/ckpt-000001.phrn")).unwrap();
    assert_ne!(fresh.generator.store.snapshot("E_m."), encoder);

    let o = pharnet(&[&train[..], &["--scale", "4", "--encoder-weights", "donor.phrn"]].concat(), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("E_m."), "{}", stderr(&o));
    let o = pharnet(&["train", "--resume", "donor.phrn", "--encoder-weights", "donor.phrn"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
