use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dyngs::frames::Image;
use dyngs::io::{load_checkpoint, load_dataset, read_raw_image};
use dyngs::render::render;
use dyngs::trainer::TrainState;

const SMALL: &str = r#"
[train]
batch = 2
iterations = 3

[train.deform]
width = 32
depth = 3

[train.encoder]
layers = 2
hidden = 32
"#;

fn dyngs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyngs")).args(args).output().expect("spawn dyngs")
}

fn ok(args: &[&str]) -> String {
    let out = dyngs(args);
    assert!(
        out.status.success(),
        "dyngs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("small.toml"), SMALL).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn gradcheck_passes_and_reports_modules() {
    let stdout = ok(&["gradcheck"]);
    for module in ["primitives", "deformation field", "encoder", "renderer", "two-stream loss"] {
        assert!(stdout.lines().any(|l| l.contains(module)), "missing {module} in\n{stdout}");
    }
    assert!(stdout.contains("checks in"));
}

#[test]
fn untrained_render_is_the_canonical_render() {
    let ws = Workspace::new();
    let (data, ckpt, png, raw) = (ws.path("data"), ws.path("run.ckpt"), ws.path("t0.png"), ws.path("t0.raw"));
    let cfg = ws.path("small.toml");
    ok(&["gen", "--out", s(&data), "--frames", "6", "--size", "16"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--stop-at", "0"]);
    ok(&["render", "--checkpoint", s(&ckpt), "--time", "0", "--data", s(&data), "--camera", "1", "--out", s(&png), "--raw", s(&raw)]);
    assert!(png.exists());

    let state: TrainState<f64> = load_checkpoint(&ckpt).unwrap();
    let set = load_dataset(&data).unwrap();
    let direct = render(&state.gaussians, &set.cameras[1], &state.config.render).unwrap();
    let written = read_raw_image(&raw, "render").unwrap();
    assert_eq!(written, Image::from_rendered(&direct));
}

#[test]
fn eval_writes_one_row_per_frame() {
    let ws = Workspace::new();
    let (data, ckpt, metrics) = (ws.path("data"), ws.path("run.ckpt"), ws.path("metrics.csv"));
    let cfg = ws.path("small.toml");
    ok(&["gen", "--out", s(&data)]);
    let frames = load_dataset(&data).unwrap().frames();
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert!(ws.path("run.csv").exists());
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&metrics)]);
    let text = fs::read_to_string(&metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame,timestamp,psnr,ssim"));
    assert_eq!(lines.count(), frames);
    assert_eq!(frames, 20);
}

#[test]
fn resume_continues_a_run() {
    let ws = Workspace::new();
    let (data, a, b, c) = (ws.path("data"), ws.path("a.ckpt"), ws.path("b.ckpt"), ws.path("c.ckpt"));
    let cfg = ws.path("small.toml");
    ok(&["gen", "--out", s(&data), "--frames", "6", "--size", "12"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&a), "--stop-at", "1"]);
    ok(&["train", "--data", s(&data), "--out", s(&b), "--resume", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&c)]);
    let resumed: TrainState<f64> = load_checkpoint(&b).unwrap();
    let straight: TrainState<f64> = load_checkpoint(&c).unwrap();
    assert_eq!(resumed.step, 3);
    let losses = |s: &TrainState<f64>| s.history.iter().map(|r| (r.l_c, r.l_t)).collect::<Vec<_>>();
    assert_eq!(losses(&resumed), losses(&straight));
    for (x, y) in resumed.parameters().iter().zip(straight.parameters()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn gen_is_deterministic_per_seed() {
    let ws = Workspace::new();
    let run = |name: &str, seed: &str| {
        let out = ws.path(name);
        ok(&["gen", "--seed", seed, "--out", s(&out), "--frames", "4", "--size", "12"]);
        fs::read(out.join("manifest.json")).unwrap()
    };
    assert_eq!(run("a", "7"), run("b", "7"));
    assert_ne!(run("a", "7"), run("c", "8"));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(dyngs(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dyngs(&["gen", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(dyngs(&["render", "--time", "0", "--out", "x.png"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let ws = Workspace::new();
    let out = dyngs(&["eval", "--checkpoint", s(&ws.path("missing.ckpt")), "--data", s(&ws.path("none")), "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    fs::write(ws.path("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    let out = dyngs(&["gen", "--config", s(&ws.path("bad.toml")), "--out", s(&ws.path("d"))]);
    assert_eq!(out.status.code(), Some(1));
}
