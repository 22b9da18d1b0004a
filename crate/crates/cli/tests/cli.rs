use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use palette_styler::depth_eval::{save_depth_png, DepthMap};
use palette_styler::{save_image, EncoderParams, ImageTensor, StyleModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SIDE: usize = 64;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let encoder = EncoderParams::<f32>::synthetic(5);
        encoder
            .to_store()
            .save(dir.path().join("vgg19.safetensors"))
            .unwrap();
        let model = StyleModel::init(encoder, &mut ChaCha8Rng::seed_from_u64(5));
        model
            .checkpoint(BTreeMap::new())
            .save(dir.path().join("ckpt.safetensors"))
            .unwrap();
        let f = Self { dir };
        f.image("content.png", |y, x| {
            [y as f32 / 63.0, x as f32 / 63.0, 0.5]
        });
        f.image("style_a.png", |y, x| {
            [((x / 8 + y / 8) % 2) as f32, 0.2, 0.7]
        });
        f.image("style_b.png", |y, x| {
            [0.9, ((y * x) % 17) as f32 / 16.0, 0.1]
        });
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn image(&self, name: &str, f: impl Fn(usize, usize) -> [f32; 3]) -> PathBuf {
        let path = self.path(name);
        save_image(&ImageTensor::from_fn(SIDE, SIDE, f).unwrap(), &path).unwrap();
        path
    }

    /// Arguments shared by the inference subcommands.
    fn model_args(&self, out: &str) -> Vec<String> {
        vec![
            "--content".into(),
            self.s("content.png"),
            "--out".into(),
            self.s(out),
            "--weights-vgg".into(),
            self.s("vgg19.safetensors"),
            "--checkpoint".into(),
            self.s("ckpt.safetensors"),
            "--input-size".into(),
            SIDE.to_string(),
            "--num-patches".into(),
            "12".into(),
        ]
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn run(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_palette-styler"))
        .args(args)
        .env_remove("PALETTE_STYLER_CACHE")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn help_lists_defaults() {
    let out = run(&args(&["stylize", "--help"]));
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "--k <K>",
        "[default: 3]",
        "[default: 8]",
        "[default: 100]",
        "[default: centroid]",
        "--seed",
    ] {
        assert!(
            text.contains(needle),
            "stylize help misses {needle}:\n{text}"
        );
    }
    let out = run(&args(&["train", "--help"]));
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "[default: 50000]",
        "[default: 0.0001]",
        "[default: 4]",
        "[default: 30]",
        "[default: 1]",
        "[default: 20]",
        "[default: 256]",
        "[default: 512]",
    ] {
        assert!(text.contains(needle), "train help misses {needle}:\n{text}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&args(&["paint"])).status.code(), Some(1));
    assert_eq!(run(&args(&[])).status.code(), Some(1));
    let out = run(&args(&[
        "eval-depth",
        "--manifest",
        "m.csv",
        "--out",
        "o.csv",
        "--bogus",
    ]));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--bogus"));
}

#[test]
fn repeated_flag_counts_are_checked() {
    let f = Fixture::new();
    let mut a = args(&["interpolate", "--w", "0.5", "--style"]);
    a.push(f.s("style_a.png"));
    a.extend(f.model_args("o.png"));
    let out = run(&a);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));

    let mut a = args(&["spatial", "--style"]);
    a.push(f.s("style_a.png"));
    a.push("--style".into());
    a.push(f.s("style_b.png"));
    a.push("--masks".into());
    a.push(f.s("content.png"));
    a.extend(f.model_args("o.png"));
    assert_eq!(run(&a).status.code(), Some(1));
}

#[test]
fn stylize_is_deterministic_per_seed() {
    let f = Fixture::new();
    let stylize = |out: &str, seed: &str| {
        let mut a = args(&["stylize", "--seed", seed, "--style"]);
        a.push(f.s("style_a.png"));
        a.extend(f.model_args(out));
        let o = run(&a);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        read(&f.path(out))
    };
    let first = stylize("one.png", "7");
    assert_eq!(first, stylize("two.png", "7"));
    let img = palette_styler::load_image(f.path("one.png")).unwrap();
    assert_eq!((img.height(), img.width()), (SIDE, SIDE));
}

#[test]
fn palette_larger_than_sample_is_a_runtime_error() {
    let f = Fixture::new();
    let mut a = args(&["stylize", "--k", "5", "--style"]);
    a.push(f.s("style_a.png"));
    a.extend(f.model_args("o.png"));
    let i = a.iter().position(|v| v == "--num-patches").unwrap();
    a[i + 1] = "3".into();
    let out = run(&a);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cardinality"), "{}", stderr(&out));
    assert!(!f.path("o.png").exists());
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new();
    std::fs::write(
        f.path("run.cfg"),
        "# inference\nk = 5\nnum_patches = 3\nlr = 0.5\n",
    )
    .unwrap();
    let base = || {
        let mut a = args(&["stylize", "--style"]);
        a.push(f.s("style_a.png"));
        a.extend(f.model_args("o.png"));
        // model_args pins --num-patches; drop it so the file value applies
        let i = a.iter().position(|s| s == "--num-patches").unwrap();
        a.drain(i..i + 2);
        a.push("--config".into());
        a.push(f.s("run.cfg"));
        a
    };
    let out = run(&base());
    assert_eq!(
        out.status.code(),
        Some(2),
        "file values apply: {}",
        stderr(&out)
    );
    let mut a = base();
    a.extend(args(&["--num-patches", "10"]));
    let out = run(&a);
    assert_eq!(out.status.code(), Some(0), "flag wins: {}", stderr(&out));

    std::fs::write(f.path("bad.cfg"), "colour = red\n").unwrap();
    let mut a = base();
    let n = a.len();
    a[n - 1] = f.s("bad.cfg");
    let out = run(&a);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn interpolation_endpoint_matches_stylize() {
    let f = Fixture::new();
    let mut a = args(&["stylize", "--seed", "3", "--style"]);
    a.push(f.s("style_a.png"));
    a.extend(f.model_args("single.png"));
    assert_eq!(run(&a).status.code(), Some(0));
    let mut a = args(&["interpolate", "--seed", "3", "--w", "0", "--style"]);
    a.push(f.s("style_a.png"));
    a.push("--style".into());
    a.push(f.s("style_b.png"));
    a.extend(f.model_args("blend.png"));
    let out = run(&a);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(read(&f.path("single.png")), read(&f.path("blend.png")));
}

#[test]
fn spatial_and_multi_run() {
    let f = Fixture::new();
    f.image(
        "left.png",
        |_, x| if x < SIDE / 2 { [1.0; 3] } else { [0.0; 3] },
    );
    f.image(
        "right.png",
        |_, x| if x < SIDE / 2 { [0.0; 3] } else { [1.0; 3] },
    );
    let mut a = args(&["spatial", "--style"]);
    a.push(f.s("style_a.png"));
    a.push("--style".into());
    a.push(f.s("style_b.png"));
    a.extend([
        "--masks".into(),
        f.s("left.png"),
        "--masks".into(),
        f.s("right.png"),
    ]);
    a.extend(f.model_args("spatial.png"));
    let out = run(&a);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(f.path("spatial.png").exists());

    let mut a = args(&["stylize-multi", "--select", "0,2", "--style"]);
    a.push(f.s("style_a.png"));
    a.push("--style".into());
    a.push(f.s("style_b.png"));
    a.extend(f.model_args("multi.png"));
    let out = run(&a);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let mut a = args(&["stylize-multi", "--select", "0,7", "--style"]);
    a.push(f.s("style_a.png"));
    a.push("--style".into());
    a.push(f.s("style_b.png"));
    a.extend(f.model_args("multi.png"));
    let out = run(&a);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("index"), "{}", stderr(&out));
}

#[test]
fn missing_weights_are_a_runtime_error() {
    let f = Fixture::new();
    let mut a = args(&["stylize", "--style"]);
    a.push(f.s("style_a.png"));
    a.extend(f.model_args("o.png"));
    let i = a.iter().position(|s| s == "--weights-vgg").unwrap();
    a[i + 1] = f.s("absent.safetensors");
    let out = run(&a);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.safetensors"));

    // without the flag, the cache directory from the environment is used
    a.drain(i..i + 2);
    let out = Command::new(env!("CARGO_BIN_EXE_palette-styler"))
        .args(&a)
        .env("PALETTE_STYLER_CACHE", f.dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn eval_depth_writes_report() {
    let f = Fixture::new();
    let map = |id: &str, offset: f64| {
        DepthMap::new(
            4,
            4,
            (0..16).map(|i| i as f64 / 32.0 + offset).collect(),
            id,
        )
        .unwrap()
    };
    save_depth_png(&map("c", 0.0), f.path("c.png")).unwrap();
    save_depth_png(&map("s", 0.25), f.path("s.png")).unwrap();
    std::fs::write(
        f.path("manifest.csv"),
        "pair_id,content_depth_path,stylized_depth_path\np0,c.png,s.png\n",
    )
    .unwrap();
    let out = run(&args(&[
        "eval-depth",
        "--manifest",
        &f.s("manifest.csv"),
        "--out",
        &f.s("report/depth.csv"),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = String::from_utf8_lossy(&out.stdout);
    // depth PNGs are 16-bit, so the offset survives only to quantization precision
    let mae: f64 = summary
        .split_whitespace()
        .find_map(|t| t.strip_prefix("mae="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        summary.starts_with("pairs=1 ") && (mae - 0.25).abs() < 1e-4,
        "{summary}"
    );
    let csv = std::fs::read_to_string(f.path("report/depth.csv")).unwrap();
    assert!(
        csv.contains("p0,") && csv.contains("__aggregate__,"),
        "{csv}"
    );

    let out = run(&args(&[
        "eval-depth",
        "--manifest",
        &f.s("nope.csv"),
        "--out",
        &f.s("x.csv"),
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_log_and_checkpoints() {
    let f = Fixture::new();
    for (dir, n) in [("contents", 2), ("styles", 2)] {
        std::fs::create_dir(f.path(dir)).unwrap();
        for i in 0..n {
            f.image(&format!("{dir}/{i}.png"), move |y, x| {
                [(y * (i + 1)) as f32 / 128.0, x as f32 / 64.0, 0.3]
            });
        }
    }
    let mut a = args(&[
        "train",
        "--iters",
        "2",
        "--batch",
        "1",
        "--input-size",
        "32",
        "--crop",
        "32",
        "--checkpoint-every",
        "1",
        "--patch-size",
        "2",
    ]);
    a.extend([
        "--content-dir".into(),
        f.s("contents"),
        "--style-dir".into(),
        f.s("styles"),
    ]);
    a.extend([
        "--out".into(),
        f.s("run"),
        "--weights-vgg".into(),
        f.s("vgg19.safetensors"),
    ]);
    let out = run(&a);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let log = std::fs::read_to_string(f.path("run/loss_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,content_loss,style_loss,total");
    assert_eq!(lines.len(), 3);
    for name in [
        "checkpoint_000001.safetensors",
        "checkpoint_000002.safetensors",
        "final.safetensors",
    ] {
        assert!(f.path("run").join(name).exists(), "{name}");
    }

    let mut a = args(&["stylize", "--style"]);
    a.push(f.s("style_b.png"));
    a.extend(f.model_args("trained.png"));
    let i = a.iter().position(|s| s == "--checkpoint").unwrap();
    a[i + 1] = f.s("run/final.safetensors");
    assert_eq!(run(&a).status.code(), Some(0));

    let out = run(&args(&[
        "train",
        "--content-dir",
        &f.s("contents"),
        "--style-dir",
        &f.s("styles"),
        "--out",
        &f.s("r2"),
        "--weights-vgg",
        &f.s("vgg19.safetensors"),
        "--crop",
        "600",
    ]));
    assert_eq!(out.status.code(), Some(2), "crop larger than input size");
}
