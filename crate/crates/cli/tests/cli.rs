use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lcg_core::checkpoint::load_checkpoint;
use lcg_core::config::RunConfig;
use lcg_core::image::{read_pnm, write_mask, write_pnm, Image, Mask};
use lcg_core::params::flatten;
use lcg_core::pipeline::init_model;

const TINY: &str = "\
[data]
scenes = 6
samples = 12
eval_scenes = 3
eval_samples = 4

[scene]
height = 16
width = 16

[model]
width = 8
key_width = 4
value_width = 4
time_embed_width = 8
mid_blocks = 1
embed_dim = 6
embed_tokens = 2

[train]
steps = 2
batch_size = 4
checkpoint_every = 1

[sample]
steps = 4
";

fn lcg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcg"))
        .current_dir(dir)
        .env("LCG_LOG", "error")
        .args(args)
        .output()
        .expect("spawn lcg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn tiny_with(extra: &str) -> String {
    let mut cfg = RunConfig::parse(TINY).unwrap();
    let patch = RunConfig::parse(extra).unwrap();
    if extra.contains("[train]") {
        cfg.train = patch.train;
    }
    cfg.to_text()
}

#[test]
fn datagen_is_byte_identical_across_runs() {
    let dir = setup();
    let p = dir.path();
    let a = lcg(p, &["datagen", "--config", "tiny.cfg", "--out", "a"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = lcg(p, &["datagen", "--config", "tiny.cfg", "--out", "b", "--threads", "1"]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    for name in ["train.lcgs", "eval.lcgs"] {
        assert_eq!(fs::read(p.join("a").join(name)).unwrap(), fs::read(p.join("b").join(name)).unwrap());
    }
}

#[test]
fn inverted_brush_ratio_exits_2_naming_both_keys() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "[brush]\nmin_ratio = 0.6\nmax_ratio = 0.1\n").unwrap();
    let out = lcg(dir.path(), &["datagen", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("brush.min_ratio") && err.contains("brush.max_ratio"), "{err}");
}

#[test]
fn unknown_key_and_bad_flags_exit_2() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(code(&lcg(dir.path(), &["datagen", "--config", "bad.cfg"])), 2);
    assert_eq!(code(&lcg(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&lcg(dir.path(), &["check", "gla", "--threads", "0"])), 2);
}

#[test]
fn missing_files_exit_1() {
    let dir = setup();
    let out = lcg(dir.path(), &["train", "--config", "tiny.cfg"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert_eq!(code(&lcg(dir.path(), &["datagen", "--config", "nope.cfg"])), 1);
}

#[test]
fn maskgen_writes_previews() {
    let dir = setup();
    let out = lcg(dir.path(), &["maskgen", "--config", "tiny.cfg", "--count", "5", "--out", "masks"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let listing = fs::read_to_string(dir.path().join("masks/masks.txt")).unwrap();
    assert_eq!(listing.lines().filter(|l| l.starts_with("mask-")).count(), 5);
    assert!(dir.path().join("masks/mask-0004.pgm").exists());
}

#[test]
fn check_suites_and_unknown_suite() {
    let dir = setup();
    let ok = lcg(dir.path(), &["check", "codec"]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS codec/roundtrip"));
    assert_eq!(code(&lcg(dir.path(), &["check", "nonsense"])), 2);
}

/// datagen plus a two-step training run in `dir`.
fn trained(dir: &Path) {
    let out = lcg(dir, &["datagen", "--config", "tiny.cfg"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = lcg(dir, &["train", "--config", "tiny.cfg", "--out", "run", "--threads", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn train_zero_steps_resume_and_mismatch() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(code(&lcg(p, &["datagen", "--config", "tiny.cfg"])), 0);

    let out = lcg(p, &["train", "--config", "tiny.cfg", "--out", "zero", "--steps", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ck = load_checkpoint(&p.join("zero/latest.lcgc")).unwrap();
    let cfg = RunConfig::parse(&ck.config).unwrap();
    assert_eq!(
        flatten(&ck.model(&cfg.denoiser_config()).unwrap()),
        flatten(&init_model(&cfg).unwrap())
    );

    let straight = lcg(p, &["train", "--config", "tiny.cfg", "--out", "straight", "--threads", "1"]);
    assert_eq!(code(&straight), 0, "{}", stderr(&straight));
    assert_eq!(code(&lcg(p, &["train", "--config", "tiny.cfg", "--out", "split", "--steps", "1"])), 0);
    assert_eq!(code(&lcg(p, &["train", "--config", "tiny.cfg", "--out", "split"])), 0);
    let straight = load_checkpoint(&p.join("straight/latest.lcgc")).unwrap();
    let split = load_checkpoint(&p.join("split/latest.lcgc")).unwrap();
    assert_eq!(straight.step, 2);
    assert_eq!(straight.tensors, split.tensors);
    assert_eq!(straight.optimizer, split.optimizer);
    assert_eq!(split.step, 2);
    let log = fs::read_to_string(p.join("split/loss.log")).unwrap();
    assert_eq!(log.lines().map(|l| l.split(' ').next().unwrap()).collect::<Vec<_>>(), ["1", "2"]);

    fs::write(p.join("other.cfg"), tiny_with("[train]\nsteps = 3\nbatch_size = 4\nlr = 0.01\n")).unwrap();
    let out = lcg(p, &["train", "--config", "other.cfg", "--out", "split"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn sample_preserves_unmasked_pixels_and_is_seeded() {
    let dir = setup();
    let p = dir.path();
    trained(p);
    let data: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 17) as f64 / 16.0).collect();
    let image = Image::new(16, 16, 3, data).unwrap();
    write_pnm(&p.join("in.ppm"), &image).unwrap();
    write_mask(&p.join("empty.pgm"), &Mask::zeros(16, 16)).unwrap();
    let mut hole = Mask::zeros(16, 16);
    for y in 4..10 {
        for x in 3..12 {
            hole.set(y, x, true);
        }
    }
    write_mask(&p.join("hole.pgm"), &hole).unwrap();
    let sample = |mask: &str, out: &str, seed: &str| {
        let o = lcg(
            p,
            &[
                "sample", "--checkpoint", "run/latest.lcgc", "--image", "in.ppm", "--mask", mask,
                "--category", "background", "--seed", seed, "--out", out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(p.join(out)).unwrap()
    };
    assert_eq!(sample("empty.pgm", "same.ppm", "3"), fs::read(p.join("in.ppm")).unwrap());
    let a = sample("hole.pgm", "a.ppm", "5");
    let b = sample("hole.pgm", "b.ppm", "5");
    assert_eq!(a, b);
    let out = read_pnm(&p.join("a.ppm")).unwrap();
    let quantized = read_pnm(&p.join("in.ppm")).unwrap();
    for i in 0..256 {
        if !hole.bits[i] {
            assert_eq!(out.data[i * 3..i * 3 + 3], quantized.data[i * 3..i * 3 + 3]);
        }
    }

    write_pnm(&p.join("odd.ppm"), &Image::filled(10, 10, 3, 0.5)).unwrap();
    write_mask(&p.join("odd.pgm"), &Mask::zeros(10, 10)).unwrap();
    let o = lcg(
        p,
        &[
            "sample", "--checkpoint", "run/latest.lcgc", "--image", "odd.ppm", "--mask", "odd.pgm",
            "--category", "foreground", "--out", "o.ppm",
        ],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = lcg(
        p,
        &[
            "sample", "--checkpoint", "run/latest.lcgc", "--image", "in.ppm", "--mask", "hole.pgm",
            "--category", "foreground", "--scale", "0.5", "--out", "o.ppm",
        ],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_report_defaults_and_corrupt_checkpoint() {
    let dir = setup();
    let p = dir.path();
    trained(p);
    let out = lcg(p, &["eval", "--checkpoint", "run/latest.lcgc", "--out", "report.txt"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = fs::read_to_string(p.join("report.txt")).unwrap();
    for needle in ["version = ", "scale = 2\n", "samples = 4", "masked_l1 = ", "psnr_db = ", "coverage [0.00, 0.10)", "# [model]"] {
        assert!(report.contains(needle), "missing {needle:?} in\n{report}");
    }

    let mut bytes = fs::read(p.join("run/latest.lcgc")).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 0xff;
    fs::write(p.join("bad.lcgc"), bytes).unwrap();
    let out = lcg(p, &["eval", "--checkpoint", "bad.lcgc"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}
