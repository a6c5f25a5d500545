use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mohs_core::pipeline::analysis_rgb;
use mohs_core::slide_io::{load_manifest, read_rgb, SlideRecord};
use serde_json::Value;
use tempfile::TempDir;

fn mohs(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mohs"));
    cmd.args(args).env_remove("MOHS_SEED");
    if let Some(s) = env_seed {
        cmd.env("MOHS_SEED", s);
    }
    cmd.output().expect("spawn mohs")
}

fn ok(args: &[&str]) -> String {
    let out = mohs(args, None);
    assert!(out.status.success(), "mohs {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small crops: 1024x512 stored, 512x256 at analysis resolution.
fn small_synth(dir: &Path, n: usize, seed: &str) -> PathBuf {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--n",
        &n.to_string(),
        "--tumor-share",
        "0.5",
        "--width",
        "1024",
        "--height",
        "512",
        "--seed",
        seed,
    ]);
    dir.join("manifest.jsonl")
}

/// Relative path to contents, recursively.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn tumor_record(manifest: &Path) -> SlideRecord {
    load_manifest(manifest)
        .unwrap()
        .into_iter()
        .find(|r| r.class_hint == mohs_core::slide_io::ClassHint::Tumor)
        .expect("a tumor crop")
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = p(tmp.path());
    let cases: [&[&str]; 5] = [
        &["train", "--model", "segformer", "--data", out, "--out", out],
        &["synth", "--n", "3"],
        &["prepare", "--manifest", "m.jsonl", "--out", out, "--fractions", "0.5,0.5,0.5"],
        &["prepare", "--manifest", "m.jsonl", "--out", out, "--fractions", "0.7,0.3"],
        &["frobnicate"],
    ];
    for args in cases {
        assert_eq!(code(&mohs(args, None)), 2, "{args:?}");
    }
    let bad_env = mohs(&["synth", "--out", out, "--n", "1"], Some("seven"));
    assert_eq!(code(&bad_env), 2);
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = mohs(&["prepare", "--manifest", p(&empty), "--out", p(&tmp.path().join("prep"))], None);
    assert_eq!(code(&out), 1);

    let manifest = small_synth(&tmp.path().join("crops"), 2, "1");
    let missing = tmp.path().join("nope.ckpt");
    let out =
        mohs(&["eval", "--manifest", p(&manifest), "--out", p(&tmp.path().join("ev")), "--tumor", p(&missing)], None);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}

#[test]
fn synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    small_synth(&tmp.path().join("a"), 3, "5");
    small_synth(&tmp.path().join("b"), 3, "5");
    small_synth(&tmp.path().join("c"), 3, "6");
    let (a, b, c) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")), tree(&tmp.path().join("c")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        if name != "run-synth.json" {
            assert!(bytes == &b[name], "{name} differs between identical runs");
        }
    }
    assert!(a.len() > 3);
    assert!(a.iter().any(|(name, bytes)| name.ends_with(".png") && c.get(name) != Some(bytes)));
}

#[test]
fn oracle_scores_perfect_and_anti_oracle_inverts() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_synth(&tmp.path().join("crops"), 4, "2");
    let ev = tmp.path().join("oracle");
    ok(&["eval", "--manifest", p(&manifest), "--out", p(&ev), "--oracle"]);
    let r = json(&ev.join("report.json"));
    for ptr in [
        "/tumor_seg/dice",
        "/tumor_seg/pixel_auc",
        "/artifact_seg/dice",
        "/artifact_seg/pixel_auc",
        "/patch_cls/auc",
        "/slide_cls/auc",
    ] {
        assert_eq!(r.pointer(ptr).and_then(Value::as_f64), Some(1.0), "{ptr}");
    }
    assert!(ev.join("roc-tumor-pixel.csv").exists());

    let anti = tmp.path().join("anti");
    ok(&["eval", "--manifest", p(&manifest), "--out", p(&anti), "--anti-oracle"]);
    let r = json(&anti.join("report.json"));
    for ptr in ["/tumor_seg/dice", "/tumor_seg/pixel_auc", "/artifact_seg/pixel_auc", "/patch_cls/auc"] {
        assert_eq!(r.pointer(ptr).and_then(Value::as_f64), Some(0.0), "{ptr}");
    }
}

#[test]
fn eval_respects_split_selection() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_synth(&tmp.path().join("crops"), 10, "4");
    let prep = tmp.path().join("prep");
    let stdout = ok(&["prepare", "--manifest", p(&manifest), "--out", p(&prep), "--fractions", "0.6,0.2,0.2"]);
    assert!(stdout.contains("split train=6 val=2 test=2"), "{stdout}");
    let ev = tmp.path().join("ev");
    ok(&[
        "eval",
        "--manifest",
        p(&manifest),
        "--splits",
        p(&prep.join("splits.json")),
        "--split",
        "val",
        "--out",
        p(&ev),
        "--oracle",
    ]);
    let r = json(&ev.join("report.json"));
    assert_eq!(r.pointer("/tumor_seg/images").and_then(Value::as_u64), Some(2));
}

#[test]
fn infer_white_slide_has_no_tissue() {
    let tmp = TempDir::new().unwrap();
    let slide = tmp.path().join("white.png");
    image::RgbImage::from_pixel(512, 512, image::Rgb([255, 255, 255])).save(&slide).unwrap();
    let masks = tmp.path().join("white-mask.png");
    image::RgbImage::new(512, 512).save(&masks).unwrap();
    let out = tmp.path().join("inf");
    ok(&["infer", "--slide", p(&slide), "--out", p(&out), "--oracle-masks", p(&masks)]);
    let s = json(&out.join("summary.json"));
    assert_eq!(s["verdict"], "no-tissue");
    assert_eq!(s["tissue_patch_count"], 0);
    assert_eq!(s["score"], Value::Null);
}

#[test]
fn infer_overlay_is_deterministic_and_transparent_at_alpha_zero() {
    let tmp = TempDir::new().unwrap();
    let rec = tumor_record(&small_synth(&tmp.path().join("crops"), 2, "8"));
    let masks = rec.mask_ref.clone().unwrap();
    let run = |name: &str, alpha: &str| {
        let out = tmp.path().join(name);
        ok(&["infer", "--slide", p(&rec.image_ref), "--out", p(&out), "--oracle-masks", p(&masks), "--alpha", alpha]);
        out
    };
    let (a, b, clear) = (run("a", "0.4"), run("b", "0.4"), run("clear", "0"));
    let overlay = std::fs::read(a.join("overlay.png")).unwrap();
    assert_eq!(overlay, std::fs::read(b.join("overlay.png")).unwrap());
    let base = analysis_rgb(&read_rgb(&rec.image_ref).unwrap()).unwrap();
    assert!(read_rgb(&clear.join("overlay.png")).unwrap() == base);
    assert!(read_rgb(&a.join("overlay.png")).unwrap() != base);
    assert_eq!(json(&a.join("summary.json"))["verdict"], "tumor");
}

#[test]
fn seed_precedence_flag_config_env_default() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# shared settings\nseed = 5\nn = 1\nwidth = 512\nheight = 512\n").unwrap();
    let seed_of = |name: &str, extra: &[&str], env: Option<&str>| {
        let out = tmp.path().join(name);
        let mut args = vec!["synth", "--out", p(&out)];
        args.extend_from_slice(extra);
        let o = mohs(&args, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let m = json(&out.join("run-synth.json"));
        (m["seed"].as_u64().unwrap(), m["seed_source"].as_str().unwrap().to_string())
    };
    let with_cfg = ["--config", p(&cfg)];
    assert_eq!(seed_of("flag", &[&with_cfg[..], &["--seed", "3"]].concat(), Some("9")), (3, "flag".into()));
    assert_eq!(seed_of("cfg", &with_cfg, Some("9")), (5, "flag".into()));
    let plain = ["--n", "1", "--width", "512", "--height", "512"];
    assert_eq!(seed_of("env", &plain, Some("9")), (9, "env".into()));
    assert_eq!(seed_of("default", &plain, None), (0, "default".into()));
}

#[test]
fn config_rejects_unknown_keys_and_accepts_switch_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 3\n").unwrap();
    let o = mohs(&["synth", "--config", p(&cfg), "--out", p(tmp.path()), "--n", "1"], None);
    assert_eq!(code(&o), 2);

    let cfg = tmp.path().join("switch.cfg");
    std::fs::write(&cfg, "deterministic = true\nthreads = 4\n").unwrap();
    let out = tmp.path().join("sw");
    let o = mohs(
        &[
            "synth",
            "--config",
            p(&cfg),
            "--deterministic",
            "--out",
            p(&out),
            "--n",
            "1",
            "--width",
            "512",
            "--height",
            "512",
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&out.join("run-synth.json"));
    assert_eq!(m["deterministic"], true);
    assert_eq!(m["threads"], 1);
}

#[test]
fn training_resumes_with_continued_epochs() {
    let tmp = TempDir::new().unwrap();
    let manifest = small_synth(&tmp.path().join("crops"), 6, "3");
    let prep = tmp.path().join("prep");
    ok(&["prepare", "--manifest", p(&manifest), "--out", p(&prep), "--fractions", "0.5,0.5,0", "--seed", "3"]);
    let model = tmp.path().join("model");
    let train = |epochs: &str, resume: Option<&Path>| {
        let mut args = vec![
            "train",
            "--model",
            "tumor-seg",
            "--data",
            p(&prep),
            "--out",
            p(&model),
            "--epochs",
            epochs,
            "--batch-size",
            "4",
            "--seed",
            "3",
        ];
        if let Some(r) = resume {
            args.extend(["--resume", p(r)]);
        }
        ok(&args)
    };
    train("1", None);
    let last = tmp.path().join("epoch1.ckpt");
    std::fs::copy(model.join("last.ckpt"), &last).unwrap();
    train("2", Some(&last));
    let history = std::fs::read_to_string(model.join("history.csv")).unwrap();
    let epochs: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);
    assert!(model.join("best.ckpt").exists());
    let m = json(&model.join("run-train.json"));
    assert_eq!(m["details"]["start_epoch"], 1);

    let wrong = mohs(
        &[
            "train",
            "--model",
            "classifier",
            "--data",
            p(&prep),
            "--out",
            p(&tmp.path().join("x")),
            "--resume",
            p(&last),
        ],
        None,
    );
    assert_eq!(code(&wrong), 1);
}
