use std::path::Path;
use std::process::{Command, Output};

use isp_align::metrics::psnr;
use isp_align::rawdata::io::read_png;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isp-align"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, data: &Path) -> String {
    let cfg = serde_json::json!({
        "preset": "desk",
        "optimizer": { "batch": 2, "max_steps": 4, "epochs": 2 },
        "liteisp": { "base_width": 16, "n_rcab": 1 },
        "flow": { "radius": 3 },
        "data": { "dir": data },
        "seed": 11
    });
    let p = dir.join("tiny.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn help_and_version_exit_zero() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["synth-data", "train", "eval", "infer", "ablate"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let o = run(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"optimizer": {"lr": -1}}"#).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    std::fs::write(&bad, r#"{"optimiser": {}}"#).unwrap();
    let o = run(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);

    let o = run(&["synth-data", "--flow", "sideways", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = run(&["synth-data", "--n", "2"]);
    assert_eq!(code(&o), 2, "missing --out");
    let o = run(&["ablate", "--suite", "everything"]);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("missing.json");
    let o = run(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nothing");
    let out = dir.path().join("x.png");
    let o = run(&[
        "infer",
        "--checkpoint",
        nowhere.to_str().unwrap(),
        "--raw",
        "none.rawp",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn synth_data_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let o = run(&[
        "synth-data",
        "--n",
        "64",
        "--size",
        "64",
        "--flow",
        "translate",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 0..64 {
        for suffix in ["rawp", "json", "target.png", "gt.png", "flow.bin"] {
            let p = d.join("pairs").join(format!("{i:04}.{suffix}"));
            assert!(p.exists(), "{}", p.display());
        }
    }
    assert!(!d.join("pairs/0064.rawp").exists());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(d.join("synth.json")).unwrap()).unwrap();
    assert_eq!(meta["n"], 64);
    assert_eq!(meta["flow"], "translate");
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&[
        "synth-data",
        "--n",
        "10",
        "--size",
        "32",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = tiny_config(dir.path(), &data);
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--config", &cfg, "--out", run_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "config.json",
        "train_log.jsonl",
        "held_out.jsonl",
        "checkpoint/manifest.json",
        "checkpoint/params.bin",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(run_dir.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let ck = run_dir.join("checkpoint");
    let o = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--protocol",
        "align_gt_with_raw",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = jsonl(&String::from_utf8_lossy(&o.stdout));
    let (last, images) = lines.split_last().unwrap();
    assert_eq!(last["record"], "summary");
    assert_eq!(last["n"].as_u64().unwrap() as usize, images.len());
    for l in images {
        assert_eq!(l["record"], "image");
        assert_eq!(l["protocol"], "align_gt_with_raw");
        assert!(l["psnr"].as_f64().unwrap().is_finite());
        let vf = l["valid_fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&vf));
    }
    let o = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--protocol", "sideways"]);
    assert_eq!(code(&o), 2);

    // `infer` on a held-out raw reproduces the score recorded at training time
    let held = jsonl(&std::fs::read_to_string(run_dir.join("held_out.jsonl")).unwrap());
    let rec = held.iter().find(|l| l["record"] == "image").unwrap();
    let idx = rec["index"].as_u64().unwrap() as usize;
    let raw = data.join("pairs").join(format!("{idx:04}.rawp"));
    let png = dir.path().join("out.png");
    let o = run(&[
        "infer",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--raw",
        raw.to_str().unwrap(),
        "--out",
        png.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = read_png(&png).unwrap();
    let target = read_png(&data.join("pairs").join(format!("{idx:04}.target.png"))).unwrap();
    let p = psnr(&out, &target, None).unwrap();
    let recorded = rec["psnr"].as_f64().unwrap();
    // the PNG is quantized to 8 bits
    assert!((p - recorded).abs() < 0.1, "{p} vs {recorded}");
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&run(&[
            "synth-data",
            "--n",
            "6",
            "--size",
            "32",
            "--out",
            data.to_str().unwrap()
        ])),
        0
    );
    let cfg = tiny_config(dir.path(), &data);
    let mut blobs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "5",
            "--steps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        blobs.push(std::fs::read(out.join("checkpoint/params.bin")).unwrap());
    }
    assert_eq!(blobs[0], blobs[1]);
}
