//! End-to-end CLI behavior: artifacts, exit codes, idempotence.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moedepth"))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = walack(dir)
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(&p).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

fn walack(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files
}

#[test]
fn gen_writes_scenes_and_manifest_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["gen", "--count", "4", "--seed", "7", "--height", "24", "--width", "24"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let manifest = std::fs::read_to_string(out_a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("count=4"));
    assert_eq!(manifest.lines().filter(|l| l.starts_with("scene_")).count(), 4);
    for i in 0..4 {
        assert!(out_a.join(format!("scene_{i:05}")).join("gt_depth.mdg").exists());
        assert!(out_a.join(format!("scene_{i:05}")).join("scene.meta").exists());
    }
    assert_eq!(dir_bytes(&out_a), dir_bytes(&out_b), "reruns must be byte-identical");
}

#[test]
fn gen_count_zero_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["gen", "--count", "0"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let output = bin().args(["gen", "--no-such-flag", "1"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["train", "--steps", "1"])
        .arg("--data")
        .arg(tmp.path().join("nonexistent"))
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn config_file_applies_and_bad_key_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.config");
    std::fs::write(&cfg_path, "count=3\nheight=24\nwidth=24\nseed=9\n").unwrap();
    let out = tmp.path().join("data");
    let status = bin()
        .arg("gen")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read_to_string(out.join("manifest.txt"))
            .unwrap()
            .lines()
            .filter(|l| l.starts_with("scene_"))
            .count(),
        3
    );

    std::fs::write(&cfg_path, "unknown_key=1\n").unwrap();
    let output = bin()
        .arg("gen")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(tmp.path().join("data2"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

/// One small pipeline: train, eval, ablate, render, plus the render
/// usage-error path.
#[test]
fn pipeline_train_eval_ablate_render() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(bin()
        .args(["gen", "--count", "4", "--seed", "3", "--height", "24", "--width", "24"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());

    let run = tmp.path().join("run");
    assert!(bin()
        .args([
            "train", "--steps", "30", "--feature-channels", "4", "--experts", "2",
            "--lambda-e", "1e-4", "--seed", "1",
        ])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap()
        .success());
    assert!(run.join("checkpoint.mdc").exists());
    assert!(run.join("gate_argmax.ppm").exists());
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 30);
    assert!(log.lines().all(|l| l.split('\t').count() == 6));
    let echo = std::fs::read_to_string(run.join("run.config")).unwrap();
    assert!(echo.contains("steps=30"));
    assert!(echo.contains("lambda_e=0.0001"));

    let eval_dir = tmp.path().join("eval");
    assert!(bin()
        .args(["eval", "--confidence-mask", "1"])
        .arg("--ckpt")
        .arg(run.join("checkpoint.mdc"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&eval_dir)
        .status()
        .unwrap()
        .success());
    let summary = std::fs::read_to_string(eval_dir.join("eval_summary.tsv")).unwrap();
    // One line per test scene plus the dataset-mean line.
    assert_eq!(summary.lines().count(), 2 + 1);
    assert!(summary.lines().last().unwrap().starts_with("mean\t"));
    assert!(summary.lines().all(|l| l.split('\t').count() == 17));
    assert!(eval_dir.join("eval_scene_00001.txt").exists());
    assert!(eval_dir.join("eval_scene_00003.txt").exists());

    let abl = tmp.path().join("ablate");
    assert!(bin()
        .args([
            "ablate", "--steps", "10", "--feature-channels", "4", "--experts", "2",
            "--lambdas", "0.01,0", "--seed", "1",
        ])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&abl)
        .status()
        .unwrap()
        .success());
    let table = std::fs::read_to_string(abl.join("ablation.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3, "header plus one row per lambda");
    assert!(abl.join("gate_argmax_lambda_0.01.ppm").exists());
    assert!(abl.join("gate_argmax_lambda_0.ppm").exists());

    let render = tmp.path().join("render");
    assert!(bin()
        .args(["render", "--scenes", "0,2"])
        .arg("--ckpt")
        .arg(run.join("checkpoint.mdc"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&render)
        .status()
        .unwrap()
        .success());
    for id in [0, 2] {
        assert!(render.join(format!("depth_{id:05}.ppm")).exists());
        assert!(render.join(format!("gate_argmax_{id:05}.ppm")).exists());
        assert!(render.join(format!("gate_blend_{id:05}.ppm")).exists());
        assert!(render.join(format!("cloud_{id:05}.ply")).exists());
    }

    // Unknown scene id is a usage error.
    let output = bin()
        .args(["render", "--scenes", "99"])
        .arg("--ckpt")
        .arg(run.join("checkpoint.mdc"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("render2"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown scene id"));

    // Re-render is byte-identical.
    let render_b = tmp.path().join("render_b");
    assert!(bin()
        .args(["render", "--scenes", "0,2"])
        .arg("--ckpt")
        .arg(run.join("checkpoint.mdc"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&render_b)
        .status()
        .unwrap()
        .success());
    assert_eq!(dir_bytes(&render), dir_bytes(&render_b));
}
