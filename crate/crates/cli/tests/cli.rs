use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pathonet::annotation::{read_annotations, write_annotations, CellAnnotation, CellClass};
use pathonet::density::DensityMap;
use pathonet::model::{build_pathonet, save_checkpoint};

fn pathonet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathonet"))
        .current_dir(dir)
        .args(args)
        .env_remove("PATHONET_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn score_counts_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&pathonet(dir.path(), &["score", "--counts", "28,58,5"]));
    assert!(out.contains("ki67 0.3256 high"), "{out}");
    assert!(out.contains("til 0.0549 low"), "{out}");

    fs::write(dir.path().join("c.txt"), "immunopositive = 28\nimmunonegative = 58\nlymphocyte = 5\n").unwrap();
    let kv = ok(&pathonet(dir.path(), &["score", "--cells", "c.txt"]));
    assert_eq!(kv, out);
    fs::write(dir.path().join("c.json"), r#"{"immunopositive": 28, "immunonegative": 58, "lymphocyte": 5}"#).unwrap();
    assert_eq!(ok(&pathonet(dir.path(), &["score", "--cells", "c.json"])), out);
}

#[test]
fn score_degenerate_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&pathonet(dir.path(), &["score", "--counts", "0,0,0"]));
    assert!(out.contains("ki67 0.0000 low (degenerate)"), "{out}");
}

#[test]
fn synth_and_prepare_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&pathonet(d, &["synth", "--out", &format!("raw_{out}"), "--count", "3", "--seed", "11"]));
    }
    assert_eq!(tree(&d.join("raw_a")), tree(&d.join("raw_b")));
    let other = pathonet(d, &["synth", "--out", "raw_c", "--count", "3", "--seed", "12"]);
    ok(&other);
    assert_ne!(tree(&d.join("raw_a")), tree(&d.join("raw_c")));

    for out in ["ds_a", "ds_b"] {
        ok(&pathonet(d, &["prepare", "--input", "raw_a", "--out", out, "--seed", "5", "--set", "train_fraction=0.67"]));
    }
    let a = tree(&d.join("ds_a"));
    assert_eq!(a, tree(&d.join("ds_b")));
    let split = fs::read_to_string(d.join("ds_a/split.txt")).unwrap();
    assert_eq!(split.lines().filter(|l| l.ends_with(" train")).count(), 2);
    // two training tiles with six variants each, one untouched test tile
    let count = |sub: &str| a.iter().filter(|(p, _)| p.starts_with(sub) && p.ends_with(".png")).count();
    assert_eq!(count("train"), 12);
    assert_eq!(count("test"), 1);
}

#[test]
fn eval_self_match_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pathonet(d, &["synth", "--out", "raw", "--count", "2", "--seed", "4"]));
    let out = ok(&pathonet(d, &["eval", "--gt", "raw", "--pred", "raw", "--kv", "kv.txt"]));
    assert!(out.contains("micro"), "{out}");
    let kv = fs::read_to_string(d.join("kv.txt")).unwrap();
    for class in ["immunopositive", "immunonegative", "lymphocyte", "micro"] {
        assert!(kv.contains(&format!("{class}.f1 = 1\n")), "{kv}");
        assert!(kv.contains(&format!("{class}.fp = 0\n")), "{kv}");
    }
    assert!(kv.contains("image.ki67_rmse = 0\n"), "{kv}");
}

#[test]
fn eval_patients_and_missing_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir_all(d.join("gt")).unwrap();
    fs::create_dir_all(d.join("pred")).unwrap();
    let cells = vec![
        CellAnnotation::new(10, 10, CellClass::Immunopositive),
        CellAnnotation::new(40, 10, CellClass::Immunonegative),
    ];
    for name in ["a", "b"] {
        write_annotations(&d.join(format!("gt/{name}.json")), &cells).unwrap();
    }
    write_annotations(&d.join("pred/a.json"), &cells).unwrap();
    let out = pathonet(d, &["eval", "--gt", "gt", "--pred", "pred"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    write_annotations(&d.join("pred/b.json"), &cells[..1]).unwrap();
    fs::write(d.join("patients.txt"), "a p1\nb p1\n").unwrap();
    let out = ok(&pathonet(d, &["eval", "--gt", "gt", "--pred", "pred", "--patients", "patients.txt", "--kv", "kv.txt"]));
    assert!(out.contains("patient p1"), "{out}");
    let kv = fs::read_to_string(d.join("kv.txt")).unwrap();
    assert!(kv.contains("patients = 1\n"), "{kv}");
    assert!(kv.contains("immunonegative.fn = 1\n"), "{kv}");
}

#[test]
fn detect_from_density_recovers_rendered_cells() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cells = vec![
        CellAnnotation::new(30, 30, CellClass::Immunopositive),
        CellAnnotation::new(70, 40, CellClass::Immunonegative),
        CellAnnotation::new(40, 80, CellClass::Lymphocyte),
    ];
    write_annotations(&d.join("cells.json"), &cells).unwrap();
    ok(&pathonet(d, &["render-labels", "--cells", "cells.json", "--size", "112x104", "--out", "l.dmap"]));
    let map = DensityMap::load(&d.join("l.dmap")).unwrap();
    assert_eq!((map.width(), map.height()), (112, 104));
    assert_eq!(map.get(CellClass::Immunopositive, 30, 30), 2250.0);

    ok(&pathonet(d, &["detect", "--density", "l.dmap", "--out", "found.json"]));
    let found = read_annotations(&d.join("found.json")).unwrap();
    let strip = |v: &[CellAnnotation]| {
        let mut v: Vec<_> = v.iter().map(|c| (c.class, c.x, c.y)).collect();
        v.sort();
        v
    };
    assert_eq!(strip(&found), strip(&cells));
    assert!(found.iter().all(|c| c.score == Some(2250.0)));
}

#[test]
fn model_commands_handle_any_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_checkpoint(&build_pathonet(&[2, 4, 8, 16], 1).unwrap(), &d.join("m.pnet")).unwrap();
    let img = image::RgbImage::from_fn(50, 37, |x, y| image::Rgb([x as u8 * 5, y as u8 * 6, 128]));
    img.save(d.join("odd.png")).unwrap();

    ok(&pathonet(d, &["infer", "--model", "m.pnet", "--image", "odd.png", "--out", "odd.dmap"]));
    let map = DensityMap::load(&d.join("odd.dmap")).unwrap();
    assert_eq!((map.width(), map.height()), (50, 37));
    assert!(map.data().iter().all(|v| v.is_finite()));

    ok(&pathonet(d, &["detect", "--model", "m.pnet", "--image", "odd.png", "--out-dir", "det"]));
    let cells = read_annotations(&d.join("det/odd.json")).unwrap();
    assert!(cells.iter().all(|c| c.x < 50 && c.y < 37));
}

#[test]
fn train_logs_schedule_and_honours_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pathonet(d, &["synth", "--out", "raw", "--count", "2", "--seed", "2"]));
    ok(&pathonet(d, &["prepare", "--input", "raw", "--out", "ds", "--seed", "1", "--tile-size", "128", "--train-fraction", "1", "--no-augment"]));

    let run = |extra: &[(&str, &str)], out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pathonet"));
        cmd.current_dir(d)
            .args(["train", "--data", "ds/train", "--out", out, "--seed", "9", "--widths", "2,4,8,16"])
            .args(["--set", "decay_every=2"]);
        for (k, v) in extra {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    };
    let log = ok(&run(&[("PATHONET_EPOCHS", "3")], "m1.pnet"));
    let lrs: Vec<&str> = log
        .lines()
        .filter(|l| l.starts_with("epoch "))
        .map(|l| l.split_whitespace().nth(3).unwrap())
        .collect();
    assert_eq!(lrs, ["1.000000e-4", "1.000000e-4", "1.000000e-5"], "{log}");

    // identical seeds give identical checkpoints
    ok(&run(&[("PATHONET_EPOCHS", "3")], "m2.pnet"));
    assert_eq!(fs::read(d.join("m1.pnet")).unwrap(), fs::read(d.join("m2.pnet")).unwrap());

    // a dedicated flag beats the environment
    let out = Command::new(env!("CARGO_BIN_EXE_pathonet"))
        .current_dir(d)
        .env("PATHONET_EPOCHS", "3")
        .args(["train", "--data", "ds/train", "--out", "m3.pnet", "--seed", "9", "--widths", "2,4,8,16", "--epochs", "1"])
        .output()
        .unwrap();
    assert_eq!(ok(&out).lines().filter(|l| l.starts_with("epoch ")).count(), 1);
}

#[test]
fn tune_reports_grid_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&pathonet(d, &["synth", "--out", "val", "--count", "2", "--seed", "8"]));
    for i in 0..2 {
        let name = format!("val/tile_{i:04}");
        ok(&pathonet(d, &["render-labels", "--cells", &format!("{name}.json"), "--image", &format!("{name}.png"), "--out", &format!("{name}.dmap")]));
    }
    let out = ok(&pathonet(d, &["tune-thresholds", "--data", "val", "--out", "th.cfg"]));
    assert!(out.contains("f1 1.0000"), "{out}");
    let snippet = fs::read_to_string(d.join("th.cfg")).unwrap();
    let values: Vec<f64> = snippet.trim().strip_prefix("thresholds = ").unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(values.iter().all(|v| v % 5.0 == 0.0), "{snippet}");
    // the snippet is a valid config file
    ok(&pathonet(d, &["--config", "th.cfg", "score", "--counts", "1,1,1"]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = pathonet(d, &["synth", "--out", "raw"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--seed"));

    let out = pathonet(d, &["score", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr(&out).trim().lines().count(), 1, "{}", stderr(&out));

    fs::write(d.join("bad.cfg"), "sigma = 3\n").unwrap();
    let out = pathonet(d, &["--config", "bad.cfg", "score", "--counts", "1,2,3"]);
    assert_eq!(out.status.code(), Some(3));
    let out = pathonet(d, &["--set", "thresholds=1,2", "score", "--counts", "1,2,3"]);
    assert_eq!(out.status.code(), Some(3));

    let out = pathonet(d, &["score", "--cells", "missing.json"]);
    assert_eq!(out.status.code(), Some(4));
    let out = pathonet(d, &["--config", "missing.cfg", "score", "--counts", "1,2,3"]);
    assert_eq!(out.status.code(), Some(4));

    fs::write(d.join("junk.dmap"), b"not a map").unwrap();
    let out = pathonet(d, &["detect", "--density", "junk.dmap", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(pathonet(d, &["--help"]).status.code(), Some(0));
    assert_eq!(pathonet(d, &["--version"]).status.code(), Some(0));
}
