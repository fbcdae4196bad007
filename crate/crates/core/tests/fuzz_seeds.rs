//! Replays the fuzz corpus seeds, plus truncated and bit-flipped variants,
//! through the same parser entry points the fuzz targets use.

use std::fs;
use std::path::PathBuf;

use gsslam::config::RunConfig;
use gsslam::dataset::{format_trajectory, parse_calib, parse_groundtruth, parse_imu_csv, parse_index, parse_trajectory};
use gsslam::gaussian_map::parse_checkpoint;
use gsslam::niqe::parse_model;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn variants(data: &[u8]) -> Vec<Vec<u8>> {
    let mut v = vec![];
    for cut in [0, 1, data.len() / 3, data.len() / 2, data.len().saturating_sub(1)] {
        v.push(data[..cut.min(data.len())].to_vec());
    }
    let step = (data.len() / 64).max(1);
    for i in (0..data.len()).step_by(step) {
        for bit in [0u8, 3, 7] {
            let mut d = data.to_vec();
            d[i] ^= 1 << bit;
            v.push(d);
        }
    }
    v
}

fn checkpoint(data: &[u8]) {
    let Ok(map) = parse_checkpoint(data) else { return };
    let mut once = Vec::new();
    map.write_checkpoint(&mut once).unwrap();
    let again = parse_checkpoint(&once).unwrap();
    let mut twice = Vec::new();
    again.write_checkpoint(&mut twice).unwrap();
    assert_eq!(once, twice);
}

fn niqe(data: &[u8]) {
    let Ok(model) = parse_model(data) else { return };
    let mut out = Vec::new();
    model.write(&mut out).unwrap();
    assert_eq!(parse_model(&out).unwrap(), model);
}

fn trajectory(text: &str) {
    let _ = parse_groundtruth(text);
    if let Ok(poses) = parse_trajectory(text, "trajectory.txt") {
        let back = parse_trajectory(&format_trajectory(&poses), "trajectory.txt").unwrap();
        assert_eq!(back.len(), poses.len());
    }
}

fn text_target(target: &str, f: impl Fn(&str) -> bool) {
    for (name, data) in seeds(target) {
        assert!(f(std::str::from_utf8(&data).unwrap()), "seed {target}/{name} should parse");
        for v in variants(&data) {
            if let Ok(s) = std::str::from_utf8(&v) {
                f(s);
            }
        }
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in seeds("checkpoint") {
        assert!(parse_checkpoint(&data).is_ok(), "{name}");
        for v in variants(&data) {
            checkpoint(&v);
        }
    }
}

#[test]
fn niqe_model_seeds() {
    for (name, data) in seeds("niqe_model") {
        assert!(parse_model(&data).is_ok(), "{name}");
        niqe(&data);
        for v in variants(&data) {
            niqe(&v);
        }
    }
}

#[test]
fn text_seeds() {
    text_target("tum_index", |s| parse_index(s, "rgb.txt").is_ok());
    text_target("trajectory", |s| {
        trajectory(s);
        parse_trajectory(s, "t.txt").is_ok()
    });
    text_target("imu_csv", |s| parse_imu_csv(s).is_ok());
    text_target("calib", |s| parse_calib(s).is_ok());
    text_target("run_config", |s| RunConfig::parse(s).map(|c| c.validate().is_ok()).unwrap_or(false));
}
