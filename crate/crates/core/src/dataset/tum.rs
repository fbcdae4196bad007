//! TUM RGB-D style directories plus this crate's IMU CSV and calibration files.
//!
//! Layout: `rgb.txt` and optional `depth.txt` (`timestamp filename`),
//! optional `groundtruth.txt` (`t tx ty tz qx qy qz qw`, camera-to-world),
//! optional `imu.txt` (CSV `t,ax,ay,az,gx,gy,gz`) and optional `calib.txt`
//! (`fx fy cx cy width height`, optionally followed by a second line
//! `tx ty tz qx qy qz qw` giving the IMU-to-camera transform).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{DatasetError, Frame, Sequence, TimedPose};
use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;
use crate::imu::ImuSample;

/// Maximum rgb/depth timestamp difference for an association, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;
/// Depth PNG units per meter.
pub const DEPTH_PNG_SCALE: f64 = 5000.0;
pub const IMU_HEADER: &str = "t,ax,ay,az,gx,gy,gz";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoadOptions {
    /// When set, this world-frame gravity vector is removed from every
    /// accelerometer sample (assumes the sensor stays level); e.g.
    /// `(0, 0, -9.81)`.
    pub gravity: Option<Vector3<f64>>,
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn bad(file: &str, line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::UnparsableLine {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

/// Non-comment, non-blank lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(file: &str, line: usize, tok: &str) -> Result<f64, DatasetError> {
    let v: f64 = tok.parse().map_err(|_| bad(file, line, format!("not a number: {tok:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(file, line, format!("non-finite value {tok:?}")))
    }
}

/// Parses `timestamp filename` lines.
pub fn parse_index(text: &str, file: &str) -> Result<Vec<(f64, String)>, DatasetError> {
    content_lines(text)
        .map(|(n, l)| {
            let mut it = l.split_whitespace();
            let t = parse_f64(file, n, it.next().unwrap_or(""))?;
            let name = it.next().ok_or_else(|| bad(file, n, "missing filename"))?;
            if it.next().is_some() {
                return Err(bad(file, n, "trailing fields"));
            }
            Ok((t, name.to_string()))
        })
        .collect()
}

/// Parses `t tx ty tz qx qy qz qw` lines.
pub fn parse_trajectory(text: &str, file: &str) -> Result<Vec<TimedPose>, DatasetError> {
    content_lines(text)
        .map(|(n, l)| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|tok| parse_f64(file, n, tok))
                .collect::<Result<_, _>>()?;
            if v.len() != 8 {
                return Err(bad(file, n, format!("expected 8 fields, got {}", v.len())));
            }
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            if q.norm() < 1e-12 {
                return Err(bad(file, n, "zero quaternion"));
            }
            Ok(TimedPose {
                t: v[0],
                pose: Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
            })
        })
        .collect()
}

pub fn parse_groundtruth(text: &str) -> Result<Vec<TimedPose>, DatasetError> {
    parse_trajectory(text, "groundtruth.txt")
}

/// Parses the IMU CSV, sorts by time and rejects repeated timestamps.
pub fn parse_imu_csv(text: &str) -> Result<Vec<ImuSample>, DatasetError> {
    const FILE: &str = "imu.txt";
    let mut lines = content_lines(text);
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((n, h)) => {
            let norm: String = h.chars().filter(|c| !c.is_whitespace()).collect();
            if norm != IMU_HEADER {
                return Err(bad(FILE, n, format!("expected header {IMU_HEADER:?}")));
            }
        }
    }
    let mut out = Vec::new();
    for (n, l) in lines {
        let v: Vec<f64> = l
            .split(',')
            .map(|tok| parse_f64(FILE, n, tok.trim()))
            .collect::<Result<_, _>>()?;
        if v.len() != 7 {
            return Err(bad(FILE, n, format!("expected 7 fields, got {}", v.len())));
        }
        out.push(ImuSample {
            t: v[0],
            accel: Vector3::new(v[1], v[2], v[3]),
            gyro: Vector3::new(v[4], v[5], v[6]),
        });
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    if let Some(i) = out.windows(2).position(|w| w[1].t <= w[0].t) {
        return Err(DatasetError::NonMonotoneTimestamps { index: i + 1 });
    }
    Ok(out)
}

pub fn load_imu(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    parse_imu_csv(&read(path)?)
}

/// Parses `fx fy cx cy width height` and an optional extrinsic line.
pub fn parse_calib(text: &str) -> Result<(Intrinsics, Option<Pose>), DatasetError> {
    const FILE: &str = "calib.txt";
    let mut lines = content_lines(text);
    let (n, l) = lines.next().ok_or_else(|| bad(FILE, 1, "empty calibration"))?;
    let v: Vec<&str> = l.split_whitespace().collect();
    if v.len() != 6 {
        return Err(bad(FILE, n, format!("expected 6 fields, got {}", v.len())));
    }
    let f: Vec<f64> = v[..4].iter().map(|t| parse_f64(FILE, n, t)).collect::<Result<_, _>>()?;
    let dim = |t: &str| -> Result<usize, DatasetError> {
        t.parse::<usize>().map_err(|_| bad(FILE, n, format!("bad image size {t:?}")))
    };
    let k = Intrinsics::new(f[0], f[1], f[2], f[3], dim(v[4])?, dim(v[5])?).map_err(|e| bad(FILE, n, e.to_string()))?;
    let ext = match lines.next() {
        None => None,
        Some((n2, l2)) => {
            let line = format!("0 {l2}");
            let tp = parse_trajectory(&line, FILE).map_err(|e| match e {
                DatasetError::UnparsableLine { reason, .. } => bad(FILE, n2, reason),
                other => other,
            })?;
            Some(tp[0].pose)
        }
    };
    if let Some((n3, _)) = lines.next() {
        return Err(bad(FILE, n3, "unexpected extra line"));
    }
    Ok((k, ext))
}

/// Pairs each rgb entry with the nearest depth entry within `window` seconds.
/// Rgb entries without a partner are dropped.
pub fn associate(rgb: &[(f64, String)], depth: &[(f64, String)], window: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..depth.len()).collect();
    order.sort_by(|&a, &b| depth[a].0.total_cmp(&depth[b].0));
    let times: Vec<f64> = order.iter().map(|&i| depth[i].0).collect();
    let mut out = Vec::new();
    for (ri, (t, _)) in rgb.iter().enumerate() {
        let p = times.partition_point(|x| *x < *t);
        let best = [p.checked_sub(1), Some(p)]
            .into_iter()
            .flatten()
            .filter(|&j| j < times.len())
            .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()));
        if let Some(j) = best {
            if (times[j] - t).abs() <= window {
                out.push((ri, order[j]));
            }
        }
    }
    out
}

/// Pose at `t` by linear/slerp interpolation; endpoints are held for up to
/// [`ASSOCIATION_WINDOW`] outside the covered span.
pub fn interpolate_pose(traj: &[TimedPose], t: f64) -> Option<Pose> {
    let first = traj.first()?;
    let last = traj.last()?;
    if t <= first.t {
        return (first.t - t <= ASSOCIATION_WINDOW).then_some(first.pose);
    }
    if t >= last.t {
        return (t - last.t <= ASSOCIATION_WINDOW).then_some(last.pose);
    }
    let i = traj.partition_point(|p| p.t <= t);
    let (a, b) = (&traj[i - 1], &traj[i]);
    let s = (t - a.t) / (b.t - a.t);
    Some(Pose::new(
        a.pose.rotation.slerp(&b.pose.rotation, s),
        a.pose.translation.lerp(&b.pose.translation, s),
    ))
}

pub fn load_tum_sequence(dir: &Path, opts: &LoadOptions) -> Result<Sequence, DatasetError> {
    let rgb_index = dir.join("rgb.txt");
    if !rgb_index.is_file() {
        return Err(DatasetError::MissingIndexFile(rgb_index));
    }
    let rgb = parse_index(&read(&rgb_index)?, "rgb.txt")?;
    let depth_path = dir.join("depth.txt");
    let depth = if depth_path.is_file() {
        Some(parse_index(&read(&depth_path)?, "depth.txt")?)
    } else {
        None
    };
    let pairs: Vec<(usize, Option<usize>)> = match &depth {
        Some(d) => {
            let p = associate(&rgb, d, ASSOCIATION_WINDOW);
            if p.is_empty() && !rgb.is_empty() {
                return Err(DatasetError::NoAssociations);
            }
            p.into_iter().map(|(r, d)| (r, Some(d))).collect()
        }
        None => (0..rgb.len()).map(|r| (r, None)).collect(),
    };
    if pairs.is_empty() {
        return Err(DatasetError::Empty);
    }

    let calib_path = dir.join("calib.txt");
    let (calib, extrinsic) = if calib_path.is_file() {
        let (k, e) = parse_calib(&read(&calib_path)?)?;
        (Some(k), e)
    } else {
        (None, None)
    };

    let mut frames = Vec::with_capacity(pairs.len());
    for (id, (ri, di)) in pairs.into_iter().enumerate() {
        let (t, name) = &rgb[ri];
        let img = Image::load_rgb(&dir.join(name))?;
        let k = match calib {
            Some(k) => k,
            // TUM freiburg defaults scaled to the image size.
            None => {
                let s = img.width as f64 / 640.0;
                Intrinsics::new(525.0 * s, 525.0 * s, img.width as f64 / 2.0, img.height as f64 / 2.0, img.width, img.height)
                    .map_err(|e| bad("calib.txt", 0, e.to_string()))?
            }
        };
        if img.width != k.width || img.height != k.height {
            return Err(bad(
                "rgb.txt",
                ri + 1,
                format!("image {}x{} does not match calibration {}x{}", img.width, img.height, k.width, k.height),
            ));
        }
        let d = match (di, &depth) {
            (Some(j), Some(list)) => Some(Image::load_depth16(&dir.join(&list[j].1), DEPTH_PNG_SCALE)?),
            _ => None,
        };
        frames.push(Frame {
            id,
            t: *t,
            rgb: img,
            depth: d,
            intrinsics: k,
        });
    }

    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = if gt_path.is_file() {
        let mut gt = parse_groundtruth(&read(&gt_path)?)?;
        gt.sort_by(|a, b| a.t.total_cmp(&b.t));
        Some(
            frames
                .iter()
                .filter_map(|f| interpolate_pose(&gt, f.t).map(|pose| TimedPose { t: f.t, pose }))
                .collect(),
        )
    } else {
        None
    };

    let imu_path = dir.join("imu.txt");
    let mut imu = if imu_path.is_file() { load_imu(&imu_path)? } else { Vec::new() };
    if let Some(g) = opts.gravity {
        for s in &mut imu {
            s.accel += g;
        }
    }

    Ok(Sequence {
        frames,
        imu,
        ground_truth,
        extrinsic: extrinsic.unwrap_or_else(Pose::identity),
    })
}

fn pose_fields(out: &mut String, p: &TimedPose) {
    let q = p.pose.rotation.quaternion();
    let t = p.pose.translation;
    let _ = writeln!(
        out,
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        p.t, t.x, t.y, t.z, q.i, q.j, q.k, q.w
    );
}

/// TUM trajectory text, nine decimals.
pub fn format_trajectory(poses: &[TimedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        pose_fields(&mut s, p);
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_trajectory(path: &Path, poses: &[TimedPose]) -> Result<(), DatasetError> {
    write_text(path, &format_trajectory(poses))
}

fn mkdir(path: &PathBuf) -> Result<(), DatasetError> {
    fs::create_dir_all(path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })
}

/// Writes a sequence in the directory layout read by [`load_tum_sequence`].
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<(), DatasetError> {
    let first = seq.frames.first().ok_or(DatasetError::Empty)?;
    mkdir(&dir.join("rgb"))?;
    let mut rgb_txt = String::from("# timestamp filename\n");
    let mut depth_txt = String::from("# timestamp filename\n");
    for f in &seq.frames {
        let name = format!("rgb/{:.6}.png", f.t);
        f.rgb.save_rgb8(&dir.join(&name))?;
        let _ = writeln!(rgb_txt, "{:.6} {name}", f.t);
        if let Some(d) = &f.depth {
            mkdir(&dir.join("depth"))?;
            let dname = format!("depth/{:.6}.png", f.t);
            d.save_depth16(&dir.join(&dname), DEPTH_PNG_SCALE)?;
            let _ = writeln!(depth_txt, "{:.6} {dname}", f.t);
        }
    }
    write_text(&dir.join("rgb.txt"), &rgb_txt)?;
    if seq.has_depth() {
        write_text(&dir.join("depth.txt"), &depth_txt)?;
    }
    if let Some(gt) = &seq.ground_truth {
        write_trajectory(&dir.join("groundtruth.txt"), gt)?;
    }
    if !seq.imu.is_empty() {
        let mut s = format!("{IMU_HEADER}\n");
        for m in &seq.imu {
            let _ = writeln!(
                s,
                "{:.9},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}",
                m.t, m.accel.x, m.accel.y, m.accel.z, m.gyro.x, m.gyro.y, m.gyro.z
            );
        }
        write_text(&dir.join("imu.txt"), &s)?;
    }
    let k = first.intrinsics;
    let mut calib = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    let e = TimedPose {
        t: 0.0,
        pose: seq.extrinsic,
    };
    let mut line = String::new();
    pose_fields(&mut line, &e);
    calib.push_str(line.split_once(' ').map_or("", |(_, rest)| rest));
    write_text(&dir.join("calib.txt"), &calib)
}
