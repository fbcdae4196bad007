//! Synthetic scenes with exact ground truth.
//!
//! Planar loops follow `c(φ) = r·(e^{iφ} + k·e^{-3iφ})` in the world x/z plane
//! (`k = 0` is a circle, `k > 0` rounds a square with corners at `φ = nπ/2`).
//! The phase rate ramps up smoothly from rest so the IMU stream starts with
//! zero velocity, and the camera always looks along the direction of travel.

use std::f64::consts::PI;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Frame, Sequence, TimedPose};
use crate::gaussian_map::{logit, Gaussian3D, GaussianMap};
use crate::geometry::{compose, inverse, Intrinsics, Pose};
use crate::image::Image;
use crate::imu::ImuSample;
use crate::raster::{render, RenderSettings};

/// Length of the start-up ramp of loop trajectories, seconds.
const RAMP: f64 = 0.6;
/// Corner sharpness of the square loop.
const SQUARE_K: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Layout {
    /// Isotropic Gaussians spread uniformly through a 5×3×5 m box.
    RandomBox,
    /// A square sheet of Gaussians 3 m in front of the start pose.
    PlanarGrid,
    /// Flat Gaussians tiling the inside of a 5×3×5 m room.
    TexturedRoom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Circle { radius: f64 },
    /// Constant velocity along the start pose's viewing direction, m/s.
    Straight { speed: f64 },
    SquareLoop { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Additive RGB noise σ.
    pub pixel: f64,
    /// Additive depth noise σ, meters.
    pub depth: f64,
    /// Accelerometer noise σ, m/s².
    pub accel: f64,
    /// Gyroscope noise σ, rad/s.
    pub gyro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub layout: Layout,
    /// Target count; grid layouts round to whole rows.
    pub gaussians: usize,
    pub trajectory: TrajectoryKind,
    pub frames: usize,
    pub fps: f64,
    pub imu_rate: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// 40-frame square loop through the textured room at 160×120.
    pub fn square() -> Self {
        Self {
            layout: Layout::TexturedRoom,
            gaussians: 2000,
            trajectory: TrajectoryKind::SquareLoop { radius: 0.85 },
            frames: 40,
            fps: 10.0,
            imu_rate: 100.0,
            width: 160,
            height: 120,
            focal: 100.0,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }

    pub fn circle() -> Self {
        Self {
            trajectory: TrajectoryKind::Circle { radius: 0.8 },
            ..Self::square()
        }
    }

    pub fn straight() -> Self {
        Self {
            trajectory: TrajectoryKind::Straight { speed: 0.5 },
            ..Self::square()
        }
    }

    pub fn duration(&self) -> f64 {
        (self.frames.max(1) - 1) as f64 / self.fps
    }

    pub fn validate(&self) -> Result<(), String> {
        let noise = [self.noise.pixel, self.noise.depth, self.noise.accel, self.noise.gyro];
        if self.gaussians == 0 || self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err("counts and image size must be positive".into());
        }
        if !(self.fps > 0.0 && self.imu_rate > 0.0 && self.focal > 0.0) {
            return Err("rates and focal length must be positive".into());
        }
        if noise.iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
            return Err("noise levels must be finite and non-negative".into());
        }
        let ok = match self.trajectory {
            TrajectoryKind::Circle { radius } | TrajectoryKind::SquareLoop { radius } => radius > 0.0 && radius < 2.0,
            TrajectoryKind::Straight { speed } => speed.is_finite(),
        };
        if !ok {
            return Err("trajectory parameters out of range".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
        .expect("validated spec gives valid intrinsics")
    }
}

/// Analytic trajectory state in the generator's world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub accel: Vector3<f64>,
    /// Body-frame angular velocity.
    pub gyro: Vector3<f64>,
}

impl TrajectoryKind {
    /// State at time `t` for a trajectory lasting `duration` seconds.
    pub fn sample(&self, t: f64, duration: f64) -> TrajectorySample {
        match *self {
            TrajectoryKind::Straight { speed } => TrajectorySample {
                t,
                pose: Pose::from_translation(Vector3::new(0.0, 0.0, speed * t)),
                velocity: Vector3::new(0.0, 0.0, speed),
                accel: Vector3::zeros(),
                gyro: Vector3::zeros(),
            },
            TrajectoryKind::Circle { radius } => loop_sample(radius, 0.0, t, duration),
            TrajectoryKind::SquareLoop { radius } => loop_sample(radius, SQUARE_K, t, duration),
        }
    }

    /// Length of the path travelled over `duration`, by fine summation.
    pub fn path_length(&self, duration: f64) -> f64 {
        let n = 20_000;
        (0..n)
            .map(|i| {
                let a = self.sample(duration * i as f64 / n as f64, duration).pose.translation;
                let b = self.sample(duration * (i + 1) as f64 / n as f64, duration).pose.translation;
                (b - a).norm()
            })
            .sum()
    }
}

/// Phase, rate and rate derivative of the ramped loop schedule.
fn phase(t: f64, duration: f64) -> (f64, f64, f64) {
    let tau = RAMP.min(duration / 2.0).max(1e-9);
    let omega = 2.0 * PI / (duration - tau / 2.0).max(1e-9);
    let phi0 = -PI / 4.0;
    if t < tau {
        let a = PI * t / tau;
        let phi = phi0 + omega / 2.0 * (t - tau / PI * a.sin());
        (phi, omega * (1.0 - a.cos()) / 2.0, omega * PI / (2.0 * tau) * a.sin())
    } else {
        (phi0 + omega * (t - tau / 2.0), omega, 0.0)
    }
}

fn loop_sample(r: f64, k: f64, t: f64, duration: f64) -> TrajectorySample {
    let (phi, dphi, ddphi) = phase(t, duration);
    // Curve and its φ-derivatives as (x, z).
    let c = (r * (phi.cos() + k * (3.0 * phi).cos()), r * (phi.sin() - k * (3.0 * phi).sin()));
    let c1 = (
        r * (-phi.sin() - 3.0 * k * (3.0 * phi).sin()),
        r * (phi.cos() - 3.0 * k * (3.0 * phi).cos()),
    );
    let c2 = (
        r * (-phi.cos() - 9.0 * k * (3.0 * phi).cos()),
        r * (-phi.sin() + 9.0 * k * (3.0 * phi).sin()),
    );
    let heading = c1.0.atan2(c1.1);
    let dheading_dphi = (c1.1 * c2.0 - c1.0 * c2.1) / (c1.0 * c1.0 + c1.1 * c1.1);
    let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), heading);
    TrajectorySample {
        t,
        pose: Pose::new(rot, Vector3::new(c.0, 0.0, c.1)),
        velocity: Vector3::new(c1.0, 0.0, c1.1) * dphi,
        accel: Vector3::new(c2.0, 0.0, c2.1) * dphi * dphi + Vector3::new(c1.0, 0.0, c1.1) * ddphi,
        gyro: Vector3::new(0.0, dheading_dphi * dphi, 0.0),
    }
}

fn uniform_color(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.gen(), rng.gen(), rng.gen())
}

fn random_box(n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let mu = Vector3::new(rng.gen_range(-2.5..2.5), rng.gen_range(-1.5..1.5), rng.gen_range(-2.5..2.5));
            Gaussian3D::isotropic(mu, rng.gen_range(0.03..0.1), rng.gen_range(0.5..0.95), uniform_color(rng))
        })
        .collect()
}

fn planar_grid(n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian3D> {
    let side = ((n as f64).sqrt().round() as usize).max(1);
    let spacing = 4.0 / side as f64;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let x = -2.0 + (i as f64 + 0.5) * spacing;
            let y = -2.0 + (j as f64 + 0.5) * spacing;
            let check = if (i / 2 + j / 2) % 2 == 0 { 0.8 } else { 0.2 };
            let color = Vector3::new(check, 0.5 + 0.4 * (x * 1.7).sin(), 0.5 + 0.4 * (y * 2.3).cos())
                + Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            let mut g = Gaussian3D::isotropic(Vector3::new(x, y, 3.0), 0.6 * spacing, 0.95, color.map(|c| c.clamp(0.0, 1.0)));
            g.log_scale.z = (0.01f64).ln();
            out.push(g);
        }
    }
    out
}

/// One room face: centre and two in-plane axes with half-extents.
struct Face {
    centre: Vector3<f64>,
    u: (Vector3<f64>, f64),
    v: (Vector3<f64>, f64),
}

fn textured_room(n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian3D> {
    let (hx, hy, hz) = (2.5, 1.5, 2.5);
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    let faces = [
        Face { centre: Vector3::new(0.0, hy, 0.0), u: (x, hx), v: (z, hz) },
        Face { centre: Vector3::new(0.0, -hy, 0.0), u: (x, hx), v: (z, hz) },
        Face { centre: Vector3::new(hx, 0.0, 0.0), u: (z, hz), v: (y, hy) },
        Face { centre: Vector3::new(-hx, 0.0, 0.0), u: (z, hz), v: (y, hy) },
        Face { centre: Vector3::new(0.0, 0.0, hz), u: (x, hx), v: (y, hy) },
        Face { centre: Vector3::new(0.0, 0.0, -hz), u: (x, hx), v: (y, hy) },
    ];
    let area: f64 = faces.iter().map(|f| 4.0 * f.u.1 * f.v.1).sum();
    let spacing = (area / n as f64).sqrt();
    let mut out = Vec::with_capacity(n + n / 10);
    for (fi, f) in faces.iter().enumerate() {
        let nu = ((2.0 * f.u.1 / spacing).round() as usize).max(1);
        let nv = ((2.0 * f.v.1 / spacing).round() as usize).max(1);
        let (su, sv) = (2.0 * f.u.1 / nu as f64, 2.0 * f.v.1 / nv as f64);
        let normal = f.u.0.cross(&f.v.0);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_basis_unchecked(&[f.u.0, f.v.0, normal]));
        let phase = fi as f64 * 1.3;
        for i in 0..nu {
            for j in 0..nv {
                let a = -f.u.1 + (i as f64 + 0.5) * su + rng.gen_range(-0.15..0.15) * su;
                let b = -f.v.1 + (j as f64 + 0.5) * sv + rng.gen_range(-0.15..0.15) * sv;
                let mu = f.centre + f.u.0 * a + f.v.0 * b;
                let pattern = Vector3::new(
                    0.5 + 0.3 * (2.0 * PI * a / 1.7 + phase).sin() * (2.0 * PI * b / 2.3).cos(),
                    0.5 + 0.3 * (2.0 * PI * (a + b) / 1.1 + 2.0 * phase).sin(),
                    0.5 + 0.3 * (2.0 * PI * b / 0.9 - phase).cos(),
                );
                let color = (pattern + Vector3::from_fn(|_, _| rng.gen_range(-0.2..0.2))).map(|c| c.clamp(0.0, 1.0));
                out.push(Gaussian3D {
                    mu,
                    rot,
                    log_scale: Vector3::new((0.85 * su).ln(), (0.85 * sv).ln(), (0.01f64).ln()),
                    opacity_logit: logit(0.95),
                    color,
                });
            }
        }
    }
    out
}

fn per_frame_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * (1 << 32));
    rng
}

/// Builds the ground-truth map, renders every frame and synthesizes the IMU
/// stream. The world frame is re-expressed so frame 0 sits at the identity.
/// Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> (Sequence, GaussianMap) {
    let k = spec.intrinsics();
    let duration = spec.duration();
    let mut rng = per_frame_rng(spec.seed, 0, 0);
    let raw = match spec.layout {
        Layout::RandomBox => random_box(spec.gaussians, &mut rng),
        Layout::PlanarGrid => planar_grid(spec.gaussians, &mut rng),
        Layout::TexturedRoom => textured_room(spec.gaussians, &mut rng),
    };

    let origin_inv = inverse(&spec.trajectory.sample(0.0, duration).pose);
    let world = |p: &Pose| {
        let mut out = compose(&origin_inv, p);
        out.normalize();
        out
    };
    let gaussians = raw
        .into_iter()
        .map(|mut g| {
            g.mu = origin_inv.transform_point(&g.mu);
            g.rot = origin_inv.rotation * g.rot;
            g
        })
        .collect();
    let mut map = GaussianMap::new();
    map.insert(gaussians, 0).expect("generated gaussians are valid");

    let settings = RenderSettings::default();
    let ground_truth: Vec<TimedPose> = (0..spec.frames)
        .map(|i| {
            let t = i as f64 / spec.fps;
            TimedPose {
                t,
                pose: world(&spec.trajectory.sample(t, duration).pose),
            }
        })
        .collect();

    let noise = spec.noise;
    let frames: Vec<Frame> = ground_truth
        .par_iter()
        .enumerate()
        .map(|(i, gt)| {
            let out = render(&map, &gt.pose, &k, &settings);
            let mut rgb = out.color;
            let mut depth = out.depth;
            let mut rng = per_frame_rng(spec.seed, 1, i);
            if noise.pixel > 0.0 {
                let d = Normal::new(0.0, noise.pixel).expect("finite σ");
                rgb.data.iter_mut().for_each(|c| *c = (*c + d.sample(&mut rng)).clamp(0.0, 1.0));
            }
            if noise.depth > 0.0 {
                let d = Normal::new(0.0, noise.depth).expect("finite σ");
                depth.data.iter_mut().filter(|z| **z > 0.0).for_each(|z| *z = (*z + d.sample(&mut rng)).max(0.0));
            }
            Frame {
                id: i,
                t: gt.t,
                rgb,
                depth: Some(depth),
                intrinsics: k,
            }
        })
        .collect();

    let n_imu = (duration * spec.imu_rate).round() as usize + 1;
    let mut imu_rng = per_frame_rng(spec.seed, 2, 0);
    let accel_noise = Normal::new(0.0, noise.accel).expect("finite σ");
    let gyro_noise = Normal::new(0.0, noise.gyro).expect("finite σ");
    let imu = (0..n_imu)
        .map(|j| {
            let t = j as f64 / spec.imu_rate;
            let s = spec.trajectory.sample(t, duration);
            let mut accel = s.pose.rotation.inverse() * s.accel;
            let mut gyro = s.gyro;
            if noise.accel > 0.0 {
                accel += Vector3::from_fn(|_, _| accel_noise.sample(&mut imu_rng));
            }
            if noise.gyro > 0.0 {
                gyro += Vector3::from_fn(|_, _| gyro_noise.sample(&mut imu_rng));
            }
            ImuSample { t, accel, gyro }
        })
        .collect();

    (
        Sequence {
            frames,
            imu,
            ground_truth: Some(ground_truth),
            extrinsic: Pose::identity(),
        },
        map,
    )
}

/// Pixel noise of the pristine corpus; renders without sensor grain are too
/// band-limited for NIQE to separate mild blur from the original.
pub const PRISTINE_PIXEL_NOISE: f64 = 0.01;

/// Frames of the square, circle and straight presets with light sensor
/// noise: the corpus the bundled NIQE model is fitted on.
pub fn pristine_corpus() -> Vec<Image> {
    [SyntheticSceneSpec::square(), SyntheticSceneSpec::circle(), SyntheticSceneSpec::straight()]
        .into_iter()
        .flat_map(|mut spec| {
            spec.noise.pixel = PRISTINE_PIXEL_NOISE;
            generate_synthetic(&spec).0.frames.into_iter().map(|f| f.rgb)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{preintegrate, ImuState};

    fn small(trajectory: TrajectoryKind, imu_rate: f64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            gaussians: 300,
            frames: 40,
            width: 40,
            height: 30,
            focal: 25.0,
            imu_rate,
            trajectory,
            ..SyntheticSceneSpec::square()
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for kind in [TrajectoryKind::SquareLoop { radius: 0.85 }, TrajectoryKind::Circle { radius: 0.8 }] {
            for &t in &[0.1, 0.45, 1.3, 2.9, 3.7] {
                let h = 1e-5;
                let s = kind.sample(t, 3.9);
                let p = |t: f64| kind.sample(t, 3.9).pose.translation;
                let v = |t: f64| kind.sample(t, 3.9).velocity;
                let fd_v = (p(t + h) - p(t - h)) / (2.0 * h);
                let fd_a = (v(t + h) - v(t - h)) / (2.0 * h);
                assert!((fd_v - s.velocity).norm() < 1e-7, "{kind:?} t={t}");
                assert!((fd_a - s.accel).norm() < 1e-6, "{kind:?} t={t}");
                let r0 = kind.sample(t - h, 3.9).pose.rotation;
                let r1 = kind.sample(t + h, 3.9).pose.rotation;
                let w = (r0.inverse() * r1).scaled_axis() / (2.0 * h);
                assert!((w - s.gyro).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn loop_starts_at_rest_and_closes() {
        let kind = TrajectoryKind::SquareLoop { radius: 0.85 };
        let s0 = kind.sample(0.0, 3.9);
        assert_eq!(s0.velocity, Vector3::zeros());
        let s1 = kind.sample(3.9, 3.9);
        assert!((s1.pose.translation - s0.pose.translation).norm() < 1e-9);
    }

    #[test]
    fn straight_line_has_zero_acceleration() {
        let (seq, _) = generate_synthetic(&small(TrajectoryKind::Straight { speed: 0.4 }, 100.0));
        assert!(seq.imu.iter().all(|s| s.accel.norm() < 1e-9 && s.gyro.norm() < 1e-9));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = small(TrajectoryKind::Circle { radius: 0.8 }, 100.0);
        spec.frames = 5;
        spec.noise = NoiseSpec {
            pixel: 0.01,
            depth: 0.01,
            accel: 0.1,
            gyro: 0.01,
        };
        let (a, ma) = generate_synthetic(&spec);
        let (b, mb) = generate_synthetic(&spec);
        assert_eq!(ma.checksum(), mb.checksum());
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.imu, b.imu);
    }

    #[test]
    fn frame_zero_is_identity() {
        let (seq, _) = generate_synthetic(&small(TrajectoryKind::SquareLoop { radius: 0.85 }, 100.0));
        let p = seq.ground_truth.unwrap()[0].pose;
        assert!(p.translation.norm() < 1e-12 && p.angle() < 1e-12);
    }

    fn open_loop_error(rate: f64) -> (f64, f64) {
        let spec = small(TrajectoryKind::SquareLoop { radius: 0.85 }, rate);
        let kind = spec.trajectory;
        let d = spec.duration();
        let samples: Vec<ImuSample> = (0..=(d * rate).round() as usize)
            .map(|j| {
                let t = j as f64 / rate;
                let s = kind.sample(t, d);
                ImuSample {
                    t,
                    accel: s.pose.rotation.inverse() * s.accel,
                    gyro: s.gyro,
                }
            })
            .collect();
        let (rel, _) = preintegrate(&samples, &ImuState::default(), 0.0, d).unwrap();
        let start = kind.sample(0.0, d).pose;
        let end = compose(&start, &rel);
        let truth = kind.sample(d, d).pose;
        ((end.translation - truth.translation).norm(), kind.path_length(d))
    }

    #[test]
    fn square_loop_imu_recovers_endpoint() {
        let (e100, len) = open_loop_error(100.0);
        assert!(e100 < 0.01 * len, "{e100} vs {len}");
        let (e200, _) = open_loop_error(200.0);
        let ratio = e200 / e100;
        assert!((0.4..0.6).contains(&ratio), "ratio {ratio}");
    }
}
