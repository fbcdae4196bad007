//! Open-loop IMU pre-integration between camera frames.
//!
//! Accelerations are gravity compensated and expressed in the body frame.
//! Samples are held constant (zero-order hold) until the next sample; the
//! interval endpoints are clipped to the requested times. No bias states.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, exp_so3, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum ImuError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("interval [{from}, {to}] is empty or reversed")]
    EmptyInterval { from: f64, to: f64 },
    #[error("imu samples do not cover [{from}, {to}]: {reason}")]
    InsufficientSamples { from: f64, to: f64, reason: String },
    #[error("cannot chain an empty list of transforms")]
    EmptyChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Seconds.
    pub t: f64,
    /// Gravity-compensated specific force, body frame, m/s².
    pub accel: Vector3<f64>,
    /// Angular rate, body frame, rad/s.
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuState {
    /// Velocity in the body frame at `last_t`, m/s.
    pub velocity: Vector3<f64>,
    pub last_t: f64,
}

/// One explicit step: `dp = v dt + a dt²/2`, `dtheta = w dt`, `v' = v + a dt`.
pub fn integrate_step(
    state: &ImuState,
    sample: &ImuSample,
    dt: f64,
) -> Result<(Vector3<f64>, Vector3<f64>, ImuState), ImuError> {
    if !(dt > 0.0) {
        return Err(ImuError::NonPositiveDt(dt));
    }
    let dp = state.velocity * dt + 0.5 * sample.accel * dt * dt;
    let dtheta = sample.gyro * dt;
    let next = ImuState {
        velocity: state.velocity + sample.accel * dt,
        last_t: state.last_t + dt,
    };
    Ok((dp, dtheta, next))
}

/// Median spacing of consecutive samples.
pub fn nominal_period(samples: &[ImuSample]) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    let mut d: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Integrates the samples over `[t_from, t_to]` and returns the pose of the
/// body at `t_to` expressed in the body frame at `t_from`, plus the state at
/// `t_to` (velocity re-expressed in the `t_to` body frame).
pub fn preintegrate(
    samples: &[ImuSample],
    state: &ImuState,
    t_from: f64,
    t_to: f64,
) -> Result<(Pose, ImuState), ImuError> {
    if !(t_to > t_from) {
        return Err(ImuError::EmptyInterval { from: t_from, to: t_to });
    }
    let insufficient = |reason: String| ImuError::InsufficientSamples {
        from: t_from,
        to: t_to,
        reason,
    };
    let period = nominal_period(samples).ok_or_else(|| insufficient("fewer than two samples".into()))?;
    let max_gap = 2.0 * period;
    // Tolerate timestamp rounding at the interval start.
    let eps = 1e-9 * (1.0 + t_from.abs());
    let first = samples.partition_point(|s| s.t <= t_from + eps);
    if first == 0 {
        return Err(insufficient(format!("first sample at {} is after the start", samples[0].t)));
    }
    let mut i = first - 1;

    let mut rot = nalgebra::UnitQuaternion::identity();
    let mut pos = Vector3::zeros();
    let mut st = ImuState {
        velocity: state.velocity,
        last_t: t_from,
    };
    let mut t = t_from;
    while t < t_to {
        let s = &samples[i];
        let next_t = samples.get(i + 1).map_or(t_to, |n| n.t);
        if next_t - s.t > max_gap {
            return Err(insufficient(format!("gap of {:.4} s after t = {}", next_t - s.t, s.t)));
        }
        let seg_end = next_t.min(t_to);
        let dt = seg_end - t;
        if dt > 0.0 {
            let (dp, dtheta, next) = integrate_step(&st, s, dt)?;
            pos += rot * dp;
            let step = exp_so3(dtheta);
            rot *= step;
            st = ImuState {
                velocity: step.inverse() * next.velocity,
                last_t: next.last_t,
            };
        }
        t = seg_end;
        i = (i + 1).min(samples.len() - 1);
    }
    st.last_t = t_to;
    Ok((Pose::new(rot, pos), st))
}

/// Camera-frame relative motion `extrinsic ∘ t_imu`.
pub fn to_camera_frame(t_imu: &Pose, extrinsic: &Pose) -> Pose {
    compose(extrinsic, t_imu)
}

/// Ordered composition `T_1 ∘ T_2 ∘ ... ∘ T_n`.
pub fn chain(transforms: &[Pose]) -> Result<Pose, ImuError> {
    let (first, rest) = transforms.split_first().ok_or(ImuError::EmptyChain)?;
    Ok(rest.iter().fold(*first, |acc, t| compose(&acc, t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::inverse;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix4, UnitQuaternion};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn stream(rate: f64, secs: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Vec<ImuSample> {
        let n = (rate * secs).round() as usize;
        (0..=n)
            .map(|i| ImuSample {
                t: i as f64 / rate,
                accel,
                gyro,
            })
            .collect()
    }

    #[test]
    fn integrate_step_examples() {
        let zero = ImuSample {
            t: 0.0,
            accel: Vector3::zeros(),
            gyro: Vector3::zeros(),
        };
        let (dp, dth, _) = integrate_step(&ImuState::default(), &zero, 0.01).unwrap();
        assert_eq!((dp, dth), (Vector3::zeros(), Vector3::zeros()));
        let moving = ImuState {
            velocity: Vector3::new(1.0, 0.0, 0.0),
            last_t: 0.0,
        };
        assert_eq!(integrate_step(&moving, &zero, 0.5).unwrap().0, Vector3::new(0.5, 0.0, 0.0));
        let up = ImuSample {
            accel: Vector3::new(0.0, 0.0, 2.0),
            ..zero
        };
        assert_abs_diff_eq!(
            integrate_step(&ImuState::default(), &up, 0.1).unwrap().0,
            Vector3::new(0.0, 0.0, 0.01),
            epsilon = 1e-15
        );
        assert_eq!(integrate_step(&moving, &zero, 0.0).unwrap_err(), ImuError::NonPositiveDt(0.0));
    }

    #[test]
    fn preintegrate_closed_forms() {
        let s = stream(100.0, 1.0, Vector3::zeros(), Vector3::zeros());
        let (p, _) = preintegrate(&s, &ImuState::default(), 0.0, 1.0).unwrap();
        assert_eq!(p, Pose::identity());

        let s = stream(100.0, 1.0, Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        let (p, st) = preintegrate(&s, &ImuState::default(), 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(p.translation, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-3);
        assert_abs_diff_eq!(st.velocity, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-9);

        let s = stream(100.0, 1.0, Vector3::zeros(), Vector3::new(0.0, 0.0, FRAC_PI_2));
        let (p, _) = preintegrate(&s, &ImuState::default(), 0.0, 1.0).unwrap();
        let want = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        assert!(p.rotation.angle_to(&want) < 1e-3);
    }

    #[test]
    fn gap_is_reported() {
        let mut s = stream(100.0, 1.0, Vector3::zeros(), Vector3::zeros());
        s.retain(|x| !(0.4..0.45).contains(&x.t));
        let err = preintegrate(&s, &ImuState::default(), 0.0, 1.0).unwrap_err();
        assert!(matches!(err, ImuError::InsufficientSamples { .. }));
        // Outside the interval the gap is irrelevant.
        assert!(preintegrate(&s, &ImuState::default(), 0.5, 1.0).is_ok());
    }

    #[test]
    fn missing_start_is_reported() {
        let s = stream(100.0, 1.0, Vector3::zeros(), Vector3::zeros());
        assert!(preintegrate(&s, &ImuState::default(), -0.5, 0.5).is_err());
        assert!(preintegrate(&s, &ImuState::default(), 0.5, 0.5).is_err());
    }

    fn mat(p: &Pose) -> Matrix4<f64> {
        p.to_matrix()
    }

    #[test]
    fn extrinsic_and_chain() {
        let a = Pose::from_scaled_axis(Vector3::new(0.1, -0.4, 0.2), Vector3::new(1.0, 2.0, -0.5));
        let b = Pose::from_scaled_axis(Vector3::new(-0.3, 0.2, 0.9), Vector3::new(0.3, -1.0, 2.0));
        let c = Pose::from_scaled_axis(Vector3::new(0.5, 0.5, -0.1), Vector3::new(-2.0, 0.1, 0.4));
        assert_eq!(to_camera_frame(&a, &Pose::identity()), a);
        assert_abs_diff_eq!(mat(&to_camera_frame(&Pose::identity(), &b)), mat(&b), epsilon = 1e-12);
        assert_abs_diff_eq!(mat(&to_camera_frame(&a, &b)), mat(&b) * mat(&a), epsilon = 1e-12);
        assert_eq!(chain(&[a]).unwrap(), a);
        let id = chain(&[a, inverse(&a)]).unwrap();
        assert!(id.translation.norm() < 1e-12 && id.angle() < 1e-9);
        assert_abs_diff_eq!(mat(&chain(&[a, b, c]).unwrap()), mat(&a) * mat(&b) * mat(&c), epsilon = 1e-12);
        assert_eq!(chain(&[]).unwrap_err(), ImuError::EmptyChain);
    }

    /// Constant body-frame acceleration `(1, 0, 0)` while yawing at 1 rad/s:
    /// `p(t) = (1 - cos t, t - sin t, 0)`. Held samples give first-order error.
    fn turning_error(rate: f64) -> f64 {
        let s = stream(rate, 1.0, Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0));
        let (p, _) = preintegrate(&s, &ImuState::default(), 0.0, 1.0).unwrap();
        (p.translation - Vector3::new(1.0 - 1f64.cos(), 1.0 - 1f64.sin(), 0.0)).norm()
    }

    #[test]
    fn discretization_error_is_first_order() {
        let (e50, e100, e200) = (turning_error(50.0), turning_error(100.0), turning_error(200.0));
        for r in [e50 / e100, e100 / e200] {
            assert!((1.8..2.2).contains(&r), "ratio {r}");
        }
    }

    proptest! {
        #[test]
        fn halves_chain_to_whole(seed in 0u64..1000, k in 1usize..100) {
            let split = k as f64 * 0.01;
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<ImuSample> = (0..=100)
                .map(|i| ImuSample {
                    t: i as f64 * 0.01,
                    accel: Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                    gyro: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                })
                .collect();
            let v0 = ImuState { velocity: Vector3::new(0.3, -0.1, 0.2), last_t: 0.0 };
            let (whole, _) = preintegrate(&s, &v0, 0.0, 1.0).unwrap();
            let (a, mid) = preintegrate(&s, &v0, 0.0, split).unwrap();
            let (b, _) = preintegrate(&s, &mid, split, 1.0).unwrap();
            let joined = chain(&[a, b]).unwrap();
            prop_assert!((joined.translation - whole.translation).norm() < 1e-6);
            prop_assert!(joined.rotation.angle_to(&whole.rotation) < 1e-6);
        }

        #[test]
        fn zero_stream_is_identity(n in 2usize..300) {
            let s: Vec<ImuSample> = (0..n)
                .map(|i| ImuSample { t: i as f64 * 0.01, accel: Vector3::zeros(), gyro: Vector3::zeros() })
                .collect();
            let (p, _) = preintegrate(&s, &ImuState::default(), 0.0, (n - 1) as f64 * 0.01).unwrap();
            prop_assert_eq!(p, Pose::identity());
        }
    }
}
