//! The scene map: an append-only set of 3D Gaussians.
//!
//! Parameters are stored in unconstrained form: scale as `log(sigma)`,
//! opacity as a logit. Gradient steps on the stored values can never break
//! positivity of the scale or push opacity out of `(0, 1)`.

use std::io::{Read, Write};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MM3DGSMP";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Scales below this make the covariance numerically singular.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("gaussian {index} is invalid: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("degenerate covariance (scale {0:e} below {MIN_SCALE:e})")]
    DegenerateCovariance(f64),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    /// World-frame mean, meters.
    pub mu: Vector3<f64>,
    pub rot: UnitQuaternion<f64>,
    /// Per-axis `log(sigma)`, sigma in meters.
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// Linear RGB in `[0, 1]`.
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    /// Isotropic Gaussian with the given sigma and opacity.
    pub fn isotropic(mu: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mu,
            rot: UnitQuaternion::identity(),
            log_scale: Vector3::repeat(sigma.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_from(&self.rot, &self.scale())
    }

    /// Unnormalized density `exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))`.
    pub fn evaluate_density(&self, x: &Vector3<f64>) -> Result<f64, MapError> {
        let s = self.scale();
        let smin = s.min();
        if smin < MIN_SCALE {
            return Err(MapError::DegenerateCovariance(smin));
        }
        // Sigma^-1 = R S^-2 R^T, so the quadratic form is |S^-1 R^T d|^2.
        let local = self.rot.inverse() * (x - self.mu);
        let q = local.component_div(&s).norm_squared();
        Ok((-0.5 * q).exp())
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = self.mu.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.rot.coords.iter().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite parameter".into());
        }
        if (self.rot.norm() - 1.0).abs() > 1e-9 {
            return Err("rotation is not a unit quaternion".into());
        }
        if self.scale().iter().any(|s| *s <= 0.0) {
            return Err("decoded scale is not positive".into());
        }
        let o = self.opacity();
        if !(o > 0.0 && o < 1.0) {
            return Err(format!("decoded opacity {o} outside (0, 1)"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err("color channel outside [0, 1]".into());
        }
        Ok(())
    }
}

pub fn covariance_from(rot: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = rot.to_rotation_matrix().into_inner() * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian3D>,
    /// Keyframe that created each Gaussian, parallel to `gaussians`.
    pub creation_keyframe: Vec<usize>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Validates the whole batch first so a failed insert leaves the map untouched.
    pub fn insert(&mut self, batch: Vec<Gaussian3D>, keyframe_id: usize) -> Result<usize, MapError> {
        for (index, g) in batch.iter().enumerate() {
            g.validate()
                .map_err(|reason| MapError::InvalidGaussian { index, reason })?;
        }
        let n = batch.len();
        self.gaussians.extend(batch);
        self.creation_keyframe
            .extend(std::iter::repeat(keyframe_id).take(n));
        Ok(n)
    }

    /// Order-sensitive FNV-1a hash over the exact bit patterns of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for g in &self.gaussians {
            g.mu.iter().for_each(|v| eat(*v));
            g.rot.coords.iter().for_each(|v| eat(*v));
            g.log_scale.iter().for_each(|v| eat(*v));
            eat(g.opacity_logit);
            g.color.iter().for_each(|v| eat(*v));
        }
        h
    }

    /// Writes the little-endian checkpoint (14 `f32` values per Gaussian;
    /// rotation in `w, x, y, z` order).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), MapError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for g in &self.gaussians {
            let q = g.rot.quaternion();
            let vals = [
                g.mu.x,
                g.mu.y,
                g.mu.z,
                q.w,
                q.i,
                q.j,
                q.k,
                g.log_scale.x,
                g.log_scale.y,
                g.log_scale.z,
                g.opacity_logit,
                g.color.x,
                g.color.y,
                g.color.z,
            ];
            for v in vals {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<GaussianMap, MapError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        parse_checkpoint(&bytes)
    }
}

const HEADER_LEN: usize = 8 + 4 + 8;
const RECORD_LEN: usize = 14 * 4;

/// Decodes a checkpoint from memory. Loaded Gaussians are attributed to keyframe 0.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<GaussianMap, MapError> {
    if bytes.len() < HEADER_LEN {
        return Err(MapError::Malformed(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(MapError::Malformed("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(MapError::Malformed(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let expected = (count as u128) * RECORD_LEN as u128;
    if expected != body.len() as u128 {
        return Err(MapError::Malformed(format!(
            "count {count} needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let mut batch = Vec::with_capacity(count as usize);
    for rec in body.chunks_exact(RECORD_LEN) {
        let v: Vec<f64> = rec
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let q = nalgebra::Quaternion::new(v[3], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) || !q.norm().is_finite() {
            return Err(MapError::Malformed("zero or non-finite rotation".into()));
        }
        batch.push(Gaussian3D {
            mu: Vector3::new(v[0], v[1], v[2]),
            rot: UnitQuaternion::from_quaternion(q),
            log_scale: Vector3::new(v[7], v[8], v[9]),
            opacity_logit: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    let mut map = GaussianMap::new();
    map.insert(batch, 0)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian3D {
        let q = nalgebra::Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        Gaussian3D {
            mu: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            rot: UnitQuaternion::from_quaternion(q),
            log_scale: Vector3::new(rng.gen_range(-3.0..0.5), rng.gen_range(-3.0..0.5), rng.gen_range(-3.0..0.5)),
            opacity_logit: rng.gen_range(-3.0..3.0),
            color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
        }
    }

    #[test]
    fn covariance_examples() {
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros());
        assert!((g.covariance() - Matrix3::identity()).abs().max() < 1e-15);
        g.log_scale = Vector3::new(2f64.ln(), 0.0, 0.0);
        assert!((g.covariance() - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let r = g.rot.to_rotation_matrix().into_inner();
            let s = g.scale();
            let oracle = r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose();
            let c = g.covariance();
            assert!((c - oracle).abs().max() < 1e-12);
            assert!((c - c.transpose()).abs().max() < 1e-12);
            let eig = c.symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-12);
        }
    }

    #[test]
    fn density_examples() {
        let g = Gaussian3D::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.3, 0.5, Vector3::zeros());
        assert_eq!(g.evaluate_density(&g.mu).unwrap(), 1.0);
        let x = g.mu + Vector3::new(0.0, 0.3, 0.0);
        assert_abs_diff_eq!(g.evaluate_density(&x).unwrap(), (-0.5f64).exp(), epsilon = 1e-12);
        let mut bad = g.clone();
        bad.log_scale.x = (1e-9f64).ln();
        assert!(matches!(bad.evaluate_density(&x), Err(MapError::DegenerateCovariance(_))));
    }

    #[test]
    fn density_matches_inverse_covariance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let x = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let inv = g.covariance().try_inverse().unwrap();
            let d = x - g.mu;
            let oracle = (-0.5 * (d.transpose() * inv * d)[0]).exp();
            let got = g.evaluate_density(&x).unwrap();
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
            assert!(got > 0.0 && got <= 1.0);
        }
    }

    #[test]
    fn covariance_eigendecomposition_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let c = random_gaussian(&mut rng).covariance();
            let e = c.symmetric_eigen();
            let back = e.eigenvectors * Matrix3::from_diagonal(&e.eigenvalues) * e.eigenvectors.transpose();
            assert!((back - c).abs().max() < 1e-9);
        }
    }

    #[test]
    fn insert_examples() {
        let mut map = GaussianMap::new();
        assert_eq!(map.insert(vec![], 0).unwrap(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let batch: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng)).collect();
        assert_eq!(map.insert(batch, 4).unwrap(), 3);
        assert_eq!(map.len(), 3);
        assert_eq!(map.creation_keyframe, vec![4, 4, 4]);

        let mut bad = random_gaussian(&mut rng);
        bad.opacity_logit = f64::NEG_INFINITY;
        let err = map.insert(vec![random_gaussian(&mut rng), bad], 5).unwrap_err();
        assert!(matches!(err, MapError::InvalidGaussian { index: 1, .. }));
        assert_eq!(map.len(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_within_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut map = GaussianMap::new();
        map.insert((0..7).map(|_| random_gaussian(&mut rng)).collect(), 0).unwrap();
        let mut buf = Vec::new();
        map.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"MM3DGSMP");
        assert_eq!(buf.len(), 20 + 7 * 56);
        let back = parse_checkpoint(&buf).unwrap();
        for (a, b) in map.gaussians.iter().zip(&back.gaussians) {
            assert!((a.mu - b.mu).abs().max() < 1e-6);
            assert!(a.rot.angle_to(&b.rot) < 1e-5);
            assert!((a.color - b.color).abs().max() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_rejects_truncation_and_bad_counts() {
        let mut map = GaussianMap::new();
        map.insert(vec![Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.5, Vector3::zeros())], 0)
            .unwrap();
        let mut buf = Vec::new();
        map.write_checkpoint(&mut buf).unwrap();
        assert!(parse_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut huge = buf.clone();
        huge[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(parse_checkpoint(&huge).is_err());
        assert!(parse_checkpoint(b"MM3DGS").is_err());
    }

    proptest! {
        #[test]
        fn unconstrained_steps_keep_invariants(steps in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..20)) {
            let mut g = Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.5, Vector3::zeros());
            for (ds, dop) in steps {
                g.log_scale += Vector3::repeat(ds * 0.1);
                g.opacity_logit += dop * 0.1;
                prop_assert!(g.scale().iter().all(|s| *s > 0.0));
                let o = g.opacity();
                prop_assert!((0.0..=1.0).contains(&o));
                if g.opacity_logit.abs() < 30.0 {
                    prop_assert!(o > 0.0 && o < 1.0);
                }
            }
        }
    }
}
