//! Canonical-space Gaussian model: per-point geometry, skin weights, and the
//! struct-of-arrays container the optimizer and checkpoints work with.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::math::{quat_to_rot, quat_to_rot_backward, sigmoid};
use crate::skinning::Skeleton;

/// Scales below this make the covariance numerically singular.
pub const MIN_SCALE: f64 = 1e-7;

/// One anisotropic Gaussian in canonical space.
///
/// Rotation is a raw quaternion (w, x, y, z), normalized wherever a matrix is
/// built from it. Scales are stored as logs so optimization keeps them
/// positive. Opacity is stored as a logit for the same reason.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGeometry {
    pub center: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
}

impl GaussianGeometry {
    pub fn new(
        center: Vector3<f64>,
        rotation: Vector4<f64>,
        log_scale: Vector3<f64>,
        opacity_logit: f64,
    ) -> Result<Self> {
        let finite = center.iter().all(|v| v.is_finite())
            && rotation.iter().all(|v| v.is_finite())
            && log_scale.iter().all(|v| v.is_finite())
            && opacity_logit.is_finite();
        if !finite {
            return Err(Error::InvalidParameter(
                "gaussian geometry contains non-finite values".into(),
            ));
        }
        if rotation.norm() < 1e-12 {
            return Err(Error::InvalidParameter(
                "gaussian rotation quaternion has (near) zero norm".into(),
            ));
        }
        Ok(GaussianGeometry {
            center,
            rotation,
            log_scale,
            opacity_logit,
        })
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }
}

/// Covariance of a Gaussian from its rotation and log-scales:
/// `R * diag(exp(2s)) * R^T`. Symmetric positive definite whenever all
/// scales are positive.
pub fn build_covariance(rotation: Vector4<f64>, log_scale: Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rot(rotation);
    let s2 = log_scale.map(|v| (2.0 * v).exp());
    let mut m = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += r[(a, k)] * s2[k] * r[(b, k)];
            }
            m[(a, b)] = acc;
        }
    }
    m
}

/// Backward of [`build_covariance`]: gradients of a scalar loss with respect
/// to the raw quaternion and the log-scales, given the gradient with respect
/// to the covariance matrix (treated as a full, not symmetrized, 3x3).
pub fn build_covariance_backward(
    rotation: Vector4<f64>,
    log_scale: Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Vector4<f64>, Vector3<f64>) {
    let r = quat_to_rot(rotation);
    let s = log_scale.map(f64::exp);
    let u = r * Matrix3::from_diagonal(&s);
    // cov = U U^T with U = R diag(s).
    let d_u = (d_cov + d_cov.transpose()) * u;
    let d_r = d_u * Matrix3::from_diagonal(&s);
    let rt_du = r.transpose() * d_u;
    let d_log_scale = Vector3::new(
        rt_du[(0, 0)] * s[0],
        rt_du[(1, 1)] * s[1],
        rt_du[(2, 2)] * s[2],
    );
    (quat_to_rot_backward(rotation, &d_r), d_log_scale)
}

/// Covariance from a general (possibly sheared) linear frame and log-scales:
/// `L * diag(exp(2s)) * L^T`. Deformed Gaussians use this with the blended
/// linear part applied to the canonical rotation.
pub fn covariance_from_linear(linear: &Matrix3<f64>, log_scale: Vector3<f64>) -> Matrix3<f64> {
    let s2 = log_scale.map(|v| (2.0 * v).exp());
    linear * Matrix3::from_diagonal(&s2) * linear.transpose()
}

/// Backward of [`covariance_from_linear`].
pub fn covariance_from_linear_backward(
    linear: &Matrix3<f64>,
    log_scale: Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let s = log_scale.map(f64::exp);
    let u = linear * Matrix3::from_diagonal(&s);
    let d_u = (d_cov + d_cov.transpose()) * u;
    let d_linear = d_u * Matrix3::from_diagonal(&s);
    let lt_du = linear.transpose() * d_u;
    let d_log_scale = Vector3::new(
        lt_du[(0, 0)] * s[0],
        lt_du[(1, 1)] * s[1],
        lt_du[(2, 2)] * s[2],
    );
    (d_linear, d_log_scale)
}

/// Opacity of a Gaussian evaluated at a point in its own space:
/// peak opacity decayed by the Mahalanobis distance to the center.
pub fn gaussian_opacity_at(geom: &GaussianGeometry, x: Vector3<f64>) -> Result<f64> {
    if geom.scales().min() <= MIN_SCALE {
        return Err(Error::DegenerateGaussian(format!(
            "scale below {MIN_SCALE:e}, covariance not invertible"
        )));
    }
    let cov = build_covariance(geom.rotation, geom.log_scale);
    let inv = cov.try_inverse().ok_or_else(|| {
        Error::DegenerateGaussian("covariance not invertible".into())
    })?;
    let d = x - geom.center;
    let q = (inv * d).dot(&d);
    Ok(geom.opacity() * (-0.5 * q).exp())
}

/// Linear-blend skin weights: at most four (bone, weight) entries that sum
/// to one. Stored padded to four so hot loops can stay branch-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkinWeights {
    pub bones: [u16; 4],
    pub weights: [f64; 4],
}

pub const WEIGHT_SUM_TOL: f64 = 1e-6;

impl SkinWeights {
    pub fn new(entries: &[(u16, f64)]) -> Result<Self> {
        if entries.is_empty() || entries.len() > 4 {
            return Err(Error::InvalidParameter(format!(
                "skin weights need 1..=4 entries, got {}",
                entries.len()
            )));
        }
        let sum: f64 = entries.iter().map(|&(_, w)| w).sum();
        if !sum.is_finite() || (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "skin weights sum to {sum}, expected 1"
            )));
        }
        if entries.iter().any(|&(_, w)| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidParameter(
                "skin weights must be finite and non-negative".into(),
            ));
        }
        let mut bones = [0u16; 4];
        let mut weights = [0.0f64; 4];
        for (i, &(b, w)) in entries.iter().enumerate() {
            bones[i] = b;
            weights[i] = w;
        }
        Ok(SkinWeights { bones, weights })
    }

    pub fn rigid(bone: u16) -> Self {
        SkinWeights {
            bones: [bone, 0, 0, 0],
            weights: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

/// One Gaussian with everything rendering needs: geometry, skinning, and the
/// current field-sampled appearance values.
#[derive(Debug, Clone, Copy)]
pub struct SkinnedGaussian {
    pub geometry: GaussianGeometry,
    pub skin: SkinWeights,
    /// Spherical-harmonic coefficients, 9 per color channel, channel-major.
    pub sh: [f64; 27],
    /// Canonical-space corrective displacement added to the center.
    pub displacement: Vector3<f64>,
    /// Brightness factor in [0, 1].
    pub ambient_occlusion: f64,
}

impl SkinnedGaussian {
    pub fn new(geometry: GaussianGeometry, skin: SkinWeights) -> Self {
        SkinnedGaussian {
            geometry,
            skin,
            sh: [0.0; 27],
            displacement: Vector3::zeros(),
            ambient_occlusion: 1.0,
        }
    }
}

/// The whole avatar: a skeleton plus parallel per-point parameter arrays.
///
/// Parameters are flat `f64` arrays so the optimizer and the checkpoint
/// format can treat every group uniformly; typed accessors build the value
/// types above on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedGaussianModel {
    pub skeleton: Skeleton,
    /// 3 per point.
    pub centers: Vec<f64>,
    /// 4 per point, (w, x, y, z).
    pub rotations: Vec<f64>,
    /// 3 per point.
    pub log_scales: Vec<f64>,
    /// 1 per point.
    pub opacity_logits: Vec<f64>,
    pub skin_bones: Vec<[u16; 4]>,
    pub skin_weights: Vec<[f64; 4]>,
    /// Optional per-point texture coordinates, 2 per point, for atlas shading.
    pub uv: Option<Vec<f64>>,
}

impl SkinnedGaussianModel {
    pub fn with_capacity(skeleton: Skeleton, n: usize) -> Self {
        SkinnedGaussianModel {
            skeleton,
            centers: Vec::with_capacity(3 * n),
            rotations: Vec::with_capacity(4 * n),
            log_scales: Vec::with_capacity(3 * n),
            opacity_logits: Vec::with_capacity(n),
            skin_bones: Vec::with_capacity(n),
            skin_weights: Vec::with_capacity(n),
            uv: None,
        }
    }

    pub fn n_points(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn push(&mut self, geom: &GaussianGeometry, skin: &SkinWeights) {
        self.centers.extend_from_slice(geom.center.as_slice());
        self.rotations.extend_from_slice(geom.rotation.as_slice());
        self.log_scales.extend_from_slice(geom.log_scale.as_slice());
        self.opacity_logits.push(geom.opacity_logit);
        self.skin_bones.push(skin.bones);
        self.skin_weights.push(skin.weights);
    }

    pub fn center(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.centers[3 * i..3 * i + 3])
    }

    pub fn rotation(&self, i: usize) -> Vector4<f64> {
        Vector4::from_column_slice(&self.rotations[4 * i..4 * i + 4])
    }

    pub fn log_scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.log_scales[3 * i..3 * i + 3])
    }

    pub fn geometry(&self, i: usize) -> GaussianGeometry {
        GaussianGeometry {
            center: self.center(i),
            rotation: self.rotation(i),
            log_scale: self.log_scale(i),
            opacity_logit: self.opacity_logits[i],
        }
    }

    pub fn skin(&self, i: usize) -> SkinWeights {
        SkinWeights {
            bones: self.skin_bones[i],
            weights: self.skin_weights[i],
        }
    }

    pub fn uv_of(&self, i: usize) -> Option<(f64, f64)> {
        self.uv.as_ref().map(|uv| (uv[2 * i], uv[2 * i + 1]))
    }

    /// Structural validation: array lengths agree, values finite, bone
    /// references in range, weight rows sum to one.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_points();
        if self.centers.len() != 3 * n
            || self.rotations.len() != 4 * n
            || self.log_scales.len() != 3 * n
            || self.skin_bones.len() != n
            || self.skin_weights.len() != n
        {
            return Err(Error::InvalidParameter(
                "model parameter arrays have inconsistent lengths".into(),
            ));
        }
        if let Some(uv) = &self.uv {
            if uv.len() != 2 * n {
                return Err(Error::InvalidParameter(
                    "uv array length does not match point count".into(),
                ));
            }
        }
        let n_bones = self.skeleton.n_bones();
        for i in 0..n {
            let all = self
                .centers[3 * i..3 * i + 3]
                .iter()
                .chain(&self.rotations[4 * i..4 * i + 4])
                .chain(&self.log_scales[3 * i..3 * i + 3])
                .all(|v| v.is_finite());
            if !all || !self.opacity_logits[i].is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "point {i} has non-finite parameters"
                )));
            }
            let wsum: f64 = self.skin_weights[i].iter().sum();
            if (wsum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "point {i} skin weights sum to {wsum}"
                )));
            }
            if self.skin_bones[i]
                .iter()
                .zip(&self.skin_weights[i])
                .any(|(&b, &w)| w != 0.0 && b as usize >= n_bones)
            {
                return Err(Error::InvalidParameter(format!(
                    "point {i} references a bone outside the skeleton"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_covariance() {
        let cov = build_covariance(Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::zeros());
        assert_relative_eq!(cov, Matrix3::identity(), epsilon = 1e-14);
    }

    #[test]
    fn rotated_anisotropic_covariance_swaps_axes() {
        // 90 degrees about z with scales (1, 2, 1): the long axis lands on x.
        let q = Vector4::new((FRAC_PI_2 / 2.0).cos(), 0.0, 0.0, (FRAC_PI_2 / 2.0).sin());
        let s = Vector3::new(0.0, 2.0f64.ln(), 0.0);
        let cov = build_covariance(q, s);
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert_relative_eq!(cov, expected, epsilon = 1e-12);
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let q = Vector4::new(0.8, -0.1, 0.4, 0.2);
        let s = Vector3::new(-0.3, 0.5, 0.1);
        let w = Matrix3::new(0.3, -1.2, 0.7, -1.2, 0.9, -0.4, 0.7, -0.4, -0.8);
        let (dq, ds) = build_covariance_backward(q, s, &w);
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (w.dot(&build_covariance(qp, s)) - w.dot(&build_covariance(qm, s))) / (2.0 * h);
            assert_relative_eq!(dq[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
        for i in 0..3 {
            let mut sp = s;
            let mut sm = s;
            sp[i] += h;
            sm[i] -= h;
            let fd = (w.dot(&build_covariance(q, sp)) - w.dot(&build_covariance(q, sm))) / (2.0 * h);
            assert_relative_eq!(ds[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn opacity_at_center_and_unit_mahalanobis() {
        let geom = GaussianGeometry::new(
            Vector3::new(0.5, -0.25, 2.0),
            Vector4::new(0.9, 0.1, -0.2, 0.3),
            Vector3::new(-1.0, 0.2, 0.4),
            0.7,
        )
        .unwrap();
        let at_center = gaussian_opacity_at(&geom, geom.center).unwrap();
        assert_relative_eq!(at_center, sigmoid(0.7), epsilon = 1e-12);

        // One unit of Mahalanobis distance along a principal axis.
        let r = quat_to_rot(geom.rotation);
        let axis = r.column(0).into_owned() * geom.scales()[0];
        let a = gaussian_opacity_at(&geom, geom.center + axis).unwrap();
        assert_relative_eq!(a, sigmoid(0.7) * (-0.5f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(a / at_center, 0.606531, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        let geom = GaussianGeometry::new(
            Vector3::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::new(-20.0, 0.0, 0.0),
            0.0,
        )
        .unwrap();
        match gaussian_opacity_at(&geom, Vector3::x()) {
            Err(Error::DegenerateGaussian(_)) => {}
            other => panic!("expected degenerate-gaussian error, got {other:?}"),
        }
    }

    #[test]
    fn skin_weight_validation() {
        assert!(SkinWeights::new(&[(0, 0.5), (1, 0.5)]).is_ok());
        assert!(SkinWeights::new(&[(0, 0.6), (1, 0.5)]).is_err());
        assert!(SkinWeights::new(&[]).is_err());
        assert!(SkinWeights::new(&[(0, 0.2); 5]).is_err());
        let rigid = SkinWeights::rigid(3);
        assert_eq!(rigid.bones[0], 3);
        assert_eq!(rigid.weights[0], 1.0);
    }

    #[test]
    fn linear_frame_covariance_matches_finite_differences() {
        let l = Matrix3::new(0.9, 0.2, -0.1, 0.05, 1.1, 0.3, -0.2, 0.1, 0.8);
        let s = Vector3::new(-0.4, 0.1, -1.2);
        // With an orthonormal frame it reduces to the quaternion path.
        let q = Vector4::new(0.8, -0.3, 0.2, 0.4);
        let r = crate::math::quat_to_rot(q);
        let via_linear = covariance_from_linear(&r, s);
        let via_quat = build_covariance(q, s);
        assert_relative_eq!(via_linear, via_quat, epsilon = 1e-12);

        let mut probe = Matrix3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                probe[(a, b)] = ((a * 3 + b) as f64).sin();
            }
        }
        let (d_l, d_s) = covariance_from_linear_backward(&l, s, &probe);
        let loss = |l: &Matrix3<f64>, s: Vector3<f64>| {
            let c = covariance_from_linear(l, s);
            c.component_mul(&probe).sum()
        };
        let h = 1e-6;
        for a in 0..3 {
            for b in 0..3 {
                let mut lp = l;
                let mut lm = l;
                lp[(a, b)] += h;
                lm[(a, b)] -= h;
                let fd = (loss(&lp, s) - loss(&lm, s)) / (2.0 * h);
                assert_relative_eq!(d_l[(a, b)], fd, epsilon = 1e-8, max_relative = 1e-7);
            }
            let mut sp = s;
            let mut sm = s;
            sp[a] += h;
            sm[a] -= h;
            let fd = (loss(&l, sp) - loss(&l, sm)) / (2.0 * h);
            assert_relative_eq!(d_s[a], fd, epsilon = 1e-8, max_relative = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(
            qw in -1.0f64..1.0, qx in -1.0f64..1.0, qy in -1.0f64..1.0, qz in -1.0f64..1.0,
            s0 in -2.0f64..2.0, s1 in -2.0f64..2.0, s2 in -2.0f64..2.0,
        ) {
            prop_assume!(Vector4::new(qw, qx, qy, qz).norm() > 1e-3);
            let cov = build_covariance(Vector4::new(qw, qx, qy, qz), Vector3::new(s0, s1, s2));
            prop_assert!((cov - cov.transpose()).abs().max() < 1e-12);
            let eig = cov.symmetric_eigenvalues();
            prop_assert!(eig.min() > -1e-12);
        }
    }
}
