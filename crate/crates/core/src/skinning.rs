//! Skeleton, pose, and linear blend skinning.
//!
//! A skeleton is a tree of joints given by parent indices (topologically
//! ordered, root at 0) and a local position per joint, i.e. the offset from
//! its parent in canonical space. A pose holds per-joint Euler angles, a root
//! translation, and a normalized timestamp.
//!
//! Per-bone transforms are built from two forward-kinematic chains. Global
//! matrices compose parent first, then the child's local matrix. The posed
//! chain uses local matrices `[R(omega_i), J_i]` (the root instead gets
//! `[R(omega_0), T + J_0]`, so `T` is relative to the root's canonical
//! position and the rest pose with `T = 0` is exactly neutral). The canonical
//! chain uses `[I, J_i]`, identity rotations throughout. A bone's skinning
//! transform is then `posed * canonical^-1`, which maps canonical space
//! directly to posed space and degenerates to the identity in the rest pose
//! for every skeleton.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math::{
    compose_backward, euler_to_rot, euler_to_rot_backward, Affine3, Affine3Grad,
};
use crate::model::SkinWeights;

/// Blend matrices with |det| at or below this are treated as singular by
/// [`canonicalize_direction`].
pub const SINGULAR_BLEND_DET: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    /// `None` for the root (index 0 only); otherwise an index less than the
    /// joint's own, which makes the array topologically sorted and cycle-free
    /// by construction.
    pub parents: Vec<Option<u16>>,
    /// Local joint positions, 3 per joint, flat so they can be optimized.
    pub joints: Vec<f64>,
}

impl Skeleton {
    pub fn new(parents: Vec<Option<u16>>, joints: Vec<f64>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::InvalidSkeleton("skeleton has no joints".into()));
        }
        if joints.len() != 3 * parents.len() {
            return Err(Error::InvalidSkeleton(format!(
                "{} joints but {} position scalars",
                parents.len(),
                joints.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {i} has no parent but is not the root"
                    )))
                }
                Some(p) if *p as usize >= i => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {i} has parent {p}; parents must precede children (cycles are impossible only then)"
                    )))
                }
                _ => {}
            }
        }
        if joints.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSkeleton(
                "joint positions must be finite".into(),
            ));
        }
        Ok(Skeleton { parents, joints })
    }

    pub fn n_bones(&self) -> usize {
        self.parents.len()
    }

    pub fn joint(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.joints[3 * i..3 * i + 3])
    }
}

/// Per-frame articulation: Euler angles per joint (the root's are applied in
/// world space), a root translation, and a timestamp normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub omegas: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
    pub time: f64,
}

impl Pose {
    pub fn new(omegas: Vec<Vector3<f64>>, root_translation: Vector3<f64>, time: f64) -> Result<Self> {
        if omegas.iter().any(|o| !o.iter().all(|v| v.is_finite()))
            || !root_translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidParameter("pose contains non-finite values".into()));
        }
        if !(0.0..=1.0).contains(&time) {
            return Err(Error::InvalidParameter(format!(
                "pose timestamp {time} outside [0, 1]"
            )));
        }
        Ok(Pose {
            omegas,
            root_translation,
            time,
        })
    }

    pub fn rest(n_bones: usize) -> Self {
        Pose {
            omegas: vec![Vector3::zeros(); n_bones],
            root_translation: Vector3::zeros(),
            time: 0.0,
        }
    }
}

/// Canonical-to-posed transform per bone.
#[derive(Debug, Clone)]
pub struct BoneTransforms {
    pub bones: Vec<Affine3>,
}

/// Gradients flowing out of the bone chain into pose and skeleton inputs.
#[derive(Debug, Clone)]
pub struct PoseGrads {
    pub omegas: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
}

impl PoseGrads {
    pub fn zero(n_bones: usize) -> Self {
        PoseGrads {
            omegas: vec![Vector3::zeros(); n_bones],
            joints: vec![Vector3::zeros(); n_bones],
            root_translation: Vector3::zeros(),
        }
    }
}

struct BoneChain {
    locals: Vec<Affine3>,
    posed: Vec<Affine3>,
    /// Canonical chain translation per bone (sum of local joint offsets from
    /// the root down); the canonical linear part is always the identity.
    canon: Vec<Vector3<f64>>,
}

fn forward_chain(skeleton: &Skeleton, pose: &Pose) -> BoneChain {
    let n = skeleton.n_bones();
    let mut locals = Vec::with_capacity(n);
    let mut posed = Vec::with_capacity(n);
    let mut canon = Vec::with_capacity(n);
    for i in 0..n {
        let r = euler_to_rot(pose.omegas[i]);
        let j = skeleton.joint(i);
        match skeleton.parents[i] {
            None => {
                locals.push(Affine3::new(r, pose.root_translation + j));
                posed.push(locals[i]);
                canon.push(j);
            }
            Some(p) => {
                let p = p as usize;
                locals.push(Affine3::new(r, j));
                posed.push(posed[p].compose(&locals[i]));
                canon.push(canon[p] + j);
            }
        }
    }
    BoneChain {
        locals,
        posed,
        canon,
    }
}

/// Builds the skinning transform of every bone for one pose.
pub fn compute_bone_transforms(skeleton: &Skeleton, pose: &Pose) -> Result<BoneTransforms> {
    if pose.omegas.len() != skeleton.n_bones() {
        return Err(Error::InvalidParameter(format!(
            "pose has {} joint angles for a {}-bone skeleton",
            pose.omegas.len(),
            skeleton.n_bones()
        )));
    }
    let chain = forward_chain(skeleton, pose);
    let bones = (0..skeleton.n_bones())
        .map(|i| {
            let p = &chain.posed[i];
            Affine3::new(p.linear, p.translation - p.linear * chain.canon[i])
        })
        .collect();
    Ok(BoneTransforms { bones })
}

/// Backward of [`compute_bone_transforms`]: pushes per-bone transform
/// gradients into joint positions, joint angles, and the root translation.
pub fn compute_bone_transforms_backward(
    skeleton: &Skeleton,
    pose: &Pose,
    d_bones: &[Affine3Grad],
) -> PoseGrads {
    let n = skeleton.n_bones();
    debug_assert_eq!(d_bones.len(), n);
    let chain = forward_chain(skeleton, pose);

    let mut d_posed = vec![Affine3Grad::zero(); n];
    let mut d_locals = vec![Affine3Grad::zero(); n];
    let mut d_canon = vec![Vector3::zeros(); n];
    let mut out = PoseGrads::zero(n);

    // Reverse topological order so every parent sees all child contributions.
    for i in (0..n).rev() {
        // bone = [P.linear, P.translation - P.linear * canon]
        let db = &d_bones[i];
        d_posed[i].linear += db.linear - db.translation * chain.canon[i].transpose();
        d_posed[i].translation += db.translation;
        d_canon[i] += -(chain.posed[i].linear.transpose() * db.translation);

        match skeleton.parents[i] {
            None => {
                let dp = d_posed[i];
                d_locals[i].add(&dp);
                out.joints[i] += d_canon[i];
            }
            Some(p) => {
                let p = p as usize;
                let dp = d_posed[i];
                let (mut da, mut dl) = (Affine3Grad::zero(), Affine3Grad::zero());
                compose_backward(&chain.posed[p], &chain.locals[i], &dp, &mut da, &mut dl);
                d_posed[p].add(&da);
                d_locals[i].add(&dl);
                // canon[i] = canon[p] + joint[i]
                out.joints[i] += d_canon[i];
                let dci = d_canon[i];
                d_canon[p] += dci;
            }
        }

        out.omegas[i] = euler_to_rot_backward(pose.omegas[i], &d_locals[i].linear);
        out.joints[i] += d_locals[i].translation;
        if skeleton.parents[i].is_none() {
            out.root_translation += d_locals[i].translation;
        }
    }
    out
}

/// Weighted average of bone transforms for one point. Weights are treated as
/// constants of the model, no gradient flows into them.
pub fn blend_transform(skin: &SkinWeights, bones: &BoneTransforms) -> Affine3 {
    let mut linear = Matrix3::zeros();
    let mut translation = Vector3::zeros();
    for k in 0..4 {
        let w = skin.weights[k];
        if w == 0.0 {
            continue;
        }
        let b = &bones.bones[skin.bones[k] as usize];
        linear += b.linear * w;
        translation += b.translation * w;
    }
    Affine3::new(linear, translation)
}

pub fn blend_transform_backward(
    skin: &SkinWeights,
    d_blend: &Affine3Grad,
    d_bones: &mut [Affine3Grad],
) {
    for k in 0..4 {
        let w = skin.weights[k];
        if w == 0.0 {
            continue;
        }
        d_bones[skin.bones[k] as usize].add(&d_blend.scale(w));
    }
}

/// Moves a canonical point into posed space with a blended transform.
pub fn deform_point(blend: &Affine3, x_canonical: Vector3<f64>) -> Vector3<f64> {
    blend.apply_point(x_canonical)
}

pub fn deform_point_backward(
    blend: &Affine3,
    x_canonical: Vector3<f64>,
    d_out: Vector3<f64>,
) -> (Affine3Grad, Vector3<f64>) {
    let d_blend = Affine3Grad {
        linear: d_out * x_canonical.transpose(),
        translation: d_out,
    };
    (d_blend, blend.linear.transpose() * d_out)
}

/// Rotates a canonical orientation into posed space. The blended linear part
/// is applied as-is; for non-rigid blends the result is intentionally not
/// re-orthonormalized, the covariance construction absorbs the shear.
pub fn deform_rotation(blend: &Affine3, r_canonical: &Matrix3<f64>) -> Matrix3<f64> {
    blend.linear * r_canonical
}

pub fn deform_rotation_backward(
    blend: &Affine3,
    r_canonical: &Matrix3<f64>,
    d_out: &Matrix3<f64>,
) -> (Matrix3<f64>, Matrix3<f64>) {
    (
        d_out * r_canonical.transpose(),
        blend.linear.transpose() * d_out,
    )
}

/// Pulls a posed-space view direction back to canonical space: the inverse
/// blended linear part followed by renormalization. Near-singular blends
/// (compressed weight mixtures) fall back to the posed direction unchanged.
pub fn canonicalize_direction(blend: &Affine3, d_posed: Vector3<f64>) -> Vector3<f64> {
    if blend.linear.determinant().abs() <= SINGULAR_BLEND_DET {
        return d_posed;
    }
    let v = blend.linear.try_inverse().expect("det checked above") * d_posed;
    let n = v.norm();
    if n == 0.0 {
        return d_posed;
    }
    v / n
}

/// Backward of [`canonicalize_direction`]; returns gradients for the blend
/// linear part and the posed direction.
pub fn canonicalize_direction_backward(
    blend: &Affine3,
    d_posed: Vector3<f64>,
    d_out: Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    if blend.linear.determinant().abs() <= SINGULAR_BLEND_DET {
        return (Matrix3::zeros(), d_out);
    }
    let inv = blend.linear.try_inverse().expect("det checked above");
    let v = inv * d_posed;
    let n = v.norm();
    if n == 0.0 {
        return (Matrix3::zeros(), d_out);
    }
    let u = v / n;
    // through normalization
    let d_v = (d_out - u * u.dot(&d_out)) / n;
    // v = inv * d_posed
    let d_dir = inv.transpose() * d_v;
    // dA = -inv^T d_v v^T
    let d_linear = -(inv.transpose() * d_v) * v.transpose();
    (d_linear, d_dir)
}
