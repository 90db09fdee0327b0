//! End-to-end differentiable rendering of skinned Gaussian avatars.
//!
//! Forward, per point: sample the displacement field at the stored center,
//! shift the center, blend the pose's bone transforms with the point's skin
//! weights, deform center and orientation, decode color from spherical
//! harmonics along the canonicalized view direction, dim it by the
//! brightness field, then project and composite all splats.
//!
//! Backward reverses the whole chain. Splat-independent work runs in
//! parallel; gradients into the shared field tables, the atlas, and the
//! bones are accumulated serially in point order, so results are identical
//! for any thread count.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{Atlas, FieldBank, FieldBankGrads, FieldScratch};
use crate::math::{
    quat_to_rot, quat_to_rot_backward, sigmoid, sigmoid_grad_from_output, Affine3, Affine3Grad,
};
use crate::model::{
    covariance_from_linear, covariance_from_linear_backward, SkinnedGaussianModel,
};
use crate::rasterizer::{rasterize_backward, rasterize_forward, Camera, FrameBuffers, WorldSplat};
use crate::shading::{apply_ao, apply_ao_backward, eval_sh, eval_sh_backward, SH_COEFFS};
use crate::skinning::{
    blend_transform, blend_transform_backward, canonicalize_direction,
    canonicalize_direction_backward, compute_bone_transforms, compute_bone_transforms_backward,
    deform_point, deform_point_backward, deform_rotation, deform_rotation_backward, Pose,
    PoseGrads,
};

/// Where a point's spherical-harmonic coefficients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShSource {
    /// Continuous field over canonical space (works for any point set).
    Field,
    /// Fixed UV coordinates into a learnable texture.
    Atlas,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub sh_source: ShSource,
    /// When off, the brightness factor is pinned to 1 everywhere.
    pub ao_enabled: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            sh_source: ShSource::Field,
            ao_enabled: true,
        }
    }
}

/// Everything trainable for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Avatar {
    pub model: SkinnedGaussianModel,
    pub fields: FieldBank,
    /// Present only for models with UV coordinates.
    pub atlas: Option<Atlas>,
}

/// Per-point forward intermediates the backward pass reuses.
#[derive(Debug, Clone)]
struct PointCache {
    shifted: Vector3<f64>,
    sh: [f64; SH_COEFFS],
    blend: Affine3,
    deformed: Vector3<f64>,
    dir_posed: Vector3<f64>,
    dir_canonical: Vector3<f64>,
    rgb: Vector3<f64>,
    ao: f64,
    opacity: f64,
}

/// Splats plus the cached intermediates for one avatar and pose.
pub struct AvatarSplats {
    pub splats: Vec<WorldSplat>,
    cache: Vec<PointCache>,
}

/// Degenerate view directions (point at the camera origin) fall back to a
/// fixed direction with no gradient.
const MIN_DIR_NORM: f64 = 1e-9;

fn view_direction(deformed: Vector3<f64>, cam_pos: Vector3<f64>) -> (Vector3<f64>, bool) {
    let v = deformed - cam_pos;
    let n = v.norm();
    if n < MIN_DIR_NORM {
        (Vector3::new(0.0, 0.0, 1.0), true)
    } else {
        (v / n, false)
    }
}

/// Camera origin in world space.
fn camera_position(cam: &Camera) -> Vector3<f64> {
    -(cam.world_to_camera.linear.transpose() * cam.world_to_camera.translation)
}

/// Runs the per-point chain for one avatar, producing world splats ready
/// for rasterization.
pub fn deform_and_shade(
    avatar: &Avatar,
    pose: &Pose,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<AvatarSplats> {
    let model = &avatar.model;
    let bones = compute_bone_transforms(&model.skeleton, pose)?;
    if settings.sh_source == ShSource::Atlas && (model.uv.is_none() || avatar.atlas.is_none()) {
        return Err(Error::Config(
            "texture-based shading needs a model with UVs and a fitted atlas".into(),
        ));
    }
    let cam_pos = camera_position(cam);
    let t = pose.time;

    let n = model.n_points();
    let results: Vec<(WorldSplat, PointCache)> = (0..n)
        .into_par_iter()
        .map_init(FieldScratch::default, |scratch, i| {
            let x0 = model.center(i);
            let sa = avatar.fields.sample_shape_appearance(x0, scratch);
            let shifted = x0 + sa.displacement;
            let sh = match settings.sh_source {
                ShSource::Field => sa.sh,
                ShSource::Atlas => {
                    let (u, v) = model.uv_of(i).expect("checked above");
                    avatar.atlas.as_ref().expect("checked above").sample(u, v)
                }
            };

            let blend = blend_transform(&model.skin(i), &bones);
            let deformed = deform_point(&blend, shifted);
            let r_canonical = quat_to_rot(model.rotation(i));
            let frame = deform_rotation(&blend, &r_canonical);
            let cov = covariance_from_linear(&frame, model.log_scale(i));

            let (dir_posed, _) = view_direction(deformed, cam_pos);
            let dir_canonical = canonicalize_direction(&blend, dir_posed);
            let rgb = eval_sh(&sh, dir_canonical);
            let ao = if settings.ao_enabled {
                avatar.fields.sample_ao(shifted, t, scratch)
            } else {
                1.0
            };
            let color = apply_ao(rgb, ao);
            let opacity = sigmoid(model.opacity_logits[i]);

            let splat = WorldSplat {
                center: deformed,
                cov,
                opacity,
                color: [color.x, color.y, color.z],
            };
            let cache = PointCache {
                shifted,
                sh,
                blend,
                deformed,
                dir_posed,
                dir_canonical,
                rgb,
                ao,
                opacity,
            };
            (splat, cache)
        })
        .collect();

    let (splats, cache) = results.into_iter().unzip();
    Ok(AvatarSplats { splats, cache })
}

/// Renders one avatar.
pub fn render(
    avatar: &Avatar,
    pose: &Pose,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<FrameBuffers> {
    let prepared = deform_and_shade(avatar, pose, cam, settings)?;
    Ok(rasterize_forward(cam, &prepared.splats, settings.background))
}

/// Renders several avatars into one image: every avatar is deformed and
/// shaded independently, then all splats share a single global compositing
/// pass, so avatars correctly interleave in depth.
pub fn render_avatars(
    scene: &[(&Avatar, &Pose)],
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<FrameBuffers> {
    let mut all = Vec::new();
    for (avatar, pose) in scene {
        let prepared = deform_and_shade(avatar, pose, cam, settings)?;
        all.extend(prepared.splats);
    }
    Ok(rasterize_forward(cam, &all, settings.background))
}

/// Gradients of everything trainable in an [`Avatar`], plus the pose.
#[derive(Debug, Clone)]
pub struct AvatarGrads {
    pub d_centers: Vec<Vector3<f64>>,
    pub d_rotations: Vec<nalgebra::Vector4<f64>>,
    pub d_log_scales: Vec<Vector3<f64>>,
    pub d_opacity_logits: Vec<f64>,
    pub fields: FieldBankGrads,
    pub atlas: Option<Vec<f64>>,
    pub pose: PoseGrads,
}

impl AvatarGrads {
    pub fn zeros_like(avatar: &Avatar) -> Self {
        let n = avatar.model.n_points();
        AvatarGrads {
            d_centers: vec![Vector3::zeros(); n],
            d_rotations: vec![nalgebra::Vector4::zeros(); n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_opacity_logits: vec![0.0; n],
            fields: FieldBankGrads::zeros_like(&avatar.fields),
            atlas: avatar.atlas.as_ref().map(|a| vec![0.0; a.texels.len()]),
            pose: PoseGrads::zero(avatar.model.skeleton.n_bones()),
        }
    }
}

/// Per-point gradients flowing out of the parallel phase, consumed by the
/// serial field/bone accumulation phase.
struct PointGrads {
    d_sh: [f64; SH_COEFFS],
    d_ao: f64,
    /// Gradient with respect to the shifted canonical center, excluding the
    /// brightness-field query path (handled serially).
    d_shifted: Vector3<f64>,
    d_blend: Affine3Grad,
    d_rotation: nalgebra::Vector4<f64>,
    d_log_scale: Vector3<f64>,
    d_opacity_logit: f64,
}

/// Full backward pass of [`render`]: loss gradients for the image propagate
/// to every trainable avatar parameter and the pose.
pub fn render_backward(
    avatar: &Avatar,
    pose: &Pose,
    cam: &Camera,
    settings: &RenderSettings,
    prepared: &AvatarSplats,
    buffers: &FrameBuffers,
    d_image: &[[f64; 3]],
) -> Result<AvatarGrads> {
    let model = &avatar.model;
    let cam_pos = camera_position(cam);
    let t = pose.time;

    let splat_grads = rasterize_backward(cam, &prepared.splats, buffers, d_image, settings.background)?;

    // Parallel phase: everything that only touches one point.
    let point_grads: Vec<PointGrads> = (0..model.n_points())
        .into_par_iter()
        .map(|i| {
            let c = &prepared.cache[i];
            let d_color = Vector3::new(
                splat_grads.d_color[i][0],
                splat_grads.d_color[i][1],
                splat_grads.d_color[i][2],
            );
            let (d_rgb, d_ao_raw) = apply_ao_backward(c.rgb, c.ao, d_color);
            let d_ao = if settings.ao_enabled { d_ao_raw } else { 0.0 };
            let (d_sh, d_dir_canonical) = eval_sh_backward(&c.sh, c.dir_canonical, d_rgb);

            let (d_blend_dir, d_dir_posed) =
                canonicalize_direction_backward(&c.blend, c.dir_posed, d_dir_canonical);

            // View direction: normalize(deformed - cam_pos).
            let mut d_deformed = splat_grads.d_center[i];
            let v = c.deformed - cam_pos;
            let n = v.norm();
            if n >= MIN_DIR_NORM {
                let u = v / n;
                d_deformed += (d_dir_posed - u * u.dot(&d_dir_posed)) / n;
            }

            // Covariance chain: cov = frame diag(exp 2s) frame^T,
            // frame = blend.linear * R(q).
            let r_canonical = quat_to_rot(model.rotation(i));
            let frame = deform_rotation(&c.blend, &r_canonical);
            let (d_frame, d_log_scale) =
                covariance_from_linear_backward(&frame, model.log_scale(i), &splat_grads.d_cov[i]);
            let (d_blend_linear_rot, d_r_canonical) =
                deform_rotation_backward(&c.blend, &r_canonical, &d_frame);
            let d_rotation = quat_to_rot_backward(model.rotation(i), &d_r_canonical);

            // Center chain: deformed = blend(shifted).
            let (d_blend_point, d_shifted) = deform_point_backward(&c.blend, c.shifted, d_deformed);

            let mut d_blend = Affine3Grad {
                linear: d_blend_dir + d_blend_linear_rot,
                translation: Vector3::zeros(),
            };
            d_blend.add(&d_blend_point);

            let d_opacity_logit =
                splat_grads.d_opacity[i] * sigmoid_grad_from_output(c.opacity);

            PointGrads {
                d_sh,
                d_ao,
                d_shifted,
                d_blend,
                d_rotation,
                d_log_scale,
                d_opacity_logit,
            }
        })
        .collect();

    // Serial phase: shared accumulators (field tables, atlas, bones) are
    // filled in point order.
    let mut out = AvatarGrads::zeros_like(avatar);
    let mut d_bones = vec![Affine3Grad::zero(); model.skeleton.n_bones()];
    let mut scratch = FieldScratch::default();
    for (i, pg) in point_grads.iter().enumerate() {
        let c = &prepared.cache[i];
        let x0 = model.center(i);

        let mut d_shifted = pg.d_shifted;
        if settings.ao_enabled && pg.d_ao != 0.0 {
            d_shifted +=
                avatar
                    .fields
                    .sample_ao_backward(c.shifted, t, pg.d_ao, &mut out.fields, &mut scratch);
        }

        let d_sh_field = match settings.sh_source {
            ShSource::Field => &pg.d_sh,
            ShSource::Atlas => {
                let (u, v) = model.uv_of(i).expect("validated in forward");
                let atlas = avatar.atlas.as_ref().expect("validated in forward");
                let d_texels = out.atlas.as_mut().expect("allocated with atlas");
                atlas.sample_backward(u, v, &pg.d_sh, d_texels);
                &[0.0; SH_COEFFS]
            }
        };
        // The field backward covers its own query paths; the caller shifted
        // the center by the displacement, so its gradient also reaches the
        // stored center directly.
        out.d_centers[i] = d_shifted
            + avatar.fields.sample_shape_appearance_backward(
                x0,
                d_sh_field,
                d_shifted,
                &mut out.fields,
                &mut scratch,
            );

        out.d_rotations[i] = pg.d_rotation;
        out.d_log_scales[i] = pg.d_log_scale;
        out.d_opacity_logits[i] = pg.d_opacity_logit;
        blend_transform_backward(&model.skin(i), &pg.d_blend, &mut d_bones);
    }

    out.pose = compute_bone_transforms_backward(&model.skeleton, pose, &d_bones);
    Ok(out)
}
