//! Seeding a gaussian model from a skinned template: one point per vertex
//! plus a fixed number of extra points scattered in a small ball around it,
//! all inheriting the vertex's skin weights and uv.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::io::template::TemplateModel;
use crate::math::logit;
use crate::model::{GaussianGeometry, SkinWeights, SkinnedGaussianModel};

/// Starting opacity; low, so badly placed points fade instead of occluding.
pub const INIT_OPACITY: f64 = 0.1;

/// Fallback gaussian radius for a single-vertex template.
const LONE_VERTEX_RADIUS: f64 = 0.01;

/// Per-vertex radius: half the mean distance to the nearest up-to-3 other
/// vertices, shrunk by the cube root of the points-per-vertex count so the
/// scattered points tile the same volume.
fn vertex_radii(template: &TemplateModel, per_vertex: usize) -> Vec<f64> {
    let v = template.n_vertices();
    let k = 3.min(v - 1);
    let shrink = (per_vertex as f64).cbrt();
    (0..v)
        .map(|i| {
            if k == 0 {
                return LONE_VERTEX_RADIUS;
            }
            let p = template.vertex(i);
            let mut nearest = vec![f64::INFINITY; k];
            for j in 0..v {
                if j == i {
                    continue;
                }
                let q = template.vertex(j);
                let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt();
                // Bubble into the sorted nearest list.
                let mut cand = d;
                for slot in nearest.iter_mut() {
                    if cand < *slot {
                        std::mem::swap(&mut cand, slot);
                    }
                }
            }
            let mean = nearest.iter().sum::<f64>() / k as f64;
            0.5 * mean / shrink
        })
        .collect()
}

fn uniform_in_ball(rng: &mut impl Rng, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Builds the initial model: `upsampling` extra points per template vertex
/// (so `V * (upsampling + 1)` points total), identity rotations, isotropic
/// scales sized to the local vertex spacing, and uniformly low opacity.
pub fn init_from_template(
    template: &TemplateModel,
    upsampling: usize,
    scatter_radius: f64,
    seed: u64,
) -> Result<SkinnedGaussianModel> {
    template.validate()?;
    if !(scatter_radius > 0.0 && scatter_radius.is_finite()) {
        return Err(Error::InvalidParameter(
            "scatter radius must be positive".into(),
        ));
    }
    let v = template.n_vertices();
    let per_vertex = upsampling + 1;
    let radii = vertex_radii(template, per_vertex);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut model = SkinnedGaussianModel::with_capacity(template.skeleton.clone(), v * per_vertex);
    if template.uv.is_some() {
        model.uv = Some(Vec::with_capacity(2 * v * per_vertex));
    }
    let identity = Vector4::new(1.0, 0.0, 0.0, 0.0);
    let alpha = logit(INIT_OPACITY);
    for i in 0..v {
        let base = Vector3::from_column_slice(&template.vertex(i));
        let skin = SkinWeights {
            bones: template.skin_bones[i],
            weights: template.skin_weights[i],
        };
        let log_scale = Vector3::repeat(radii[i].ln());
        for j in 0..per_vertex {
            let center = if j == 0 {
                base
            } else {
                base + uniform_in_ball(&mut rng, scatter_radius)
            };
            let geom = GaussianGeometry::new(center, identity, log_scale, alpha)?;
            model.push(&geom, &skin);
            if let (Some(uv), Some(src)) = (model.uv.as_mut(), template.uv.as_ref()) {
                uv.extend_from_slice(&src[2 * i..2 * i + 2]);
            }
        }
    }
    model.validate()?;
    Ok(model)
}
