//! Shared fixtures for unit tests: a small seeded avatar, a camera that
//! frames it, and a mildly bent pose. Kept out of the public API.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::fields::{Aabb, Atlas, FieldBank, FieldBankConfig, HashGridConfig};
use crate::model::{GaussianGeometry, SkinWeights, SkinnedGaussianModel};
use crate::rasterizer::Camera;
use crate::render::Avatar;
use crate::skinning::{Pose, Skeleton};

pub(crate) fn small_field_config() -> FieldBankConfig {
    let grid = HashGridConfig {
        levels: 3,
        features: 2,
        table_size: 1 << 8,
        base_resolution: 2,
        max_resolution: 8,
    };
    FieldBankConfig {
        sh_grid: grid,
        disp_grid: grid,
        ao_grid: grid,
        mlp_hidden: 8,
        mlp_hidden_layers: 1,
        time_frequencies: 4,
        max_displacement: 0.05,
    }
}

/// Two-bone avatar with a handful of points around the bone line.
pub(crate) fn test_avatar(seed: u64, n_points: usize, with_uv: bool) -> Avatar {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let skeleton = Skeleton::new(
        vec![None, Some(0)],
        vec![0.0, 0.0, 0.0, 0.0, 0.4, 0.0],
    )
    .unwrap();
    let mut model = SkinnedGaussianModel::with_capacity(skeleton, n_points);
    if with_uv {
        model.uv = Some(Vec::new());
    }
    for _ in 0..n_points {
        let y: f64 = rng.gen_range(0.0..0.8);
        let center = Vector3::new(rng.gen_range(-0.1..0.1), y, rng.gen_range(-0.1..0.1));
        let w1 = (y / 0.8).clamp(0.05, 0.95);
        let skin = SkinWeights::new(&[(0, 1.0 - w1), (1, w1)]).unwrap();
        let q = Vector4::new(
            1.0,
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        let log_scale = Vector3::new(
            rng.gen_range(-3.6..-3.0),
            rng.gen_range(-3.6..-3.0),
            rng.gen_range(-3.6..-3.0),
        );
        let logit = rng.gen_range(-1.5..0.5);
        let geom = GaussianGeometry::new(center, q, log_scale, logit).unwrap();
        model.push(&geom, &skin);
        if let Some(uv) = model.uv.as_mut() {
            uv.push(rng.gen_range(0.1..0.9));
            uv.push(rng.gen_range(0.1..0.9));
        }
    }

    let aabb = Aabb::new([-0.5, -0.5, -0.5], [0.5, 1.3, 0.5]).unwrap();
    let mut fields = FieldBank::init(small_field_config(), aabb, &mut rng).unwrap();
    for tbl in [
        &mut fields.sh_grid.tables,
        &mut fields.disp_grid.tables,
        &mut fields.ao_grid.tables,
    ] {
        for v in tbl.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    for m in [&mut fields.sh_mlp, &mut fields.disp_mlp, &mut fields.ao_mlp] {
        for v in m.params.iter_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }

    let atlas = if with_uv {
        let mut a = Atlas::new(4, 4).unwrap();
        for v in a.texels.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        Some(a)
    } else {
        None
    };
    Avatar {
        model,
        fields,
        atlas,
    }
}

pub(crate) fn test_camera() -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.4, -2.0),
        Vector3::new(0.0, 0.4, 0.0),
        Vector3::y(),
        32,
        32,
        40.0,
        40.0,
    )
    .unwrap()
}

pub(crate) fn bent_pose() -> Pose {
    Pose::new(
        vec![Vector3::new(0.1, -0.05, 0.2), Vector3::new(-0.3, 0.1, 0.4)],
        Vector3::new(0.02, -0.01, 0.03),
        0.35,
    )
    .unwrap()
}
