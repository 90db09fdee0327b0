//! ASCII point-cloud export for external viewers. Each gaussian becomes one
//! vertex: posed center, view-independent color, opacity.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::FieldScratch;
use crate::io::image::linear_to_srgb;
use crate::math::sigmoid;
use crate::render::{Avatar, ShSource};
use crate::shading::SH_BASIS;
use crate::skinning::{blend_transform, compute_bone_transforms, Pose};

/// Value of the constant spherical-harmonic basis function.
const Y00: f64 = 0.282_094_791_773_878_1;

/// Writes the avatar under `pose` as an ASCII point cloud. Colors are the
/// view-independent part of the appearance (the directional bands average
/// out over the sphere), so the export shows the base albedo.
pub fn export_ply(avatar: &Avatar, pose: &Pose, sh_source: ShSource, path: &Path) -> Result<()> {
    let model = &avatar.model;
    model.validate()?;
    if sh_source == ShSource::Atlas && (model.uv.is_none() || avatar.atlas.is_none()) {
        return Err(Error::Config(
            "atlas appearance needs uv coordinates and an atlas".into(),
        ));
    }
    let bones = compute_bone_transforms(&model.skeleton, pose)?;

    let file = std::fs::File::create(path).map_err(|e| Error::data_at(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::data_at(path, e.to_string());

    let n = model.n_points();
    writeln!(w, "ply").map_err(io_err)?;
    writeln!(w, "format ascii 1.0").map_err(io_err)?;
    writeln!(w, "element vertex {n}").map_err(io_err)?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}").map_err(io_err)?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(w, "property uchar {channel}").map_err(io_err)?;
    }
    writeln!(w, "property float opacity").map_err(io_err)?;
    writeln!(w, "end_header").map_err(io_err)?;

    let mut scratch = FieldScratch::default();
    for i in 0..n {
        let x0 = model.center(i);
        let shaped = avatar.fields.sample_shape_appearance(x0, &mut scratch);
        let shifted = x0 + shaped.displacement;
        let sh = match sh_source {
            ShSource::Field => shaped.sh,
            ShSource::Atlas => {
                let (u, v) = model.uv_of(i).expect("validated above");
                avatar.atlas.as_ref().expect("validated above").sample(u, v)
            }
        };
        let p = blend_transform(&model.skin(i), &bones).apply_point(shifted);
        let rgb: Vec<u8> = (0..3)
            .map(|c| linear_to_srgb(0.5 + sh[c * SH_BASIS] * Y00))
            .collect();
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            p.x,
            p.y,
            p.z,
            rgb[0],
            rgb[1],
            rgb[2],
            sigmoid(model.geometry(i).opacity_logit)
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
