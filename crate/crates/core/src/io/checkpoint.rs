//! Checkpoints: one binary file holding the whole avatar, the training
//! configuration, and the optimizer state, so a run can resume bit-exactly.
//!
//! Layout: a magic tag and format version, a JSON header with every count
//! needed to size the payload, then raw little-endian arrays in a fixed
//! order. Floats round-trip exactly because they are never printed.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Aabb, Atlas, FieldBank, FieldBankConfig, HashGrid, Mlp};
use crate::model::SkinnedGaussianModel;
use crate::render::Avatar;
use crate::skinning::Skeleton;
use crate::training::{Adam, AdamMoments, TrainConfig};

const MAGIC: &[u8; 4] = b"GSAV";
const FORMAT_VERSION: u32 = 1;

/// Everything a training run needs to stop and restart.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub avatar: Avatar,
    pub train_config: TrainConfig,
    /// Absent for checkpoints that only carry a model (e.g. ground truth).
    pub optimizer: Option<Adam>,
    /// Epochs already completed; training resumes at the next one.
    pub epochs_done: u32,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    group_sizes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_points: usize,
    parents: Vec<i64>,
    has_uv: bool,
    /// (width, height) when the avatar carries a texture atlas.
    atlas: Option<(usize, usize)>,
    field_config: FieldBankConfig,
    aabb_min: [f64; 3],
    aabb_max: [f64; 3],
    train_config: TrainConfig,
    epochs_done: u32,
    adam: Option<AdamMeta>,
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_u16s<W: Write>(w: &mut W, values: impl Iterator<Item = u16>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::data(format!("checkpoint truncated inside {what}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u16s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u16>> {
    let mut bytes = vec![0u8; n * 2];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::data(format!("checkpoint truncated inside {what}")))?;
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let model = &ckpt.avatar.model;
    let fields = &ckpt.avatar.fields;
    model.validate()?;

    let header = Header {
        n_points: model.n_points(),
        parents: model
            .skeleton
            .parents
            .iter()
            .map(|p| p.map_or(-1, |b| b as i64))
            .collect(),
        has_uv: model.uv.is_some(),
        atlas: ckpt.avatar.atlas.as_ref().map(|a| (a.width, a.height)),
        field_config: fields.config,
        aabb_min: fields.aabb.min,
        aabb_max: fields.aabb.max,
        train_config: ckpt.train_config.clone(),
        epochs_done: ckpt.epochs_done,
        adam: ckpt.optimizer.as_ref().map(|adam| AdamMeta {
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            t: adam.t,
            group_sizes: adam.groups.iter().map(|g| g.m.len()).collect(),
        }),
    };
    let header_json = serde_json::to_vec(&header)?;

    let file = std::fs::File::create(path).map_err(|e| Error::data_at(path, e.to_string()))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io_err = |e: std::io::Error| Error::data_at(path, e.to_string());

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;

    write_f64s(&mut w, &model.skeleton.joints).map_err(io_err)?;
    write_f64s(&mut w, &model.centers).map_err(io_err)?;
    write_f64s(&mut w, &model.rotations).map_err(io_err)?;
    write_f64s(&mut w, &model.log_scales).map_err(io_err)?;
    write_f64s(&mut w, &model.opacity_logits).map_err(io_err)?;
    write_u16s(&mut w, model.skin_bones.iter().flatten().copied()).map_err(io_err)?;
    for row in &model.skin_weights {
        write_f64s(&mut w, row).map_err(io_err)?;
    }
    if let Some(uv) = &model.uv {
        write_f64s(&mut w, uv).map_err(io_err)?;
    }
    write_f64s(&mut w, &fields.sh_grid.tables).map_err(io_err)?;
    write_f64s(&mut w, &fields.sh_mlp.params).map_err(io_err)?;
    write_f64s(&mut w, &fields.disp_grid.tables).map_err(io_err)?;
    write_f64s(&mut w, &fields.disp_mlp.params).map_err(io_err)?;
    write_f64s(&mut w, &fields.ao_grid.tables).map_err(io_err)?;
    write_f64s(&mut w, &fields.ao_mlp.params).map_err(io_err)?;
    if let Some(atlas) = &ckpt.avatar.atlas {
        write_f64s(&mut w, &atlas.texels).map_err(io_err)?;
    }
    if let Some(adam) = &ckpt.optimizer {
        for group in &adam.groups {
            write_f64s(&mut w, &group.m).map_err(io_err)?;
            write_f64s(&mut w, &group.v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::data_at(path, e.to_string()))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let at = |msg: String| Error::data_at(path, msg);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| at("file too short for the magic tag".into()))?;
    if &magic != MAGIC {
        return Err(at("not a checkpoint file (bad magic tag)".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)
        .map_err(|_| at("file too short for the format version".into()))?;
    let version = u32::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(at(format!(
            "checkpoint format version {version} is not supported (this build reads {FORMAT_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| at("file too short for the header length".into()))?;
    let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_json)
        .map_err(|_| at("checkpoint truncated inside the header".into()))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| at(format!("malformed checkpoint header: {e}")))?;

    header.field_config.validate()?;
    let n = header.n_points;
    let n_bones = header.parents.len();
    let mut parents = Vec::with_capacity(n_bones);
    for (i, &p) in header.parents.iter().enumerate() {
        parents.push(match p {
            -1 => None,
            p if p >= 0 && (p as usize) < n_bones => Some(p as u16),
            p => return Err(at(format!("bone {i} has out-of-range parent {p}"))),
        });
    }

    let joints = read_f64s(&mut r, 3 * n_bones, "joints")?;
    let skeleton = Skeleton::new(parents, joints)?;
    let centers = read_f64s(&mut r, 3 * n, "centers")?;
    let rotations = read_f64s(&mut r, 4 * n, "rotations")?;
    let log_scales = read_f64s(&mut r, 3 * n, "scales")?;
    let opacity_logits = read_f64s(&mut r, n, "opacities")?;
    let skin_bones = read_u16s(&mut r, 4 * n, "skin bones")?
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let skin_weights = read_f64s(&mut r, 4 * n, "skin weights")?
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let uv = if header.has_uv {
        Some(read_f64s(&mut r, 2 * n, "uv")?)
    } else {
        None
    };
    let model = SkinnedGaussianModel {
        skeleton,
        centers,
        rotations,
        log_scales,
        opacity_logits,
        skin_bones,
        skin_weights,
        uv,
    };
    model.validate()?;

    let cfg = header.field_config;
    let sh_tables = read_f64s(&mut r, cfg.sh_grid.table_len(), "appearance tables")?;
    let sh_mlp = read_f64s(&mut r, cfg.sh_mlp().n_params(), "appearance head")?;
    let disp_tables = read_f64s(&mut r, cfg.disp_grid.table_len(), "displacement tables")?;
    let disp_mlp = read_f64s(&mut r, cfg.disp_mlp().n_params(), "displacement head")?;
    let ao_tables = read_f64s(&mut r, cfg.ao_grid.table_len(), "occlusion tables")?;
    let ao_mlp = read_f64s(&mut r, cfg.ao_mlp().n_params(), "occlusion head")?;
    let fields = FieldBank {
        config: cfg,
        aabb: Aabb::new(header.aabb_min, header.aabb_max)?,
        sh_grid: HashGrid::from_tables(cfg.sh_grid, sh_tables)?,
        sh_mlp: Mlp::from_params(cfg.sh_mlp(), sh_mlp)?,
        disp_grid: HashGrid::from_tables(cfg.disp_grid, disp_tables)?,
        disp_mlp: Mlp::from_params(cfg.disp_mlp(), disp_mlp)?,
        ao_grid: HashGrid::from_tables(cfg.ao_grid, ao_tables)?,
        ao_mlp: Mlp::from_params(cfg.ao_mlp(), ao_mlp)?,
    };

    let atlas = header
        .atlas
        .map(|(w, h)| {
            let texels = read_f64s(&mut r, w * h * crate::shading::SH_COEFFS, "atlas")?;
            Atlas::from_texels(w, h, texels)
        })
        .transpose()?;

    let optimizer = header
        .adam
        .map(|meta| -> Result<Adam> {
            let mut groups = Vec::with_capacity(meta.group_sizes.len());
            for (i, &size) in meta.group_sizes.iter().enumerate() {
                groups.push(AdamMoments {
                    m: read_f64s(&mut r, size, &format!("optimizer group {i} first moment"))?,
                    v: read_f64s(&mut r, size, &format!("optimizer group {i} second moment"))?,
                });
            }
            Ok(Adam {
                beta1: meta.beta1,
                beta2: meta.beta2,
                epsilon: meta.epsilon,
                t: meta.t,
                groups,
            })
        })
        .transpose()?;

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| at(e.to_string()))? != 0 {
        return Err(at("checkpoint has trailing bytes after the last section".into()));
    }

    header.train_config.validate()?;
    Ok(Checkpoint {
        avatar: Avatar {
            model,
            fields,
            atlas,
        },
        train_config: header.train_config,
        optimizer,
        epochs_done: header.epochs_done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render, RenderSettings};
    use crate::testkit::{bent_pose, test_avatar, test_camera};

    fn toy_checkpoint() -> Checkpoint {
        let avatar = test_avatar(11, 8, true);
        let mut adam = Adam::new(&[4, 7]);
        adam.t = 42;
        for g in adam.groups.iter_mut() {
            for (i, m) in g.m.iter_mut().enumerate() {
                *m = 0.01 * (i as f64 + 1.0);
            }
            for (i, v) in g.v.iter_mut().enumerate() {
                *v = 0.001 * (i as f64 + 1.0);
            }
        }
        Checkpoint {
            avatar,
            train_config: TrainConfig::default(),
            optimizer: Some(adam),
            epochs_done: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_including_optimizer_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = toy_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();

        assert_eq!(back.avatar.model, ckpt.avatar.model);
        assert_eq!(back.avatar.fields.sh_grid, ckpt.avatar.fields.sh_grid);
        assert_eq!(back.avatar.fields.sh_mlp.params, ckpt.avatar.fields.sh_mlp.params);
        assert_eq!(back.avatar.fields.disp_grid, ckpt.avatar.fields.disp_grid);
        assert_eq!(back.avatar.fields.disp_mlp.params, ckpt.avatar.fields.disp_mlp.params);
        assert_eq!(back.avatar.fields.ao_grid, ckpt.avatar.fields.ao_grid);
        assert_eq!(back.avatar.fields.ao_mlp.params, ckpt.avatar.fields.ao_mlp.params);
        assert_eq!(
            back.avatar.atlas.as_ref().unwrap().texels,
            ckpt.avatar.atlas.as_ref().unwrap().texels
        );
        assert_eq!(back.epochs_done, 3);

        let (a, b) = (back.optimizer.unwrap(), ckpt.optimizer.unwrap());
        assert_eq!(a.t, b.t);
        assert_eq!(a.groups.len(), b.groups.len());
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            assert_eq!(ga.m, gb.m);
            assert_eq!(ga.v, gb.v);
        }
    }

    #[test]
    fn model_only_checkpoint_round_trips_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut ckpt = toy_checkpoint();
        ckpt.optimizer = None;
        ckpt.avatar = test_avatar(12, 5, false);
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.optimizer.is_none());
        assert!(back.avatar.atlas.is_none());
        assert_eq!(back.avatar.model, ckpt.avatar.model);
    }

    #[test]
    fn loaded_avatar_renders_the_same_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = toy_checkpoint();
        let pose = bent_pose();
        let cam = test_camera();
        let settings = RenderSettings::default();
        let before = render(&ckpt.avatar, &pose, &cam, &settings).unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let after = render(&back.avatar, &pose, &cam, &settings).unwrap();
        assert_eq!(before.color, after.color);
    }

    #[test]
    fn truncated_file_reports_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn foreign_files_and_future_versions_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        std::fs::write(&path, b"PK\x03\x04 definitely a zip").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
