//! The optimization loop: initialize an avatar from a template, then sweep
//! shuffled (frame, camera) pairs for a fixed number of epochs, descending on
//! the mixed photometric loss. Every source of randomness is seeded and the
//! gradient accumulation is ordered, so a run is reproducible bit for bit at
//! any thread count, and resuming from a checkpoint matches a straight run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{Aabb, Atlas, FieldBank};
use crate::io::checkpoint::Checkpoint;
use crate::io::image::{quantize, Image};
use crate::io::manifest::{Dataset, Split};
use crate::io::template::TemplateModel;
use crate::render::{
    deform_and_shade, render, render_backward, Avatar, AvatarGrads, RenderSettings, ShSource,
};
use crate::rasterizer::rasterize_forward;
use crate::skinning::Pose;
use crate::training::{
    init_from_template, psnr, renormalize_quaternions, ssim, total_loss_with_grad, Adam,
    LearningRates, TrainConfig,
};

/// Box margin around the initial cloud, as a fraction of its largest side.
/// Leaves room for displacement and for centers drifting during descent.
const FIELD_BOX_MARGIN: f64 = 0.3;

/// One optimizer update, as reported to progress callbacks.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    /// 1-based epoch this step belongs to.
    pub epoch: usize,
    /// 1-based step index within this run.
    pub step: usize,
    pub frame: usize,
    pub camera: String,
    pub loss: f64,
    pub psnr: f64,
    /// True when a parameter group was left untouched because its gradient
    /// came back non-finite.
    pub skipped: bool,
}

/// Parameter group order inside the optimizer. Frozen: checkpoints store
/// moments per group by index.
const GROUPS: usize = 12;

fn group_sizes(avatar: &Avatar) -> [usize; GROUPS] {
    let model = &avatar.model;
    [
        model.centers.len(),
        model.rotations.len(),
        model.log_scales.len(),
        model.opacity_logits.len(),
        model.skeleton.joints.len(),
        avatar.fields.sh_grid.tables.len(),
        avatar.fields.sh_mlp.params.len(),
        avatar.fields.disp_grid.tables.len(),
        avatar.fields.disp_mlp.params.len(),
        avatar.fields.ao_grid.tables.len(),
        avatar.fields.ao_mlp.params.len(),
        avatar.atlas.as_ref().map_or(0, |a| a.texels.len()),
    ]
}

/// Builds the starting checkpoint: template-seeded points, fresh fields
/// sized to the cloud, an optional blank atlas, and zeroed optimizer state.
pub fn initialize(template: &TemplateModel, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = init_from_template(template, cfg.upsampling, cfg.init_radius, cfg.seed)?;
    if cfg.sh_source == ShSource::Atlas && model.uv.is_none() {
        return Err(Error::Config(
            "texture-based appearance needs a template with uv coordinates".into(),
        ));
    }
    let aabb = Aabb::around_points(
        (0..model.n_points()).map(|i| model.center(i)),
        FIELD_BOX_MARGIN,
    )?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let fields = FieldBank::init(cfg.field_config, aabb, &mut rng)?;
    let atlas = (cfg.sh_source == ShSource::Atlas)
        .then(|| Atlas::new(cfg.atlas_size, cfg.atlas_size))
        .transpose()?;
    let avatar = Avatar {
        model,
        fields,
        atlas,
    };
    let optimizer = Adam::new(&group_sizes(&avatar));
    Ok(Checkpoint {
        avatar,
        train_config: cfg.clone(),
        optimizer: Some(optimizer),
        epochs_done: 0,
    })
}

/// One optimizer sweep over all groups. Occlusion groups are excluded while
/// the factor is frozen so their parameters and moments stay bit-identical.
fn apply_updates(
    avatar: &mut Avatar,
    adam: &mut Adam,
    grads: &AvatarGrads,
    rates: &LearningRates,
    ao_active: bool,
) -> Result<bool> {
    adam.advance();
    let flat3 = |v: &[nalgebra::Vector3<f64>]| -> Vec<f64> {
        v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    };
    let d_centers = flat3(&grads.d_centers);
    let d_rotations: Vec<f64> = grads
        .d_rotations
        .iter()
        .flat_map(|q| [q.x, q.y, q.z, q.w])
        .collect();
    let d_log_scales = flat3(&grads.d_log_scales);
    let d_joints = flat3(&grads.pose.joints);

    let model = &mut avatar.model;
    let fields = &mut avatar.fields;
    let mut ok = true;
    ok &= adam.update_group(0, &mut model.centers, &d_centers, rates.centers)?;
    ok &= adam.update_group(1, &mut model.rotations, &d_rotations, rates.rotations)?;
    ok &= adam.update_group(2, &mut model.log_scales, &d_log_scales, rates.log_scales)?;
    ok &= adam.update_group(
        3,
        &mut model.opacity_logits,
        &grads.d_opacity_logits,
        rates.opacities,
    )?;
    ok &= adam.update_group(4, &mut model.skeleton.joints, &d_joints, rates.joints)?;
    ok &= adam.update_group(5, &mut fields.sh_grid.tables, &grads.fields.sh_tables, rates.hash_tables)?;
    ok &= adam.update_group(6, &mut fields.sh_mlp.params, &grads.fields.sh_mlp, rates.mlps)?;
    ok &= adam.update_group(7, &mut fields.disp_grid.tables, &grads.fields.disp_tables, rates.hash_tables)?;
    ok &= adam.update_group(8, &mut fields.disp_mlp.params, &grads.fields.disp_mlp, rates.mlps)?;
    if ao_active {
        ok &= adam.update_group(9, &mut fields.ao_grid.tables, &grads.fields.ao_tables, rates.hash_tables)?;
        ok &= adam.update_group(10, &mut fields.ao_mlp.params, &grads.fields.ao_mlp, rates.mlps)?;
    }
    if let (Some(atlas), Some(d_atlas)) = (avatar.atlas.as_mut(), grads.atlas.as_ref()) {
        ok &= adam.update_group(11, &mut atlas.texels, d_atlas, rates.atlas)?;
    }
    renormalize_quaternions(&mut model.rotations);
    Ok(!ok)
}

/// Trains the checkpoint in place against the dataset's training split,
/// from the epoch after `epochs_done` up to the configured total. Calls
/// `progress` after every optimizer step.
pub fn fit(
    ckpt: &mut Checkpoint,
    dataset: &Dataset,
    mut progress: impl FnMut(&StepRecord),
) -> Result<()> {
    let cfg = ckpt.train_config.clone();
    cfg.validate()?;
    if dataset.n_avatars != 1 {
        return Err(Error::Config(format!(
            "training fits one avatar; the dataset records {}",
            dataset.n_avatars
        )));
    }
    let Checkpoint {
        avatar,
        optimizer,
        epochs_done,
        ..
    } = ckpt;
    let adam = optimizer
        .as_mut()
        .ok_or_else(|| Error::Config("checkpoint carries no optimizer state to resume".into()))?;
    let sizes = group_sizes(avatar);
    if adam.groups.len() != GROUPS
        || adam.groups.iter().zip(&sizes).any(|(g, &s)| g.m.len() != s)
    {
        return Err(Error::Config(
            "optimizer state does not match the model layout".into(),
        ));
    }

    // Every (frame, train camera) pair that has an image, in a fixed order.
    let train_cams: Vec<usize> = (0..dataset.cameras.len())
        .filter(|&c| dataset.cameras[c].split == Split::Train)
        .collect();
    let mut pairs = Vec::new();
    for f in 0..dataset.frames.len() {
        for &c in &train_cams {
            if dataset.frames[f].images.contains_key(&dataset.cameras[c].id) {
                pairs.push((f, c));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config("the dataset has no training images".into()));
    }
    let targets: Vec<Image> = pairs
        .iter()
        .map(|&(f, c)| dataset.load_image(f, &dataset.cameras[c].id))
        .collect::<Result<_>>()?;

    let mut step = 0usize;
    for epoch in (*epochs_done as usize + 1)..=cfg.epochs {
        let ao_active = cfg.ao_enabled && epoch >= cfg.ao_start_epoch;
        let settings = RenderSettings {
            background: dataset.background,
            sh_source: cfg.sh_source,
            ao_enabled: ao_active,
        };
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);

        for pi in order {
            let (frame, cam_idx) = pairs[pi];
            let cam = &dataset.cameras[cam_idx];
            let pose = dataset.pose(frame, 0)?;
            let prepared = deform_and_shade(avatar, &pose, &cam.camera, &settings)?;
            let buffers = rasterize_forward(&cam.camera, &prepared.splats, settings.background);
            let target = &targets[pi];
            let (loss, d_image) = total_loss_with_grad(
                cam.camera.width,
                cam.camera.height,
                &buffers.color,
                &target.pixels,
                &cfg.loss,
            )?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}, frame {frame}, camera {}",
                    cam.id
                )));
            }
            let step_psnr = psnr(&buffers.color, &target.pixels)?;
            let grads = render_backward(
                avatar, &pose, &cam.camera, &settings, &prepared, &buffers, &d_image,
            )?;
            let skipped = apply_updates(avatar, adam, &grads, &cfg.rates, ao_active)?;

            step += 1;
            progress(&StepRecord {
                epoch,
                step,
                frame,
                camera: cam.id.clone(),
                loss,
                psnr: step_psnr,
                skipped,
            });
        }
        *epochs_done = epoch as u32;
    }
    Ok(())
}

/// Quality of one rendered view against its captured image.
#[derive(Debug, Clone, Serialize)]
pub struct FrameScore {
    pub frame: usize,
    pub camera: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Renders every (frame, camera) pair of the chosen split and scores it
/// against the stored image. Renders are quantized through the image
/// encoding first so a pixel-perfect model reaches the metric cap exactly.
pub fn evaluate(
    avatar: &Avatar,
    dataset: &Dataset,
    split: Split,
    settings: &RenderSettings,
    loss_cfg: &crate::training::LossConfig,
) -> Result<EvalReport> {
    let mut frames = Vec::new();
    for f in 0..dataset.frames.len() {
        for cam in dataset.cameras_in(split) {
            if !dataset.frames[f].images.contains_key(&cam.id) {
                continue;
            }
            let pose = dataset.pose(f, 0)?;
            let buffers = render(avatar, &pose, &cam.camera, settings)?;
            let rendered = quantize(&Image::new(
                cam.camera.width,
                cam.camera.height,
                buffers.color,
            )?);
            let stored = dataset.load_image(f, &cam.id)?;
            frames.push(FrameScore {
                frame: f,
                camera: cam.id.clone(),
                psnr: psnr(&rendered.pixels, &stored.pixels)?,
                ssim: ssim(
                    cam.camera.width,
                    cam.camera.height,
                    &rendered.pixels,
                    &stored.pixels,
                    loss_cfg,
                )?,
            });
        }
    }
    if frames.is_empty() {
        return Err(Error::Config(
            "the dataset has no images in the requested split".into(),
        ));
    }
    let n = frames.len() as f64;
    let mean_psnr = frames.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = frames.iter().map(|s| s.ssim).sum::<f64>() / n;
    Ok(EvalReport {
        frames,
        mean_psnr,
        mean_ssim,
    })
}

/// Pose of one dataset frame; a convenience for render-style commands.
pub fn dataset_pose(dataset: &Dataset, frame: usize) -> Result<Pose> {
    dataset.pose(frame, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
    use crate::io::synth::{generate_dataset, SynthConfig};
    use crate::io::template::load_template;
    use crate::testkit::small_field_config;

    fn tiny_dataset(dir: &std::path::Path, dimming: f64, seed: u64) -> (Dataset, TemplateModel) {
        let cfg = SynthConfig {
            n_frames: 3,
            n_train_cameras: 2,
            image_size: 32,
            n_points: 250,
            dimming,
            noise_sigma: 0.01,
            seed,
        };
        let paths = generate_dataset(&cfg, dir).unwrap();
        (
            Dataset::load(&paths.manifest).unwrap(),
            load_template(&paths.noisy_template).unwrap(),
        )
    }

    fn tiny_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ao_start_epoch: 2,
            field_config: small_field_config(),
            atlas_size: 16,
            upsampling: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initialization_matches_the_optimizer_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (_, template) = tiny_dataset(dir.path(), 0.0, 1);
        let ckpt = initialize(&template, &tiny_train_config(1)).unwrap();
        let adam = ckpt.optimizer.as_ref().unwrap();
        let sizes = group_sizes(&ckpt.avatar);
        assert_eq!(adam.groups.len(), sizes.len());
        for (g, s) in adam.groups.iter().zip(sizes) {
            assert_eq!(g.m.len(), s);
        }
        // Field mode: no atlas, group 11 empty.
        assert_eq!(sizes[11], 0);
        assert_eq!(ckpt.avatar.model.n_points(), 238 * 2);
    }

    #[test]
    fn atlas_mode_initialization_needs_uvs() {
        let dir = tempfile::tempdir().unwrap();
        let (_, template) = tiny_dataset(dir.path(), 0.0, 2);
        let mut cfg = tiny_train_config(1);
        cfg.sh_source = ShSource::Atlas;
        let ckpt = initialize(&template, &cfg).unwrap();
        assert_eq!(
            ckpt.avatar.atlas.as_ref().unwrap().texels.len(),
            16 * 16 * crate::shading::SH_COEFFS
        );

        let mut bald = template.clone();
        bald.uv = None;
        assert!(initialize(&bald, &cfg).is_err());
    }

    #[test]
    fn loss_decreases_over_training() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, template) = tiny_dataset(dir.path(), 0.0, 3);
        let mut cfg = tiny_train_config(3);
        cfg.ao_enabled = false;
        let mut ckpt = initialize(&template, &cfg).unwrap();
        let mut records: Vec<StepRecord> = Vec::new();
        fit(&mut ckpt, &dataset, |r| records.push(r.clone())).unwrap();
        assert_eq!(ckpt.epochs_done, 3);
        let per_epoch = |e: usize| {
            let v: Vec<f64> = records.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(
            per_epoch(3) < per_epoch(1),
            "epoch means {} -> {}",
            per_epoch(1),
            per_epoch(3)
        );
        assert!(records.iter().all(|r| !r.skipped));
    }

    #[test]
    fn frozen_occlusion_epochs_leave_its_parameters_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, template) = tiny_dataset(dir.path(), 0.2, 4);
        let mut cfg = tiny_train_config(1);
        cfg.ao_start_epoch = 5; // never reached in one epoch
        let mut ckpt = initialize(&template, &cfg).unwrap();
        let tables_before = ckpt.avatar.fields.ao_grid.tables.clone();
        let mlp_before = ckpt.avatar.fields.ao_mlp.params.clone();
        fit(&mut ckpt, &dataset, |_| {}).unwrap();
        assert_eq!(ckpt.avatar.fields.ao_grid.tables, tables_before);
        assert_eq!(ckpt.avatar.fields.ao_mlp.params, mlp_before);
        let adam = ckpt.optimizer.as_ref().unwrap();
        assert!(adam.groups[9].m.iter().all(|&v| v == 0.0));
        assert!(adam.groups[10].v.iter().all(|&v| v == 0.0));
        // Everything else moved.
        assert!(adam.groups[0].m.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn completed_checkpoint_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, template) = tiny_dataset(dir.path(), 0.0, 5);
        let mut ckpt = initialize(&template, &tiny_train_config(1)).unwrap();
        fit(&mut ckpt, &dataset, |_| {}).unwrap();
        let frozen = ckpt.avatar.clone();
        let mut calls = 0;
        fit(&mut ckpt, &dataset, |_| calls += 1).unwrap();
        assert_eq!(calls, 0);
        assert_eq!(ckpt.avatar, frozen);
    }

    #[test]
    fn resuming_from_disk_matches_an_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, template) = tiny_dataset(dir.path(), 0.0, 6);

        let mut straight = initialize(&template, &tiny_train_config(2)).unwrap();
        fit(&mut straight, &dataset, |_| {}).unwrap();

        let mut resumed = initialize(&template, &tiny_train_config(2)).unwrap();
        resumed.train_config.epochs = 1;
        fit(&mut resumed, &dataset, |_| {}).unwrap();
        let path = dir.path().join("mid.bin");
        save_checkpoint(&resumed, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        resumed.train_config.epochs = 2;
        fit(&mut resumed, &dataset, |_| {}).unwrap();

        assert_eq!(straight.avatar, resumed.avatar);
        let (a, b) = (
            straight.optimizer.as_ref().unwrap(),
            resumed.optimizer.as_ref().unwrap(),
        );
        assert_eq!(a.t, b.t);
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            assert_eq!(ga.m, gb.m);
            assert_eq!(ga.v, gb.v);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, template) = tiny_dataset(dir.path(), 0.0, 7);
        let run = || {
            let mut ckpt = initialize(&template, &tiny_train_config(2)).unwrap();
            let mut losses = Vec::new();
            fit(&mut ckpt, &dataset, |r| losses.push(r.loss)).unwrap();
            (ckpt, losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a.avatar, b.avatar);
    }

    #[test]
    fn evaluation_scores_the_held_out_split() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, _) = tiny_dataset(dir.path(), 0.0, 8);
        let ckpt = load_checkpoint(&dir.path().join("gt_checkpoint.bin")).unwrap();
        let settings = RenderSettings {
            background: dataset.background,
            sh_source: ShSource::Field,
            ao_enabled: ckpt.train_config.ao_enabled,
        };
        let report = evaluate(
            &ckpt.avatar,
            &dataset,
            Split::Test,
            &settings,
            &ckpt.train_config.loss,
        )
        .unwrap();
        // The ground truth reproduces its own images exactly.
        assert_eq!(report.frames.len(), 3);
        assert_eq!(report.mean_psnr, crate::training::PSNR_CAP);
        assert!(report.mean_ssim > 0.999);
    }
}
