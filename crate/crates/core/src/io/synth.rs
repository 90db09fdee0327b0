//! Self-contained synthetic capture: a cylindrical three-bone body rendered
//! from a camera ring over a motion clip, written out as a dataset plus the
//! exact ground-truth avatar that produced it. Everything is derived from one
//! seed, so regeneration is byte-identical.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::fields::{Aabb, FieldBank, FieldBankConfig, HashGridConfig};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::io::image::{save_png, Image};
use crate::io::manifest::{save_manifest, CameraSpec, FrameSpec, Manifest, PoseSpec, Split};
use crate::io::template::{save_template, TemplateModel};
use crate::math::logit;
use crate::model::{GaussianGeometry, SkinWeights, SkinnedGaussianModel};
use crate::rasterizer::Camera;
use crate::render::{render, Avatar, RenderSettings, ShSource};
use crate::skinning::Skeleton;
use crate::training::TrainConfig;

/// Height of the body; bones sit at 0, half, and full height.
const BODY_HEIGHT: f64 = 0.7;
const BODY_RADIUS: f64 = 0.12;
/// Template tessellation.
const TEMPLATE_ROWS: usize = 17;
const TEMPLATE_SEGMENTS: usize = 14;
/// Camera ring.
const RING_RADIUS: f64 = 2.2;
/// Focal length at a 128 pixel image; scales linearly with resolution.
const FOCAL_AT_128: f64 = 230.0;
/// Brightness factor around which dimming oscillates.
const MEAN_BRIGHTNESS_FACTOR: f64 = 0.75;
/// Ground-truth gaussian size and opacity.
const GT_RADIUS: f64 = 0.009;
const GT_OPACITY: f64 = 0.9;

pub const TEST_CAMERA_ID: &str = "test";

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub n_train_cameras: usize,
    /// Square images of this side length.
    pub image_size: usize,
    /// Ground-truth gaussian count.
    pub n_points: usize,
    /// Relative brightness oscillation over time; 0 turns the effect off.
    pub dimming: f64,
    /// Gaussian position noise baked into the perturbed template copy.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_frames: 24,
            n_train_cameras: 6,
            image_size: 128,
            n_points: 5000,
            dimming: 0.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 || self.n_train_cameras == 0 || self.n_points == 0 {
            return Err(Error::Config(
                "synthetic capture needs at least 2 frames, 1 camera, and 1 point".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::Config("synthetic images must be at least 16 pixels".into()));
        }
        if !(0.0..1.0).contains(&self.dimming)
            || MEAN_BRIGHTNESS_FACTOR * (1.0 + self.dimming) >= 1.0
        {
            return Err(Error::Config(format!(
                "dimming {} pushes the brightness factor out of (0, 1)",
                self.dimming
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Files a generation run produces, all inside the output directory.
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub template: PathBuf,
    pub noisy_template: PathBuf,
    pub gt_checkpoint: PathBuf,
}

/// Pre-sigmoid coefficients of the time-dimming factor
/// `sigmoid(c0 + c1 cos(2 pi t))`, chosen so the factor swings between
/// `mean*(1-dimming)` and `mean*(1+dimming)`.
pub fn dimming_coefficients(dimming: f64) -> (f64, f64) {
    let lo = logit(MEAN_BRIGHTNESS_FACTOR * (1.0 - dimming));
    let hi = logit(MEAN_BRIGHTNESS_FACTOR * (1.0 + dimming));
    (0.5 * (lo + hi), 0.5 * (hi - lo))
}

fn body_skeleton() -> Skeleton {
    Skeleton::new(
        vec![None, Some(0), Some(1)],
        vec![
            0.0,
            0.0,
            0.0,
            0.0,
            BODY_HEIGHT / 2.0,
            0.0,
            0.0,
            BODY_HEIGHT,
            0.0,
        ],
    )
    .expect("static skeleton")
}

/// Smooth three-bone weights along the height: a tent around each joint.
fn height_weights(y: f64) -> [f64; 3] {
    let half = BODY_HEIGHT / 2.0;
    let mut w = [0.0; 3];
    for (k, wk) in w.iter_mut().enumerate() {
        let yk = half * k as f64;
        *wk = (1.0 - (y - yk).abs() / half).max(0.0);
    }
    let sum: f64 = w.iter().sum();
    [w[0] / sum, w[1] / sum, w[2] / sum]
}

fn height_skin(y: f64) -> SkinWeights {
    let w = height_weights(y);
    SkinWeights {
        bones: [0, 1, 2, 0],
        weights: [w[0], w[1], w[2], 0.0],
    }
}

/// The clean cylinder template: rows stacked along y, uv = (angle, height).
pub fn body_template() -> TemplateModel {
    let mut vertices = Vec::new();
    let mut skin_bones = Vec::new();
    let mut skin_weights = Vec::new();
    let mut uv = Vec::new();
    for row in 0..TEMPLATE_ROWS {
        let v = row as f64 / (TEMPLATE_ROWS - 1) as f64;
        let y = v * BODY_HEIGHT;
        for seg in 0..TEMPLATE_SEGMENTS {
            let u = seg as f64 / TEMPLATE_SEGMENTS as f64;
            let theta = 2.0 * PI * u;
            vertices.extend([BODY_RADIUS * theta.cos(), y, BODY_RADIUS * theta.sin()]);
            let s = height_skin(y);
            skin_bones.push(s.bones);
            skin_weights.push(s.weights);
            uv.extend([u, v]);
        }
    }
    TemplateModel {
        skeleton: body_skeleton(),
        vertices,
        skin_bones,
        skin_weights,
        uv: Some(uv),
    }
}

fn gt_field_config() -> FieldBankConfig {
    let grid = HashGridConfig {
        levels: 8,
        features: 2,
        table_size: 1 << 12,
        base_resolution: 4,
        max_resolution: 64,
    };
    FieldBankConfig {
        sh_grid: grid,
        disp_grid: grid,
        ao_grid: grid,
        mlp_hidden: 16,
        mlp_hidden_layers: 2,
        time_frequencies: 6,
        max_displacement: 0.02,
    }
}

/// Box-Muller, two uniforms to one normal sample.
fn normal_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Writes `sigmoid(c0 + c1 cos(2 pi t))` into an occlusion decoder: one
/// hidden unit relays the cosine component of the time encoding (biased far
/// into the linear range of the rectifier), everything else is zero.
fn craft_dimming_head(fields: &mut FieldBank, dimming: f64) {
    for v in fields.ao_grid.tables.iter_mut() {
        *v = 0.0;
    }
    let cfg = fields.ao_mlp.config;
    let params = &mut fields.ao_mlp.params;
    for p in params.iter_mut() {
        *p = 0.0;
    }
    let (c0, c1) = dimming_coefficients(dimming);
    let lift = 10.0;
    // cos(2 pi t) sits fourth in the interleaved time encoding, right after
    // the grid features.
    let cos_index = fields.config.ao_grid.encoded_len() + 3;
    params[cos_index] = 1.0; // first hidden unit, weight on the cosine
    let mut bias_off = cfg.input * cfg.hidden;
    params[bias_off] = lift;
    let mut off = bias_off + cfg.hidden;
    // Relay through the remaining hidden layers on unit 0.
    for _ in 1..cfg.hidden_layers {
        params[off] = 1.0;
        bias_off = off + cfg.hidden * cfg.hidden;
        off = bias_off + cfg.hidden;
    }
    // Head: scale by c1 and cancel the lift.
    params[off] = c1;
    params[off + cfg.hidden] = c0 - lift * c1;
}

/// Ground truth: points scattered on the cylinder surface, a smooth random
/// appearance field, no displacement, and the crafted dimming factor.
fn ground_truth_avatar(cfg: &SynthConfig, rng: &mut ChaCha12Rng) -> Result<Avatar> {
    let aabb = Aabb::new([-0.6, -0.4, -0.6], [0.6, 1.1, 0.6])?;
    let mut fields = FieldBank::init(gt_field_config(), aabb, rng)?;
    for v in fields.sh_grid.tables.iter_mut() {
        *v = rng.gen_range(-0.4..0.4);
    }
    // Randomize the appearance head (initialized to zero) so colors vary.
    let head = fields.sh_mlp.config.hidden * fields.sh_mlp.config.output
        + fields.sh_mlp.config.output;
    let n = fields.sh_mlp.params.len();
    for p in fields.sh_mlp.params[n - head..].iter_mut() {
        *p = rng.gen_range(-0.15..0.15);
    }
    // Keep only the constant band of each channel: the body is diffuse, the
    // way skin and cloth mostly are, so its appearance does not privilege
    // one parametrization over another.
    let (hidden, output) = (fields.sh_mlp.config.hidden, fields.sh_mlp.config.output);
    for r in (0..output).filter(|r| r % crate::shading::SH_BASIS != 0) {
        let row = n - head + r * hidden;
        fields.sh_mlp.params[row..row + hidden].fill(0.0);
        fields.sh_mlp.params[n - output + r] = 0.0;
    }
    craft_dimming_head(&mut fields, cfg.dimming);

    let skeleton = body_skeleton();
    let mut model = SkinnedGaussianModel::with_capacity(skeleton, cfg.n_points);
    model.uv = Some(Vec::with_capacity(2 * cfg.n_points));
    let identity = Vector4::new(1.0, 0.0, 0.0, 0.0);
    let log_scale = Vector3::repeat(GT_RADIUS.ln());
    let alpha = logit(GT_OPACITY);
    for _ in 0..cfg.n_points {
        let u: f64 = rng.gen_range(0.0..1.0);
        let v: f64 = rng.gen_range(0.0..1.0);
        let r = BODY_RADIUS + rng.gen_range(-0.004..0.004);
        let theta = 2.0 * PI * u;
        let y = v * BODY_HEIGHT;
        let center = Vector3::new(r * theta.cos(), y, r * theta.sin());
        let geom = GaussianGeometry::new(center, identity, log_scale, alpha)?;
        model.push(&geom, &height_skin(y));
        model.uv.as_mut().unwrap().extend([u, v]);
    }

    Ok(Avatar {
        model,
        fields,
        atlas: None,
    })
}

/// Smooth motion: each joint swings around two axes with seeded amplitudes
/// and phases; the root drifts slightly sideways.
struct MotionCurves {
    // (axis amplitude, phase) per bone, x and z.
    ax: Vec<(f64, f64)>,
    az: Vec<(f64, f64)>,
    root: (f64, f64),
}

impl MotionCurves {
    fn seeded(n_bones: usize, rng: &mut impl Rng) -> Self {
        let mut gen = |lo: f64, hi: f64| {
            let amp = rng.gen_range(lo..hi);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (amp, phase)
        };
        MotionCurves {
            ax: (0..n_bones).map(|_| gen(0.25, 0.45)).collect(),
            az: (0..n_bones).map(|_| gen(0.15, 0.3)).collect(),
            root: gen(0.01, 0.02),
        }
    }

    fn pose_at(&self, t: f64) -> PoseSpec {
        let swing = |&(amp, phase): &(f64, f64)| amp * (2.0 * PI * t + phase).sin();
        let mut omegas = vec![[0.0; 3]; self.ax.len()];
        // The root stays still so the ring cameras keep their framing.
        for b in 1..self.ax.len() {
            omegas[b] = [swing(&self.ax[b]), 0.0, swing(&self.az[b])];
        }
        PoseSpec {
            omegas,
            root_translation: [swing(&self.root), 0.0, 0.0],
        }
    }
}

fn ring_camera(angle: f64, size: usize) -> Camera {
    let focal = FOCAL_AT_128 * size as f64 / 128.0;
    let mid = BODY_HEIGHT / 2.0;
    let eye = Vector3::new(RING_RADIUS * angle.sin(), mid, RING_RADIUS * angle.cos());
    Camera::look_at(
        eye,
        Vector3::new(0.0, mid, 0.0),
        Vector3::y(),
        size,
        size,
        focal,
        focal,
    )
    .expect("ring camera is well formed")
}

/// Generates the full capture into `out_dir`: images, manifest, clean and
/// perturbed templates, and the ground-truth checkpoint.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthPaths> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::data_at(out_dir, e.to_string()))?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let avatar = ground_truth_avatar(cfg, &mut rng)?;
    let curves = MotionCurves::seeded(avatar.model.skeleton.n_bones(), &mut rng);

    let mut cameras: Vec<(String, Split, Camera)> = (0..cfg.n_train_cameras)
        .map(|i| {
            let angle = 2.0 * PI * i as f64 / cfg.n_train_cameras as f64;
            (format!("ring{i}"), Split::Train, ring_camera(angle, cfg.image_size))
        })
        .collect();
    // Held-out view halfway between the first two ring positions.
    let test_angle = PI / cfg.n_train_cameras as f64;
    cameras.push((
        TEST_CAMERA_ID.to_string(),
        Split::Test,
        ring_camera(test_angle, cfg.image_size),
    ));

    let settings = RenderSettings {
        background: [0.0, 0.0, 0.0],
        sh_source: ShSource::Field,
        ao_enabled: cfg.dimming > 0.0,
    };

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for f in 0..cfg.n_frames {
        let t = f as f64 / cfg.n_frames as f64;
        let spec = curves.pose_at(t);
        let pose = spec.to_pose(t)?;
        let mut images = BTreeMap::new();
        for (id, _, cam) in &cameras {
            let buffers = render(&avatar, &pose, cam, &settings)?;
            let img = Image::new(cam.width, cam.height, buffers.color)?;
            let rel = format!("images/{id}_f{f:03}.png");
            save_png(&img, &out_dir.join(&rel))?;
            images.insert(id.clone(), rel);
        }
        frames.push(FrameSpec {
            timestamp: t,
            poses: vec![spec],
            images,
        });
    }

    let manifest = Manifest {
        version: 1,
        background: settings.background,
        n_avatars: 1,
        cameras: cameras
            .iter()
            .map(|(id, split, cam)| CameraSpec::from_camera(id, *split, cam))
            .collect(),
        frames,
    };
    let paths = SynthPaths {
        manifest: out_dir.join("manifest.json"),
        template: out_dir.join("template.json"),
        noisy_template: out_dir.join("template_noisy.json"),
        gt_checkpoint: out_dir.join("gt_checkpoint.bin"),
    };
    save_manifest(&manifest, &paths.manifest)?;

    let template = body_template();
    save_template(&template, &paths.template)?;
    let mut noisy = template.clone();
    for v in noisy.vertices.iter_mut() {
        *v += cfg.noise_sigma * normal_sample(&mut rng);
    }
    save_template(&noisy, &paths.noisy_template)?;

    let train_config = TrainConfig {
        ao_enabled: cfg.dimming > 0.0,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    save_checkpoint(
        &Checkpoint {
            avatar,
            train_config,
            optimizer: None,
            epochs_done: 0,
        },
        &paths.gt_checkpoint,
    )?;
    Ok(paths)
}
