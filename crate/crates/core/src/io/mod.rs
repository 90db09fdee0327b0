//! Persistence: images, skinned templates, dataset manifests, checkpoints,
//! and point-cloud export.

pub mod checkpoint;
pub mod image;
pub mod manifest;
pub mod ply;
pub mod synth;
pub mod template;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use image::{linear_to_srgb, load_png, quantize, save_png, srgb_to_linear, Image};
pub use manifest::{
    save_manifest, CameraSpec, Dataset, DatasetCamera, FrameSpec, Manifest, PoseSpec, Split,
};
pub use ply::export_ply;
pub use synth::{generate_dataset, SynthConfig, SynthPaths, TEST_CAMERA_ID};
pub use template::{load_template, save_template, TemplateModel, WEIGHT_SUM_TOLERANCE};
