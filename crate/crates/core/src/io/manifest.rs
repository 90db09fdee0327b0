//! Multi-view capture datasets: a JSON manifest naming cameras, per-frame
//! poses, and image files, all resolved relative to the manifest's directory.
//!
//! Loading validates the whole structure eagerly so a training run fails at
//! startup instead of mid-epoch: camera ids must be unique, every frame must
//! carry one pose per avatar, timestamps must increase strictly, and every
//! referenced image file must exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::image::{load_png, Image};
use crate::math::Affine3;
use crate::rasterizer::Camera;
use crate::skinning::Pose;

/// Camera-space depth below which splats are culled when rendering dataset views.
pub const DATASET_Z_NEAR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: String,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major rows.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: [f64; 3],
}

impl CameraSpec {
    pub fn to_camera(&self) -> Result<Camera> {
        let linear = Matrix3::from_fn(|r, c| self.rotation[r][c]);
        let translation = Vector3::from_column_slice(&self.translation);
        Camera::new(
            self.width,
            self.height,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Affine3::new(linear, translation),
            DATASET_Z_NEAR,
        )
    }

    pub fn from_camera(id: &str, split: Split, cam: &Camera) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r][c] = cam.world_to_camera.linear[(r, c)];
            }
        }
        CameraSpec {
            id: id.to_string(),
            split,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation,
            translation: [
                cam.world_to_camera.translation.x,
                cam.world_to_camera.translation.y,
                cam.world_to_camera.translation.z,
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseSpec {
    pub omegas: Vec<[f64; 3]>,
    pub root_translation: [f64; 3],
}

impl PoseSpec {
    pub fn to_pose(&self, time: f64) -> Result<Pose> {
        Pose::new(
            self.omegas
                .iter()
                .map(|o| Vector3::from_column_slice(o))
                .collect(),
            Vector3::from_column_slice(&self.root_translation),
            time,
        )
    }

    pub fn from_pose(pose: &Pose) -> Self {
        PoseSpec {
            omegas: pose.omegas.iter().map(|o| [o.x, o.y, o.z]).collect(),
            root_translation: [
                pose.root_translation.x,
                pose.root_translation.y,
                pose.root_translation.z,
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameSpec {
    /// Normalized capture time in [0, 1].
    pub timestamp: f64,
    /// One pose per avatar, in avatar order.
    pub poses: Vec<PoseSpec>,
    /// Camera id to image path, relative to the manifest.
    pub images: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub background: [f64; 3],
    pub n_avatars: usize,
    pub cameras: Vec<CameraSpec>,
    pub frames: Vec<FrameSpec>,
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)
        .map_err(|e| Error::data_at(path, e.to_string()))
}

/// A camera with its manifest identity attached.
#[derive(Debug, Clone)]
pub struct DatasetCamera {
    pub id: String,
    pub split: Split,
    pub camera: Camera,
}

/// A loaded, validated dataset. Images stay on disk until asked for.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub background: [f64; 3],
    pub n_avatars: usize,
    pub cameras: Vec<DatasetCamera>,
    pub frames: Vec<FrameSpec>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::data_at(manifest_path, e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::data_at(manifest_path, format!("malformed JSON: {e}")))?;
        if manifest.version != 1 {
            return Err(Error::data_at(
                manifest_path,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        let root = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        Dataset::from_manifest(manifest, root, manifest_path)
    }

    fn from_manifest(manifest: Manifest, root: PathBuf, origin: &Path) -> Result<Self> {
        let fail = |msg: String| Err(Error::data_at(origin, msg));

        if manifest.n_avatars == 0 {
            return fail("manifest declares zero avatars".into());
        }
        if manifest.cameras.is_empty() {
            return fail("manifest declares no cameras".into());
        }
        if manifest.frames.is_empty() {
            return fail("manifest declares no frames".into());
        }
        if manifest.background.iter().any(|v| !v.is_finite()) {
            return fail("background color must be finite".into());
        }

        let mut cameras = Vec::with_capacity(manifest.cameras.len());
        for spec in &manifest.cameras {
            if cameras.iter().any(|c: &DatasetCamera| c.id == spec.id) {
                return fail(format!("duplicate camera id {:?}", spec.id));
            }
            cameras.push(DatasetCamera {
                id: spec.id.clone(),
                split: spec.split,
                camera: spec.to_camera()?,
            });
        }

        let mut last_time = f64::NEG_INFINITY;
        for (f, frame) in manifest.frames.iter().enumerate() {
            if !(0.0..=1.0).contains(&frame.timestamp) {
                return fail(format!(
                    "frame {f} timestamp {} outside [0, 1]",
                    frame.timestamp
                ));
            }
            if frame.timestamp <= last_time {
                return fail(format!(
                    "frame {f} timestamp {} does not increase over the previous frame",
                    frame.timestamp
                ));
            }
            last_time = frame.timestamp;
            if frame.poses.len() != manifest.n_avatars {
                return fail(format!(
                    "frame {f} carries {} poses for {} avatars",
                    frame.poses.len(),
                    manifest.n_avatars
                ));
            }
            for (cam_id, rel) in &frame.images {
                if !cameras.iter().any(|c| &c.id == cam_id) {
                    return fail(format!("frame {f} references unknown camera {cam_id:?}"));
                }
                let path = root.join(rel);
                if !path.is_file() {
                    return fail(format!(
                        "frame {f} camera {cam_id:?}: image {} does not exist",
                        path.display()
                    ));
                }
            }
        }

        Ok(Dataset {
            root,
            background: manifest.background,
            n_avatars: manifest.n_avatars,
            cameras,
            frames: manifest.frames,
        })
    }

    pub fn camera(&self, id: &str) -> Option<&DatasetCamera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn cameras_in(&self, split: Split) -> impl Iterator<Item = &DatasetCamera> {
        self.cameras.iter().filter(move |c| c.split == split)
    }

    /// The pose of one avatar at one frame, stamped with the frame's time.
    pub fn pose(&self, frame: usize, avatar: usize) -> Result<Pose> {
        let f = self
            .frames
            .get(frame)
            .ok_or_else(|| Error::InvalidParameter(format!("frame {frame} out of range")))?;
        let spec = f.poses.get(avatar).ok_or_else(|| {
            Error::InvalidParameter(format!("avatar {avatar} out of range in frame {frame}"))
        })?;
        spec.to_pose(f.timestamp)
    }

    /// Loads the image a frame recorded for a camera, as linear RGB.
    pub fn load_image(&self, frame: usize, cam_id: &str) -> Result<Image> {
        let f = self
            .frames
            .get(frame)
            .ok_or_else(|| Error::InvalidParameter(format!("frame {frame} out of range")))?;
        let rel = f.images.get(cam_id).ok_or_else(|| {
            Error::data(format!("frame {frame} has no image for camera {cam_id:?}"))
        })?;
        load_png(&self.root.join(rel))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::image::save_png;

    fn toy_manifest(dir: &Path) -> Manifest {
        let img = Image::new(4, 3, vec![[0.25, 0.5, 0.75]; 12]).unwrap();
        save_png(&img, &dir.join("f0_a.png")).unwrap();
        save_png(&img, &dir.join("f1_a.png")).unwrap();
        Manifest {
            version: 1,
            background: [0.0, 0.0, 0.0],
            n_avatars: 1,
            cameras: vec![
                CameraSpec {
                    id: "a".into(),
                    split: Split::Train,
                    width: 4,
                    height: 3,
                    fx: 5.0,
                    fy: 5.0,
                    cx: 2.0,
                    cy: 1.5,
                    rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                    translation: [0.0, 0.0, 2.0],
                },
                CameraSpec {
                    id: "b".into(),
                    split: Split::Test,
                    width: 4,
                    height: 3,
                    fx: 5.0,
                    fy: 5.0,
                    cx: 2.0,
                    cy: 1.5,
                    rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                    translation: [0.1, 0.0, 2.0],
                },
            ],
            frames: vec![
                FrameSpec {
                    timestamp: 0.0,
                    poses: vec![PoseSpec {
                        omegas: vec![[0.0, 0.0, 0.0], [0.1, 0.2, 0.3]],
                        root_translation: [0.0, 0.01, 0.0],
                    }],
                    images: BTreeMap::from([("a".to_string(), "f0_a.png".to_string())]),
                },
                FrameSpec {
                    timestamp: 0.5,
                    poses: vec![PoseSpec {
                        omegas: vec![[0.0, 0.0, 0.0], [0.2, 0.1, 0.0]],
                        root_translation: [0.0, 0.0, 0.0],
                    }],
                    images: BTreeMap::from([("a".to_string(), "f1_a.png".to_string())]),
                },
            ],
        }
    }

    #[test]
    fn minimal_manifest_loads_and_resolves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_manifest(dir.path());
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();

        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.n_avatars, 1);
        assert_eq!(ds.cameras.len(), 2);
        assert_eq!(ds.cameras_in(Split::Train).count(), 1);
        assert_eq!(ds.cameras_in(Split::Test).count(), 1);
        assert_eq!(ds.camera("b").unwrap().camera.width, 4);

        let pose = ds.pose(1, 0).unwrap();
        assert_eq!(pose.time, 0.5);
        assert_eq!(pose.omegas.len(), 2);
        assert_eq!(pose.omegas[1].x, 0.2);

        let img = ds.load_image(0, "a").unwrap();
        assert_eq!((img.width, img.height), (4, 3));
    }

    #[test]
    fn missing_pose_error_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.frames[1].poses.clear();
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }

    #[test]
    fn non_increasing_timestamps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.frames[1].timestamp = 0.0;
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("increase"), "{err}");
    }

    #[test]
    fn missing_image_file_fails_at_load_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.frames[0]
            .images
            .insert("b".to_string(), "nope.png".to_string());
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("nope.png"), "{err}");
    }

    #[test]
    fn unknown_camera_reference_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.frames[0]
            .images
            .insert("ghost".to_string(), "f0_a.png".to_string());
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
    }

    #[test]
    fn duplicate_camera_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.cameras[1].id = "a".into();
        let path = dir.path().join("manifest.json");
        save_manifest(&manifest, &path).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn camera_spec_round_trips_through_camera() {
        let cam = Camera::look_at(
            Vector3::new(0.3, 0.4, -2.0),
            Vector3::new(0.0, 0.4, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            64,
            48,
            70.0,
            70.0,
        )
        .unwrap();
        let spec = CameraSpec::from_camera("ring0", Split::Train, &cam);
        let back = spec.to_camera().unwrap();
        assert_eq!(back.world_to_camera.linear, cam.world_to_camera.linear);
        assert_eq!(
            back.world_to_camera.translation,
            cam.world_to_camera.translation
        );
        assert_eq!(back.fx, cam.fx);
    }
}
