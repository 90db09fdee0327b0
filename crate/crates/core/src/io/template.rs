//! Skinned-template files: the point positions, skin weights, and skeleton
//! that seed an avatar. JSON with base64 blobs for the large arrays, so
//! files stay inspectable while numbers survive exactly.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skinning::Skeleton;

/// How far a weight row's sum may drift from 1 and still be renormalized.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-4;

/// A standard skinned model: V vertices, each bound to at most four bones.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateModel {
    pub skeleton: Skeleton,
    /// Flat xyz, length 3V.
    pub vertices: Vec<f64>,
    pub skin_bones: Vec<[u16; 4]>,
    pub skin_weights: Vec<[f64; 4]>,
    /// Flat uv in [0, 1], length 2V, when the template is texture-mapped.
    pub uv: Option<Vec<f64>>,
}

impl TemplateModel {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [
            self.vertices[3 * i],
            self.vertices[3 * i + 1],
            self.vertices[3 * i + 2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.n_vertices();
        if v == 0 {
            return Err(Error::data("template has no vertices"));
        }
        if self.vertices.len() != 3 * v
            || self.skin_bones.len() != v
            || self.skin_weights.len() != v
        {
            return Err(Error::data(format!(
                "template arrays disagree on the vertex count: {} coordinates, {} bone rows, {} weight rows",
                self.vertices.len(),
                self.skin_bones.len(),
                self.skin_weights.len()
            )));
        }
        if let Some(uv) = &self.uv {
            if uv.len() != 2 * v {
                return Err(Error::data(format!(
                    "uv array holds {} values for {v} vertices",
                    uv.len()
                )));
            }
        }
        let n_bones = self.skeleton.n_bones() as u16;
        for (i, (bones, weights)) in self.skin_bones.iter().zip(&self.skin_weights).enumerate() {
            if bones.iter().any(|&b| b >= n_bones) {
                return Err(Error::data(format!(
                    "vertex {i} references bone {} of {n_bones}",
                    bones.iter().max().unwrap()
                )));
            }
            let sum: f64 = weights.iter().sum();
            if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::data(format!(
                    "vertex {i} weights sum to {sum}, beyond the {WEIGHT_SUM_TOLERANCE} tolerance"
                )));
            }
        }
        Ok(())
    }

    /// Divides every weight row by its sum. Call after [`validate`].
    pub fn renormalize_weights(&mut self) {
        for row in self.skin_weights.iter_mut() {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                for w in row.iter_mut() {
                    *w /= sum;
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    version: u32,
    vertex_count: usize,
    /// Parent of each bone; -1 marks the root.
    parents: Vec<i64>,
    /// base64 f64-le, 3 per bone.
    joints: String,
    /// base64 f64-le, 3 per vertex.
    vertices: String,
    /// base64 u16-le, 4 per vertex.
    skin_bones: String,
    /// base64 f64-le, 4 per vertex.
    skin_weights: String,
    /// base64 f64-le, 2 per vertex.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uv: Option<String>,
}

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn decode_f64s(field: &str, data: &str, expect: usize) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| Error::data(format!("{field}: bad base64: {e}")))?;
    if bytes.len() != expect * 8 {
        return Err(Error::data(format!(
            "{field}: {} bytes, expected {}",
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn encode_u16s(values: impl Iterator<Item = u16>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_u16s(field: &str, data: &str, expect: usize) -> Result<Vec<u16>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| Error::data(format!("{field}: bad base64: {e}")))?;
    if bytes.len() != expect * 2 {
        return Err(Error::data(format!(
            "{field}: {} bytes, expected {}",
            bytes.len(),
            expect * 2
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_template(template: &TemplateModel, path: &Path) -> Result<()> {
    template.validate()?;
    let v = template.n_vertices();
    let file = TemplateFile {
        version: 1,
        vertex_count: v,
        parents: template
            .skeleton
            .parents
            .iter()
            .map(|p| p.map_or(-1, |b| b as i64))
            .collect(),
        joints: encode_f64s(&template.skeleton.joints),
        vertices: encode_f64s(&template.vertices),
        skin_bones: encode_u16s(template.skin_bones.iter().flatten().copied()),
        skin_weights: encode_f64s(
            &template
                .skin_weights
                .iter()
                .flatten()
                .copied()
                .collect::<Vec<_>>(),
        ),
        uv: template.uv.as_ref().map(|uv| encode_f64s(uv)),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)
        .map_err(|e| Error::data_at(path, e.to_string()))
}

pub fn load_template(path: &Path) -> Result<TemplateModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data_at(path, e.to_string()))?;
    let file: TemplateFile =
        serde_json::from_str(&text).map_err(|e| Error::data_at(path, format!("malformed JSON: {e}")))?;
    if file.version != 1 {
        return Err(Error::data_at(
            path,
            format!("unsupported template version {}", file.version),
        ));
    }
    let v = file.vertex_count;
    let n_bones = file.parents.len();

    let mut parents = Vec::with_capacity(n_bones);
    for (i, &p) in file.parents.iter().enumerate() {
        parents.push(match p {
            -1 => None,
            p if p >= 0 && (p as usize) < n_bones => Some(p as u16),
            p => {
                return Err(Error::data_at(
                    path,
                    format!("bone {i} has parent {p}, outside the {n_bones} bones"),
                ))
            }
        });
    }
    let joints = decode_f64s("joints", &file.joints, 3 * n_bones)?;
    let skeleton = Skeleton::new(parents, joints)?;

    let vertices = decode_f64s("vertices", &file.vertices, 3 * v)?;
    let bones_flat = decode_u16s("skin_bones", &file.skin_bones, 4 * v)?;
    let weights_flat = decode_f64s("skin_weights", &file.skin_weights, 4 * v)?;
    let skin_bones = bones_flat
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let skin_weights = weights_flat
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let uv = file
        .uv
        .as_ref()
        .map(|data| decode_f64s("uv", data, 2 * v))
        .transpose()?;

    let mut template = TemplateModel {
        skeleton,
        vertices,
        skin_bones,
        skin_weights,
        uv,
    };
    template.validate().map_err(|e| match e {
        Error::Data { msg, .. } => Error::data_at(path, msg),
        other => other,
    })?;
    template.renormalize_weights();
    Ok(template)
}
