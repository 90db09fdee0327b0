//! Continuous parameter fields over canonical space.
//!
//! Three fields share one design: a multiresolution hash encoding of the
//! query position feeding a small rectifier network. The displacement field
//! outputs a bounded canonical-space correction of a point's center. The
//! appearance field outputs 27 spherical-harmonic coefficients. The
//! brightness field additionally takes a sinusoidally encoded timestamp and
//! outputs one value in (0, 1).
//!
//! Sampling order: displacement is queried at the stored center `x0`, the
//! other two fields at the shifted center `x0 + dx`. Queries are normalized
//! into the unit cube by a fixed canonical-space bounding box.

pub mod hash;
pub mod mlp;

use nalgebra::Vector3;
pub use hash::{HashGrid, HashGridConfig};
pub use mlp::{Mlp, MlpConfig};

use crate::error::{Error, Result};
use crate::math::{sigmoid, sigmoid_grad_from_output};
use crate::shading::SH_COEFFS;

/// Axis-aligned box that maps canonical positions into the unit cube.
/// Queries outside read as clamped (and pass no position gradient there).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite() && min[a] < max[a]) {
                return Err(Error::InvalidParameter(format!(
                    "degenerate bounding box on axis {a}: {} .. {}",
                    min[a], max[a]
                )));
            }
        }
        Ok(Aabb { min, max })
    }

    /// Tight box around points, symmetrically inflated by `margin` times the
    /// largest extent (so field queries keep headroom while centers move).
    pub fn around_points(points: impl Iterator<Item = Vector3<f64>>, margin: f64) -> Result<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        if min[0] > max[0] {
            return Err(Error::InvalidParameter("bounding box of zero points".into()));
        }
        let largest = (0..3).map(|a| max[a] - min[a]).fold(0.0f64, f64::max).max(1e-6);
        let pad = largest * margin;
        for a in 0..3 {
            min[a] -= pad;
            max[a] += pad;
        }
        Aabb::new(min, max)
    }

    pub fn normalize(&self, x: Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|a, _| ((x[a] - self.min[a]) / (self.max[a] - self.min[a])).clamp(0.0, 1.0))
    }

    /// Diagonal of d(normalize)/dx; zero on clamped axes.
    pub fn normalize_grad(&self, x: Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|a, _| {
            if x[a] < self.min[a] || x[a] > self.max[a] {
                0.0
            } else {
                1.0 / (self.max[a] - self.min[a])
            }
        })
    }
}

/// Sinusoidal timestamp features: `(sin(2^k pi t), cos(2^k pi t))` for
/// `k = 0..n`, interleaved. Gives the brightness field enough bandwidth to
/// track lighting changes over a capture without memorizing frame indices.
pub fn positional_encode_time(t: f64, n_frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * n_frequencies];
    encode_time_into(t, &mut out);
    out
}

pub fn encode_time_into(t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len() % 2, 0);
    let mut freq = std::f64::consts::PI;
    for pair in out.chunks_exact_mut(2) {
        let (s, c) = (freq * t).sin_cos();
        pair[0] = s;
        pair[1] = c;
        freq *= 2.0;
    }
}

/// Learnable UV texture of spherical-harmonic coefficients, bilinearly
/// sampled with clamp-to-edge addressing and texel centers at half-integer
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub width: usize,
    pub height: usize,
    /// Flat `[y][x][coefficient]`.
    pub texels: Vec<f64>,
}

impl Atlas {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("atlas dimensions must be positive".into()));
        }
        Ok(Atlas {
            width,
            height,
            texels: vec![0.0; width * height * SH_COEFFS],
        })
    }

    pub fn from_texels(width: usize, height: usize, texels: Vec<f64>) -> Result<Self> {
        if texels.len() != width * height * SH_COEFFS {
            return Err(Error::Config(format!(
                "atlas blob has {} values, dimensions want {}",
                texels.len(),
                width * height * SH_COEFFS
            )));
        }
        Ok(Atlas {
            width,
            height,
            texels,
        })
    }

    fn corners(&self, u: f64, v: f64) -> ([usize; 2], [usize; 2], f64, f64) {
        let x = u * self.width as f64 - 0.5;
        let y = v * self.height as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let cx = |i: f64| (i.max(0.0) as usize).min(self.width - 1);
        let cy = |i: f64| (i.max(0.0) as usize).min(self.height - 1);
        ([cx(x0), cx(x0 + 1.0)], [cy(y0), cy(y0 + 1.0)], fx, fy)
    }

    /// Bilinear lookup of the 27 coefficients at (u, v) in [0, 1]^2.
    pub fn sample(&self, u: f64, v: f64) -> [f64; SH_COEFFS] {
        let (xs, ys, fx, fy) = self.corners(u, v);
        let mut out = [0.0; SH_COEFFS];
        for (yi, wy) in ys.iter().zip([1.0 - fy, fy]) {
            for (xi, wx) in xs.iter().zip([1.0 - fx, fx]) {
                let base = (yi * self.width + xi) * SH_COEFFS;
                let w = wx * wy;
                for k in 0..SH_COEFFS {
                    out[k] += w * self.texels[base + k];
                }
            }
        }
        out
    }

    /// Backward of [`Atlas::sample`]; UVs are fixed model constants, so only
    /// texel gradients are produced.
    pub fn sample_backward(&self, u: f64, v: f64, d_out: &[f64; SH_COEFFS], d_texels: &mut [f64]) {
        debug_assert_eq!(d_texels.len(), self.texels.len());
        let (xs, ys, fx, fy) = self.corners(u, v);
        for (yi, wy) in ys.iter().zip([1.0 - fy, fy]) {
            for (xi, wx) in xs.iter().zip([1.0 - fx, fx]) {
                let base = (yi * self.width + xi) * SH_COEFFS;
                let w = wx * wy;
                for k in 0..SH_COEFFS {
                    d_texels[base + k] += w * d_out[k];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldBankConfig {
    pub sh_grid: HashGridConfig,
    pub disp_grid: HashGridConfig,
    pub ao_grid: HashGridConfig,
    pub mlp_hidden: usize,
    pub mlp_hidden_layers: usize,
    pub time_frequencies: usize,
    /// Bound on |dx| per axis, in canonical units (meters).
    pub max_displacement: f64,
}

impl Default for FieldBankConfig {
    fn default() -> Self {
        let grid = HashGridConfig {
            levels: 16,
            features: 2,
            table_size: 1 << 17,
            base_resolution: 16,
            max_resolution: 2048,
        };
        FieldBankConfig {
            sh_grid: grid,
            disp_grid: grid,
            ao_grid: HashGridConfig {
                table_size: 1 << 19,
                ..grid
            },
            mlp_hidden: 64,
            mlp_hidden_layers: 2,
            time_frequencies: 6,
            max_displacement: 0.1,
        }
    }
}

impl FieldBankConfig {
    pub fn sh_mlp(&self) -> MlpConfig {
        MlpConfig {
            input: self.sh_grid.encoded_len(),
            hidden: self.mlp_hidden,
            hidden_layers: self.mlp_hidden_layers,
            output: SH_COEFFS,
        }
    }

    pub fn disp_mlp(&self) -> MlpConfig {
        MlpConfig {
            input: self.disp_grid.encoded_len(),
            hidden: self.mlp_hidden,
            hidden_layers: self.mlp_hidden_layers,
            output: 3,
        }
    }

    pub fn ao_mlp(&self) -> MlpConfig {
        MlpConfig {
            input: self.ao_grid.encoded_len() + 2 * self.time_frequencies,
            hidden: self.mlp_hidden,
            hidden_layers: self.mlp_hidden_layers,
            output: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sh_grid.validate()?;
        self.disp_grid.validate()?;
        self.ao_grid.validate()?;
        self.sh_mlp().validate()?;
        if self.time_frequencies == 0 {
            return Err(Error::Config("time encoding needs at least one frequency".into()));
        }
        if !(self.max_displacement > 0.0 && self.max_displacement.is_finite()) {
            return Err(Error::Config("max displacement must be positive".into()));
        }
        Ok(())
    }
}

/// The three fields plus the query-normalization box.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBank {
    pub config: FieldBankConfig,
    pub aabb: Aabb,
    pub sh_grid: HashGrid,
    pub sh_mlp: Mlp,
    pub disp_grid: HashGrid,
    pub disp_mlp: Mlp,
    pub ao_grid: HashGrid,
    pub ao_mlp: Mlp,
}

/// Appearance and displacement of one point.
#[derive(Debug, Clone, Copy)]
pub struct ShapeAppearance {
    pub sh: [f64; SH_COEFFS],
    pub displacement: Vector3<f64>,
}

/// Gradient mirror of a [`FieldBank`].
#[derive(Debug, Clone)]
pub struct FieldBankGrads {
    pub sh_tables: Vec<f64>,
    pub sh_mlp: Vec<f64>,
    pub disp_tables: Vec<f64>,
    pub disp_mlp: Vec<f64>,
    pub ao_tables: Vec<f64>,
    pub ao_mlp: Vec<f64>,
}

impl FieldBankGrads {
    pub fn zeros_like(bank: &FieldBank) -> Self {
        FieldBankGrads {
            sh_tables: vec![0.0; bank.sh_grid.tables.len()],
            sh_mlp: vec![0.0; bank.sh_mlp.params.len()],
            disp_tables: vec![0.0; bank.disp_grid.tables.len()],
            disp_mlp: vec![0.0; bank.disp_mlp.params.len()],
            ao_tables: vec![0.0; bank.ao_grid.tables.len()],
            ao_mlp: vec![0.0; bank.ao_mlp.params.len()],
        }
    }

    pub fn add(&mut self, other: &FieldBankGrads) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 6] = [
            (&mut self.sh_tables, &other.sh_tables),
            (&mut self.sh_mlp, &other.sh_mlp),
            (&mut self.disp_tables, &other.disp_tables),
            (&mut self.disp_mlp, &other.disp_mlp),
            (&mut self.ao_tables, &other.ao_tables),
            (&mut self.ao_mlp, &other.ao_mlp),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Reusable buffers for field evaluation; one per worker thread.
#[derive(Debug, Clone, Default)]
pub struct FieldScratch {
    enc: Vec<f64>,
    enc2: Vec<f64>,
    acts: Vec<f64>,
    acts2: Vec<f64>,
    d_enc: Vec<f64>,
}

fn resized<'a>(v: &'a mut Vec<f64>, n: usize) -> &'a mut [f64] {
    v.clear();
    v.resize(n, 0.0);
    &mut v[..]
}

impl FieldBank {
    pub fn init(config: FieldBankConfig, aabb: Aabb, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        Ok(FieldBank {
            sh_grid: HashGrid::new(config.sh_grid, rng)?,
            sh_mlp: Mlp::init(config.sh_mlp(), rng)?,
            disp_grid: HashGrid::new(config.disp_grid, rng)?,
            disp_mlp: Mlp::init(config.disp_mlp(), rng)?,
            ao_grid: HashGrid::new(config.ao_grid, rng)?,
            ao_mlp: Mlp::init(config.ao_mlp(), rng)?,
            config,
            aabb,
        })
    }

    /// Displacement at the stored center, appearance at the shifted one.
    pub fn sample_shape_appearance(
        &self,
        x0: Vector3<f64>,
        scratch: &mut FieldScratch,
    ) -> ShapeAppearance {
        let (dx, _) = self.displacement_at(x0, scratch);
        let shifted = x0 + dx;
        let u1 = self.aabb.normalize(shifted);
        let enc = resized(&mut scratch.enc, self.config.sh_grid.encoded_len());
        self.sh_grid.encode_into(u1, enc);
        let acts = resized(&mut scratch.acts, self.sh_mlp.config.activations_len());
        let mut sh = [0.0; SH_COEFFS];
        self.sh_mlp.forward(&scratch.enc, acts, &mut sh);
        ShapeAppearance {
            sh,
            displacement: dx,
        }
    }

    /// Brightness factor at a (usually shifted) canonical position and time.
    pub fn sample_ao(&self, x: Vector3<f64>, t: f64, scratch: &mut FieldScratch) -> f64 {
        let n_enc = self.config.ao_grid.encoded_len();
        let input = resized(&mut scratch.enc, n_enc + 2 * self.config.time_frequencies);
        self.ao_grid.encode_into(self.aabb.normalize(x), &mut input[..n_enc]);
        encode_time_into(t, &mut input[n_enc..]);
        let acts = resized(&mut scratch.acts, self.ao_mlp.config.activations_len());
        let mut head = [0.0];
        self.ao_mlp.forward(&scratch.enc, acts, &mut head);
        sigmoid(head[0])
    }

    /// `(dx, tanh values)` of the displacement field at `x0`.
    fn displacement_at(
        &self,
        x0: Vector3<f64>,
        scratch: &mut FieldScratch,
    ) -> (Vector3<f64>, [f64; 3]) {
        let u0 = self.aabb.normalize(x0);
        let enc = resized(&mut scratch.enc2, self.config.disp_grid.encoded_len());
        self.disp_grid.encode_into(u0, enc);
        let acts = resized(&mut scratch.acts2, self.disp_mlp.config.activations_len());
        let mut head = [0.0; 3];
        self.disp_mlp.forward(&scratch.enc2, acts, &mut head);
        let th = [head[0].tanh(), head[1].tanh(), head[2].tanh()];
        let dx = Vector3::new(th[0], th[1], th[2]) * self.config.max_displacement;
        (dx, th)
    }

    /// Backward of [`FieldBank::sample_shape_appearance`].
    ///
    /// `d_sh` and `d_dx` are the loss gradients of the two outputs as the
    /// caller uses them. Returns the total gradient with respect to `x0`,
    /// including the paths through both field queries.
    pub fn sample_shape_appearance_backward(
        &self,
        x0: Vector3<f64>,
        d_sh: &[f64; SH_COEFFS],
        d_dx: Vector3<f64>,
        grads: &mut FieldBankGrads,
        scratch: &mut FieldScratch,
    ) -> Vector3<f64> {
        // Recompute the forward chain.
        let (dx, th) = self.displacement_at(x0, scratch);
        let shifted = x0 + dx;
        let u1 = self.aabb.normalize(shifted);
        let enc1 = resized(&mut scratch.enc, self.config.sh_grid.encoded_len());
        self.sh_grid.encode_into(u1, enc1);
        let acts1 = resized(&mut scratch.acts, self.sh_mlp.config.activations_len());
        let mut sh = [0.0; SH_COEFFS];
        self.sh_mlp.forward(&scratch.enc, acts1, &mut sh);

        // Appearance head back to its encoding and the shifted position.
        let d_enc1 = resized(&mut scratch.d_enc, self.config.sh_grid.encoded_len());
        self.sh_mlp
            .backward(&scratch.enc, &scratch.acts, d_sh, &mut grads.sh_mlp, d_enc1);
        let d_u1 = self
            .sh_grid
            .encode_backward(u1, &scratch.d_enc, &mut grads.sh_tables);
        let d_shifted = d_u1.component_mul(&self.aabb.normalize_grad(shifted));

        // The shifted position is x0 + dx: both receive d_shifted.
        let d_dx_total = d_dx + d_shifted;

        // Displacement head through the tanh bound.
        let mut d_head = [0.0; 3];
        for k in 0..3 {
            d_head[k] = d_dx_total[k] * self.config.max_displacement * (1.0 - th[k] * th[k]);
        }
        let d_enc0 = resized(&mut scratch.d_enc, self.config.disp_grid.encoded_len());
        self.disp_mlp.backward(
            &scratch.enc2,
            &scratch.acts2,
            &d_head,
            &mut grads.disp_mlp,
            d_enc0,
        );
        let u0 = self.aabb.normalize(x0);
        let d_u0 = self
            .disp_grid
            .encode_backward(u0, &scratch.d_enc, &mut grads.disp_tables);
        let d_x0_query = d_u0.component_mul(&self.aabb.normalize_grad(x0));

        d_shifted + d_x0_query
    }

    /// Backward of [`FieldBank::sample_ao`]; returns the gradient with
    /// respect to the query position (time is an input, not a parameter).
    pub fn sample_ao_backward(
        &self,
        x: Vector3<f64>,
        t: f64,
        d_ao: f64,
        grads: &mut FieldBankGrads,
        scratch: &mut FieldScratch,
    ) -> Vector3<f64> {
        let n_enc = self.config.ao_grid.encoded_len();
        let u = self.aabb.normalize(x);
        let input = resized(&mut scratch.enc, n_enc + 2 * self.config.time_frequencies);
        self.ao_grid.encode_into(u, &mut input[..n_enc]);
        encode_time_into(t, &mut input[n_enc..]);
        let acts = resized(&mut scratch.acts, self.ao_mlp.config.activations_len());
        let mut head = [0.0];
        self.ao_mlp.forward(&scratch.enc, acts, &mut head);
        let ao = sigmoid(head[0]);

        let d_head = [d_ao * sigmoid_grad_from_output(ao)];
        let d_input = resized(&mut scratch.d_enc, n_enc + 2 * self.config.time_frequencies);
        self.ao_mlp.backward(
            &scratch.enc,
            &scratch.acts,
            &d_head,
            &mut grads.ao_mlp,
            d_input,
        );
        let d_u = self
            .ao_grid
            .encode_backward(u, &scratch.d_enc[..n_enc], &mut grads.ao_tables);
        d_u.component_mul(&self.aabb.normalize_grad(x))
    }
}
