//! Multiresolution hash-table feature encoding over the unit cube.
//!
//! Each level overlays a virtual grid of geometrically growing resolution.
//! A query point is trilinearly interpolated from its 8 cell corners, each
//! corner's feature vector living in a per-level table addressed by a spatial
//! hash. Collisions are tolerated; the optimizer sorts them out.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// XOR-of-primes corner hash. The first prime is 1 so x-adjacent corners
/// stay distinct in dense layouts.
const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashGridConfig {
    /// Number of resolution levels.
    pub levels: usize,
    /// Feature scalars per table entry.
    pub features: usize,
    /// Entries per level table; must be a power of two.
    pub table_size: usize,
    /// Grid resolution of the coarsest level.
    pub base_resolution: usize,
    /// Grid resolution of the finest level.
    pub max_resolution: usize,
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 {
            return Err(Error::Config("hash grid needs levels > 0 and features > 0".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "hash table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.base_resolution < 1 || self.max_resolution < self.base_resolution {
            return Err(Error::Config(format!(
                "hash grid resolutions {}..{} are not increasing",
                self.base_resolution, self.max_resolution
            )));
        }
        Ok(())
    }

    /// Per-level grid resolutions, growing by a constant factor from base to
    /// max so the finest level hits `max_resolution` exactly.
    pub fn resolutions(&self) -> Vec<usize> {
        let l = self.levels;
        if l == 1 {
            return vec![self.base_resolution];
        }
        let b = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (l as f64 - 1.0);
        (0..l)
            .map(|i| {
                // floor() with a nudge so exact powers are not lost to rounding
                ((self.base_resolution as f64) * (b * i as f64).exp() + 1e-9).floor() as usize
            })
            .collect()
    }

    /// Output width of the encoding.
    pub fn encoded_len(&self) -> usize {
        self.levels * self.features
    }

    pub fn table_len(&self) -> usize {
        self.levels * self.table_size * self.features
    }
}

/// Learnable feature tables for one encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    pub config: HashGridConfig,
    /// Flat `[level][slot][feature]`.
    pub tables: Vec<f64>,
    resolutions: Vec<usize>,
}

impl HashGrid {
    /// Small uniform noise keeps early training symmetric but not degenerate.
    pub const INIT_SPREAD: f64 = 1e-4;

    pub fn new(config: HashGridConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let tables = (0..config.table_len())
            .map(|_| rng.gen_range(-Self::INIT_SPREAD..=Self::INIT_SPREAD))
            .collect();
        Ok(HashGrid {
            resolutions: config.resolutions(),
            config,
            tables,
        })
    }

    pub fn from_tables(config: HashGridConfig, tables: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if tables.len() != config.table_len() {
            return Err(Error::Config(format!(
                "hash table blob has {} values, config wants {}",
                tables.len(),
                config.table_len()
            )));
        }
        Ok(HashGrid {
            resolutions: config.resolutions(),
            config,
            tables,
        })
    }

    fn slot(&self, cx: u32, cy: u32, cz: u32) -> usize {
        let h = cx
            .wrapping_mul(HASH_PRIMES[0])
            ^ cy.wrapping_mul(HASH_PRIMES[1])
            ^ cz.wrapping_mul(HASH_PRIMES[2]);
        (h as usize) & (self.config.table_size - 1)
    }

    /// Writes the `levels * features` encoding of a point in the unit cube
    /// into `out`. Coordinates outside [0, 1] read as clamped.
    pub fn encode_into(&self, u: Vector3<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.config.encoded_len());
        let f = self.config.features;
        for (l, &res) in self.resolutions.iter().enumerate() {
            let (cell, frac) = cell_of(u, res);
            let base = l * self.config.table_size * f;
            let dst = &mut out[l * f..(l + 1) * f];
            dst.fill(0.0);
            for corner in 0..8 {
                let (c, w) = corner_weight(cell, frac, corner, res);
                let slot = base + self.slot(c[0], c[1], c[2]) * f;
                for k in 0..f {
                    dst[k] += w * self.tables[slot + k];
                }
            }
        }
    }

    /// Backward of [`encode_into`]. Accumulates table gradients into
    /// `d_tables` (same layout as `tables`) and returns the gradient with
    /// respect to the (unit cube) position.
    pub fn encode_backward(
        &self,
        u: Vector3<f64>,
        d_out: &[f64],
        d_tables: &mut [f64],
    ) -> Vector3<f64> {
        debug_assert_eq!(d_out.len(), self.config.encoded_len());
        debug_assert_eq!(d_tables.len(), self.tables.len());
        let f = self.config.features;
        let mut d_u = Vector3::zeros();
        for (l, &res) in self.resolutions.iter().enumerate() {
            let (cell, frac) = cell_of(u, res);
            let base = l * self.config.table_size * f;
            let up = &d_out[l * f..(l + 1) * f];
            for corner in 0..8 {
                let (c, w) = corner_weight(cell, frac, corner, res);
                let dw = corner_weight_grad(cell, frac, corner, res);
                let slot = base + self.slot(c[0], c[1], c[2]) * f;
                let mut dot = 0.0;
                for k in 0..f {
                    d_tables[slot + k] += w * up[k];
                    dot += self.tables[slot + k] * up[k];
                }
                d_u += dw * dot;
            }
        }
        d_u
    }
}

/// Cell index and fractional position of `u` at one resolution.
fn cell_of(u: Vector3<f64>, res: usize) -> ([u32; 3], Vector3<f64>) {
    let mut cell = [0u32; 3];
    let mut frac = Vector3::zeros();
    for a in 0..3 {
        let p = (u[a].clamp(0.0, 1.0)) * res as f64;
        // Clamp the cell so u = 1 lands in the last cell with frac = 1.
        let c = (p.floor()).min(res as f64 - 1.0).max(0.0);
        cell[a] = c as u32;
        frac[a] = p - c;
    }
    (cell, frac)
}

/// Corner coordinate and trilinear weight for one of the 8 cell corners.
fn corner_weight(cell: [u32; 3], frac: Vector3<f64>, corner: usize, _res: usize) -> ([u32; 3], f64) {
    let mut c = [0u32; 3];
    let mut w = 1.0;
    for a in 0..3 {
        let hi = (corner >> a) & 1;
        c[a] = cell[a] + hi as u32;
        w *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
    }
    (c, w)
}

/// d(weight)/d(u) for one corner; includes the grid-resolution factor from
/// frac = u * res - cell.
fn corner_weight_grad(_cell: [u32; 3], frac: Vector3<f64>, corner: usize, res: usize) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for a in 0..3 {
        let mut d = 1.0;
        for b in 0..3 {
            let hi = (corner >> b) & 1;
            if b == a {
                d *= if hi == 1 { 1.0 } else { -1.0 };
            } else {
                d *= if hi == 1 { frac[b] } else { 1.0 - frac[b] };
            }
        }
        g[a] = d * res as f64;
    }
    g
}
