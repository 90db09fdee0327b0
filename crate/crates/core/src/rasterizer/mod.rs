//! Differentiable tile-based splatting of 3D Gaussians.
//!
//! World-space Gaussians (center, covariance, opacity, color) are projected
//! to screen-space splats, binned into 16x16 pixel tiles, depth-sorted, and
//! composited front to back. [`reference_rasterize`] is the slow oracle: it
//! skips the tiling and evaluates every splat at every pixel. Both paths
//! share the projection, the per-pixel alpha function, and the compositing
//! loop, and the tile binning radius conservatively covers the whole region
//! where alpha can reach the 1/255 contribution threshold, so their outputs
//! are identical.
//!
//! The backward pass reruns binning, then per pixel re-walks the composited
//! splats back to front, reconstructing each contributor's transmittance
//! from the stored final value. Per-tile gradients are merged in tile order
//! and per-splat work runs independently, so results do not depend on the
//! number of worker threads.

pub mod camera;

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

pub use camera::Camera;

use crate::error::{Error, Result};

pub const TILE: usize = 16;
/// Compositing alpha is clamped here to keep 1 - alpha away from zero.
pub const ALPHA_CAP: f64 = 0.99;
/// Contributions below this alpha are skipped entirely.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Front-to-back traversal stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Isotropic screen-space dilation added to every projected covariance.
pub const COV_DILATION: f64 = 0.3;
/// Projected covariances with a determinant at or below this are skipped.
pub const MIN_DET_2D: f64 = 1e-12;

/// One shaded world-space Gaussian, ready for projection.
#[derive(Debug, Clone, Copy)]
pub struct WorldSplat {
    pub center: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// Peak opacity in (0, 1).
    pub opacity: f64,
    /// Linear rgb, already shaded.
    pub color: [f64; 3],
}

/// Screen-space footprint of one world splat.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedSplat {
    pub mean: Vector2<f64>,
    /// Inverse 2D covariance, upper triangle [a, b, c].
    pub conic: [f64; 3],
    pub depth: f64,
    /// Binning radius in pixels; covers every pixel whose alpha can pass
    /// the 1/255 threshold, plus a one-pixel margin.
    pub radius: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Index into the input splat list.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuffers {
    pub width: usize,
    pub height: usize,
    /// Row-major linear rgb.
    pub color: Vec<[f64; 3]>,
    /// Transmittance remaining after all contributors.
    pub transmittance: Vec<f64>,
    /// Number of splats composited per pixel; the backward pass re-walks
    /// exactly this many.
    pub n_contrib: Vec<u32>,
}

impl FrameBuffers {
    fn new(width: usize, height: usize) -> Self {
        FrameBuffers {
            width,
            height,
            color: vec![[0.0; 3]; width * height],
            transmittance: vec![1.0; width * height],
            n_contrib: vec![0; width * height],
        }
    }
}

/// Gradients with respect to each input [`WorldSplat`].
#[derive(Debug, Clone)]
pub struct WorldSplatGrads {
    pub d_center: Vec<Vector3<f64>>,
    pub d_cov: Vec<Matrix3<f64>>,
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

impl WorldSplatGrads {
    fn zeros(n: usize) -> Self {
        WorldSplatGrads {
            d_center: vec![Vector3::zeros(); n],
            d_cov: vec![Matrix3::zeros(); n],
            d_opacity: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
        }
    }
}

/// Projects one splat; `None` when it cannot contribute to any pixel
/// (behind the near plane, opacity below the contribution threshold, or a
/// numerically degenerate footprint).
pub fn project_splat(cam: &Camera, splat: &WorldSplat, source: usize) -> Option<ProjectedSplat> {
    if splat.opacity < ALPHA_SKIP {
        return None;
    }
    let t = cam.world_to_camera.apply_point(splat.center);
    if !(t.z > cam.z_near) {
        return None;
    }
    let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);

    let j = perspective_jacobian(cam, t);
    let m = j * cam.world_to_camera.linear;
    let cov2 = m * splat.cov * m.transpose() + Matrix2::identity() * COV_DILATION;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > MIN_DET_2D) {
        return None;
    }
    let conic = [
        cov2[(1, 1)] / det,
        -cov2[(0, 1)] / det,
        cov2[(0, 0)] / det,
    ];

    // Largest eigenvalue of the 2x2 covariance bounds the footprint.
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let disc = (0.25 * (cov2[(0, 0)] - cov2[(1, 1)]).powi(2) + cov2[(0, 1)] * cov2[(0, 1)]).sqrt();
    let sigma_max = (mid + disc).max(0.0).sqrt();
    // alpha >= 1/255 implies a Mahalanobis distance of at most
    // 2 ln(255 alpha0), which caps the pixel distance at cut * sigma_max.
    let cut = (2.0 * (255.0 * splat.opacity).ln()).max(0.0).sqrt();
    let radius = (3.0f64).max(cut) * sigma_max + 1.0;
    if !radius.is_finite() {
        return None;
    }

    Some(ProjectedSplat {
        mean,
        conic,
        depth: t.z,
        radius,
        opacity: splat.opacity,
        color: splat.color,
        source,
    })
}

fn perspective_jacobian(cam: &Camera, t: Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    nalgebra::Matrix2x3::new(
        cam.fx / t.z,
        0.0,
        -cam.fx * t.x / (t.z * t.z),
        0.0,
        cam.fy / t.z,
        -cam.fy * t.y / (t.z * t.z),
    )
}

/// Compositing alpha of one splat at a pixel center, or `None` when the
/// contribution is skipped. Shared by the tiled and reference paths so both
/// produce bit-identical images.
fn splat_alpha(s: &ProjectedSplat, px: f64, py: f64) -> Option<f64> {
    let dx = px - s.mean.x;
    let dy = py - s.mean.y;
    let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * (dx * dy) + s.conic[2] * (dy * dy);
    if !(q >= 0.0) {
        return None;
    }
    let alpha = s.opacity * (-0.5 * q).exp();
    if alpha < ALPHA_SKIP {
        None
    } else {
        Some(alpha.min(ALPHA_CAP))
    }
}

fn depth_order(a: &ProjectedSplat, b: &ProjectedSplat) -> Ordering {
    a.depth
        .partial_cmp(&b.depth)
        .expect("depths are finite")
        .then(a.source.cmp(&b.source))
}

/// Front-to-back blend of depth-sorted splats at one pixel center.
/// Returns (color, final transmittance, contributors composited).
fn composite_pixel(sorted: &[&ProjectedSplat], px: f64, py: f64, background: [f64; 3]) -> ([f64; 3], f64, u32) {
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    let mut n = 0u32;
    for s in sorted {
        let Some(alpha) = splat_alpha(s, px, py) else {
            continue;
        };
        let w = alpha * trans;
        for ch in 0..3 {
            color[ch] += w * s.color[ch];
        }
        trans *= 1.0 - alpha;
        n += 1;
        if trans < TRANSMITTANCE_STOP {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += trans * background[ch];
    }
    (color, trans, n)
}

/// Inclusive pixel bounding box of a projected splat, or `None` when it
/// lies entirely off screen.
fn pixel_bounds(cam: &Camera, s: &ProjectedSplat) -> Option<(usize, usize, usize, usize)> {
    let x0 = (s.mean.x - s.radius).floor() as isize;
    let x1 = (s.mean.x + s.radius).ceil() as isize;
    let y0 = (s.mean.y - s.radius).floor() as isize;
    let y1 = (s.mean.y + s.radius).ceil() as isize;
    let (w, h) = (cam.width as isize, cam.height as isize);
    if x1 < 0 || y1 < 0 || x0 >= w || y0 >= h {
        return None;
    }
    Some((
        x0.max(0) as usize,
        x1.min(w - 1) as usize,
        y0.max(0) as usize,
        y1.min(h - 1) as usize,
    ))
}

struct TileGrid {
    tiles_x: usize,
    /// Projected-splat indices per tile, in input order.
    lists: Vec<Vec<u32>>,
}

fn bin_to_tiles(cam: &Camera, projected: &[ProjectedSplat]) -> TileGrid {
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in projected.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = pixel_bounds(cam, s) else {
            continue;
        };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    TileGrid {
        tiles_x,
        lists,
    }
}

/// Depth-sorted copy of a tile's splat indices.
fn sorted_tile_indices(projected: &[ProjectedSplat], indices: &[u32]) -> Vec<u32> {
    let mut order = indices.to_vec();
    order.sort_by(|&a, &b| depth_order(&projected[a as usize], &projected[b as usize]));
    order
}

fn tile_refs<'a>(projected: &'a [ProjectedSplat], order: &[u32]) -> Vec<&'a ProjectedSplat> {
    order.iter().map(|&i| &projected[i as usize]).collect()
}

/// Tiled forward rasterization.
pub fn rasterize_forward(cam: &Camera, splats: &[WorldSplat], background: [f64; 3]) -> FrameBuffers {
    let projected: Vec<ProjectedSplat> = splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(cam, s, i))
        .collect();
    let grid = bin_to_tiles(cam, &projected);
    let mut out = FrameBuffers::new(cam.width, cam.height);

    struct TilePatch {
        tile: usize,
        color: Vec<[f64; 3]>,
        trans: Vec<f64>,
        n_contrib: Vec<u32>,
    }

    let patches: Vec<TilePatch> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (px0, px1, py0, py1) = tile_pixel_rect(cam, &grid, tile);
            let order = sorted_tile_indices(&projected, &grid.lists[tile]);
            let refs = tile_refs(&projected, &order);
            let npix = (px1 - px0) * (py1 - py0);
            let mut patch = TilePatch {
                tile,
                color: vec![[0.0; 3]; npix],
                trans: vec![1.0; npix],
                n_contrib: vec![0; npix],
            };
            let mut k = 0;
            for y in py0..py1 {
                for x in px0..px1 {
                    let (c, t, n) = composite_pixel(&refs, x as f64 + 0.5, y as f64 + 0.5, background);
                    patch.color[k] = c;
                    patch.trans[k] = t;
                    patch.n_contrib[k] = n;
                    k += 1;
                }
            }
            patch
        })
        .collect();

    for patch in patches {
        let (px0, px1, py0, py1) = tile_pixel_rect(cam, &grid, patch.tile);
        let mut k = 0;
        for y in py0..py1 {
            for x in px0..px1 {
                let pix = y * cam.width + x;
                out.color[pix] = patch.color[k];
                out.transmittance[pix] = patch.trans[k];
                out.n_contrib[pix] = patch.n_contrib[k];
                k += 1;
            }
        }
    }
    out
}

fn tile_pixel_rect(cam: &Camera, grid: &TileGrid, tile: usize) -> (usize, usize, usize, usize) {
    let tx = tile % grid.tiles_x;
    let ty = tile / grid.tiles_x;
    let px0 = tx * TILE;
    let py0 = ty * TILE;
    (px0, (px0 + TILE).min(cam.width), py0, (py0 + TILE).min(cam.height))
}

/// Brute-force oracle: every pixel blends over all splats, globally sorted.
pub fn reference_rasterize(cam: &Camera, splats: &[WorldSplat], background: [f64; 3]) -> FrameBuffers {
    let projected: Vec<ProjectedSplat> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(cam, s, i))
        .collect();
    let mut refs: Vec<&ProjectedSplat> = projected.iter().collect();
    refs.sort_by(|a, b| depth_order(a, b));

    let mut out = FrameBuffers::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (c, t, n) = composite_pixel(&refs, x as f64 + 0.5, y as f64 + 0.5, background);
            let pix = y * cam.width + x;
            out.color[pix] = c;
            out.transmittance[pix] = t;
            out.n_contrib[pix] = n;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Splat2DGrad {
    d_mean: Vector2<f64>,
    d_conic: [f64; 3],
    d_opacity: f64,
    d_color: [f64; 3],
}

impl Splat2DGrad {
    fn zero() -> Self {
        Splat2DGrad {
            d_mean: Vector2::zeros(),
            d_conic: [0.0; 3],
            d_opacity: 0.0,
            d_color: [0.0; 3],
        }
    }

    fn add(&mut self, o: &Splat2DGrad) {
        self.d_mean += o.d_mean;
        for k in 0..3 {
            self.d_conic[k] += o.d_conic[k];
            self.d_color[k] += o.d_color[k];
        }
        self.d_opacity += o.d_opacity;
    }
}

/// Backward pass of [`rasterize_forward`]: gradients of a scalar loss with
/// respect to every input splat, given the loss gradient of the image.
///
/// `buffers` must come from a forward pass over the same splats and camera;
/// the stored contributor counts drive the per-pixel re-walk.
pub fn rasterize_backward(
    cam: &Camera,
    splats: &[WorldSplat],
    buffers: &FrameBuffers,
    d_image: &[[f64; 3]],
    background: [f64; 3],
) -> Result<WorldSplatGrads> {
    if buffers.width != cam.width || buffers.height != cam.height || d_image.len() != cam.width * cam.height {
        return Err(Error::Numeric("image gradient does not match the camera resolution".into()));
    }
    let projected: Vec<ProjectedSplat> = splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(cam, s, i))
        .collect();
    let grid = bin_to_tiles(cam, &projected);

    // Per-tile accumulation, merged in tile order below; this keeps the
    // result independent of how tiles are scheduled across threads.
    let tile_grads: Vec<Result<(Vec<u32>, Vec<Splat2DGrad>)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (px0, px1, py0, py1) = tile_pixel_rect(cam, &grid, tile);
            let order = sorted_tile_indices(&projected, &grid.lists[tile]);
            let refs = tile_refs(&projected, &order);
            let mut local = vec![Splat2DGrad::zero(); refs.len()];
            let mut walk: Vec<(usize, f64)> = Vec::with_capacity(refs.len());
            for y in py0..py1 {
                for x in px0..px1 {
                    let pix = y * cam.width + x;
                    backward_pixel(
                        &refs,
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        buffers.n_contrib[pix],
                        buffers.transmittance[pix],
                        d_image[pix],
                        background,
                        &mut walk,
                        &mut local,
                    )?;
                }
            }
            Ok((order, local))
        })
        .collect();

    let mut grads2d = vec![Splat2DGrad::zero(); projected.len()];
    for tile in tile_grads {
        let (order, local) = tile?;
        for (pos, g) in local.iter().enumerate() {
            grads2d[order[pos] as usize].add(g);
        }
    }

    // Chain each projected splat's 2D gradients back to world space.
    let per_splat: Vec<(usize, Vector3<f64>, Matrix3<f64>, f64, [f64; 3])> = projected
        .par_iter()
        .zip(&grads2d)
        .map(|(p, g)| {
            let (d_center, d_cov, d_opacity) = project_splat_backward(cam, &splats[p.source], p, g);
            (p.source, d_center, d_cov, d_opacity, g.d_color)
        })
        .collect();

    let mut out = WorldSplatGrads::zeros(splats.len());
    for (source, d_center, d_cov, d_opacity, d_color) in per_splat {
        out.d_center[source] += d_center;
        out.d_cov[source] += d_cov;
        out.d_opacity[source] += d_opacity;
        for ch in 0..3 {
            out.d_color[source][ch] += d_color[ch];
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    sorted: &[&ProjectedSplat],
    px: f64,
    py: f64,
    n_contrib: u32,
    final_trans: f64,
    d_pix: [f64; 3],
    background: [f64; 3],
    walk: &mut Vec<(usize, f64)>,
    local: &mut [Splat2DGrad],
) -> Result<()> {
    if n_contrib == 0 {
        return Ok(());
    }
    if d_pix == [0.0; 3] {
        return Ok(());
    }
    // Re-enumerate the contributors the forward pass composited.
    walk.clear();
    for (pos, s) in sorted.iter().enumerate() {
        if walk.len() as u32 == n_contrib {
            break;
        }
        if let Some(alpha) = splat_alpha(s, px, py) {
            walk.push((pos, alpha));
        }
    }
    if walk.len() as u32 != n_contrib {
        return Err(Error::Numeric(
            "stored contributor count does not match the splat list; forward and backward state disagree"
                .into(),
        ));
    }

    // Back to front: recover each contributor's incoming transmittance and
    // the color accumulated behind it (including the background term).
    let mut trans_after = final_trans;
    let mut behind = [
        final_trans * background[0],
        final_trans * background[1],
        final_trans * background[2],
    ];
    for &(pos, alpha) in walk.iter().rev() {
        let s = sorted[pos];
        let trans = trans_after / (1.0 - alpha);
        let w = alpha * trans;

        let g = &mut local[pos];
        let mut d_alpha = 0.0;
        for ch in 0..3 {
            g.d_color[ch] += d_pix[ch] * w;
            d_alpha += d_pix[ch] * (s.color[ch] * trans - behind[ch] / (1.0 - alpha));
        }

        // The cap is flat: capped contributions pass no alpha gradient.
        let dx = px - s.mean.x;
        let dy = py - s.mean.y;
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * (dx * dy) + s.conic[2] * (dy * dy);
        let raw = s.opacity * (-0.5 * q).exp();
        if raw <= ALPHA_CAP {
            let d_q = d_alpha * (-0.5) * raw;
            g.d_opacity += d_alpha * (-0.5 * q).exp();
            g.d_conic[0] += d_q * dx * dx;
            g.d_conic[1] += d_q * 2.0 * dx * dy;
            g.d_conic[2] += d_q * dy * dy;
            g.d_mean.x += d_q * -(2.0 * s.conic[0] * dx + 2.0 * s.conic[1] * dy);
            g.d_mean.y += d_q * -(2.0 * s.conic[1] * dx + 2.0 * s.conic[2] * dy);
        }

        for ch in 0..3 {
            behind[ch] += w * s.color[ch];
        }
        trans_after = trans;
    }
    Ok(())
}

/// Chains 2D splat gradients through the projection to world space.
fn project_splat_backward(
    cam: &Camera,
    splat: &WorldSplat,
    proj: &ProjectedSplat,
    g: &Splat2DGrad,
) -> (Vector3<f64>, Matrix3<f64>, f64) {
    let t = cam.world_to_camera.apply_point(splat.center);
    let j = perspective_jacobian(cam, t);
    let m = j * cam.world_to_camera.linear;

    // The conic is the inverse of the 2D covariance; the gradient of an
    // inverse is -inv . G . inv with the off-diagonal entry split.
    let inv = Matrix2::new(proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2]);
    let g_conic = Matrix2::new(
        g.d_conic[0],
        0.5 * g.d_conic[1],
        0.5 * g.d_conic[1],
        g.d_conic[2],
    );
    let d_cov2 = -inv * g_conic * inv;

    let d_cov3 = m.transpose() * d_cov2 * m;
    let d_m = 2.0 * d_cov2 * m * splat.cov;
    let d_j = d_m * cam.world_to_camera.linear.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = t.z * t.z;
    let mut d_t = Vector3::zeros();
    // Jacobian entries: j00 = fx/z, j02 = -fx x/z^2, j11 = fy/z, j12 = -fy y/z^2.
    d_t.x += d_j[(0, 2)] * (-fx / z2);
    d_t.y += d_j[(1, 2)] * (-fy / z2);
    d_t.z += d_j[(0, 0)] * (-fx / z2)
        + d_j[(1, 1)] * (-fy / z2)
        + d_j[(0, 2)] * (2.0 * fx * t.x / (z2 * t.z))
        + d_j[(1, 2)] * (2.0 * fy * t.y / (z2 * t.z));
    // Screen mean: u = fx x/z + cx, v = fy y/z + cy.
    d_t.x += g.d_mean.x * fx / t.z;
    d_t.y += g.d_mean.y * fy / t.z;
    d_t.z += g.d_mean.x * (-fx * t.x / z2) + g.d_mean.y * (-fy * t.y / z2);

    let d_center = cam.world_to_camera.linear.transpose() * d_t;
    (d_center, d_cov3, g.d_opacity)
}

/// A central difference crossing the 1/255 skip threshold, the opacity cap,
/// or the transmittance stop at any pixel sees a jump or a kink instead of a
/// slope. Gradient checks across the crate screen their random scenes with
/// this: every (splat, pixel) alpha keeps a margin from both alpha
/// thresholds, every splat survives projection, and no pixel comes anywhere
/// near the transmittance stop.
#[cfg(test)]
pub(crate) fn fd_thresholds_clear(cam: &Camera, scene: &[WorldSplat], margin: f64) -> bool {
    for (i, s) in scene.iter().enumerate() {
        let Some(p) = project_splat(cam, s, i) else {
            return false;
        };
        for y in 0..cam.height {
            for x in 0..cam.width {
                let dx = x as f64 + 0.5 - p.mean.x;
                let dy = y as f64 + 0.5 - p.mean.y;
                let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * (dx * dy) + p.conic[2] * (dy * dy);
                let raw = p.opacity * (-0.5 * q).exp();
                if (raw - ALPHA_SKIP).abs() < margin || (raw - ALPHA_CAP).abs() < margin {
                    return false;
                }
            }
        }
    }
    let out = reference_rasterize(cam, scene, [0.0; 3]);
    out.transmittance.iter().all(|&t| t > 0.01)
}
