//! Photometric losses: L1, structural dissimilarity, and their mix.
//!
//! Images are flat rows of `[r, g, b]` pixels in linear color. The
//! structural term follows the standard windowed-statistics form with an
//! 11x11 Gaussian window; windows are zero-padded at the borders so the
//! loss keeps the image dimensions.

use crate::error::{Error, Result};

/// Mixing weight and window shape for [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the structural term; the L1 term gets `1 - lambda`.
    pub lambda: f64,
    /// Side length of the Gaussian window, odd.
    pub window: usize,
    /// Standard deviation of the Gaussian window in pixels.
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.2,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "loss mixing weight {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "window size {} must be odd and positive",
                self.window
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "window sigma {} must be positive",
                self.sigma
            )));
        }
        Ok(())
    }
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(width: usize, height: usize, img: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if img.len() != width * height || gt.len() != width * height {
        return Err(Error::InvalidParameter(format!(
            "image sizes {} and {} do not match {}x{}",
            img.len(),
            gt.len(),
            width,
            height
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(img: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if img.len() != gt.len() {
        return Err(Error::InvalidParameter(format!(
            "image sizes {} and {} differ",
            img.len(),
            gt.len()
        )));
    }
    if img.is_empty() {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    let sum: f64 = img
        .iter()
        .zip(gt)
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs())
        .sum();
    Ok(sum / (3.0 * img.len() as f64))
}

/// Gradient of [`l1_loss`] with respect to `img`.
pub fn l1_loss_backward(img: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if img.len() != gt.len() || img.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "image sizes {} and {} differ or are empty",
            img.len(),
            gt.len()
        )));
    }
    let scale = 1.0 / (3.0 * img.len() as f64);
    Ok(img
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let mut g = [0.0; 3];
            for ch in 0..3 {
                let d = a[ch] - b[ch];
                g[ch] = if d > 0.0 {
                    scale
                } else if d < 0.0 {
                    -scale
                } else {
                    0.0
                };
            }
            g
        })
        .collect())
}

fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut taps: Vec<f64> = (0..window)
        .map(|k| (-((k as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Separable zero-padded blur of one channel plane, in place of `out`.
fn blur(width: usize, height: usize, taps: &[f64], src: &[f64], tmp: &mut [f64], out: &mut [f64]) {
    let half = taps.len() / 2;
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - half as isize;
                if xx >= 0 && (xx as usize) < width {
                    acc += t * src[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - half as isize;
                if yy >= 0 && (yy as usize) < height {
                    acc += t * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
}

/// The five windowed moments of one channel pair.
struct Moments {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    s_xx: Vec<f64>,
    s_yy: Vec<f64>,
    s_xy: Vec<f64>,
}

fn channel_moments(
    width: usize,
    height: usize,
    taps: &[f64],
    x: &[f64],
    y: &[f64],
) -> Moments {
    let n = width * height;
    let mut tmp = vec![0.0; n];
    let mut m = Moments {
        mu_x: vec![0.0; n],
        mu_y: vec![0.0; n],
        s_xx: vec![0.0; n],
        s_yy: vec![0.0; n],
        s_xy: vec![0.0; n],
    };
    blur(width, height, taps, x, &mut tmp, &mut m.mu_x);
    blur(width, height, taps, y, &mut tmp, &mut m.mu_y);
    let prod: Vec<f64> = x.iter().map(|v| v * v).collect();
    blur(width, height, taps, &prod, &mut tmp, &mut m.s_xx);
    let prod: Vec<f64> = y.iter().map(|v| v * v).collect();
    blur(width, height, taps, &prod, &mut tmp, &mut m.s_yy);
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    blur(width, height, taps, &prod, &mut tmp, &mut m.s_xy);
    m
}

fn channel_plane(img: &[[f64; 3]], ch: usize) -> Vec<f64> {
    img.iter().map(|p| p[ch]).collect()
}

/// Mean structural similarity over pixels and channels.
pub fn ssim(
    width: usize,
    height: usize,
    img: &[[f64; 3]],
    gt: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<f64> {
    check_pair(width, height, img, gt)?;
    cfg.validate()?;
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let mut total = 0.0;
    for ch in 0..3 {
        let x = channel_plane(img, ch);
        let y = channel_plane(gt, ch);
        let m = channel_moments(width, height, &taps, &x, &y);
        for p in 0..width * height {
            total += ssim_pixel(&m, p).0;
        }
    }
    Ok(total / (3.0 * (width * height) as f64))
}

/// Per-pixel similarity and the terms its gradient needs.
fn ssim_pixel(m: &Moments, p: usize) -> (f64, [f64; 5]) {
    let (u, v) = (m.mu_x[p], m.mu_y[p]);
    let a1 = 2.0 * u * v + SSIM_C1;
    let a2 = 2.0 * (m.s_xy[p] - u * v) + SSIM_C2;
    let b1 = u * u + v * v + SSIM_C1;
    let b2 = (m.s_xx[p] - u * u) + (m.s_yy[p] - v * v) + SSIM_C2;
    let d = b1 * b2;
    let s = a1 * a2 / d;
    // Partials with respect to (mu_x, mu_y, s_xx, s_yy, s_xy).
    let d_u = (2.0 * v * (a2 - a1) - 2.0 * u * s * (b2 - b1)) / d;
    let d_v = (2.0 * u * (a2 - a1) - 2.0 * v * s * (b2 - b1)) / d;
    let d_sxx = -s / b2;
    let d_syy = -s / b2;
    let d_sxy = 2.0 * a1 / d;
    (s, [d_u, d_v, d_sxx, d_syy, d_sxy])
}

/// Structural dissimilarity `(1 - SSIM) / 2`.
pub fn dssim_loss(
    width: usize,
    height: usize,
    img: &[[f64; 3]],
    gt: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<f64> {
    Ok((1.0 - ssim(width, height, img, gt, cfg)?) / 2.0)
}

/// Gradient of [`dssim_loss`] with respect to `img`. The window is
/// symmetric, so the adjoint of each blur is the blur itself.
pub fn dssim_loss_backward(
    width: usize,
    height: usize,
    img: &[[f64; 3]],
    gt: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<Vec<[f64; 3]>> {
    check_pair(width, height, img, gt)?;
    cfg.validate()?;
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let n = width * height;
    // d dssim / d ssim_pixel, with the mean over pixels and channels.
    let upstream = -0.5 / (3.0 * n as f64);

    let mut out = vec![[0.0; 3]; n];
    let mut tmp = vec![0.0; n];
    let mut blurred = vec![0.0; n];
    for ch in 0..3 {
        let x = channel_plane(img, ch);
        let y = channel_plane(gt, ch);
        let m = channel_moments(width, height, &taps, &x, &y);

        let mut d_mu = vec![0.0; n];
        let mut d_sxx = vec![0.0; n];
        let mut d_sxy = vec![0.0; n];
        for p in 0..n {
            let (_, partials) = ssim_pixel(&m, p);
            d_mu[p] = upstream * partials[0];
            d_sxx[p] = upstream * partials[2];
            d_sxy[p] = upstream * partials[4];
        }

        // mu_x = blur(x).
        blur(width, height, &taps, &d_mu, &mut tmp, &mut blurred);
        for p in 0..n {
            out[p][ch] += blurred[p];
        }
        // s_xx = blur(x * x).
        blur(width, height, &taps, &d_sxx, &mut tmp, &mut blurred);
        for p in 0..n {
            out[p][ch] += 2.0 * x[p] * blurred[p];
        }
        // s_xy = blur(x * y).
        blur(width, height, &taps, &d_sxy, &mut tmp, &mut blurred);
        for p in 0..n {
            out[p][ch] += y[p] * blurred[p];
        }
    }
    Ok(out)
}

/// `(1 - lambda) * L1 + lambda * DSSIM`.
pub fn total_loss(
    width: usize,
    height: usize,
    img: &[[f64; 3]],
    gt: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<f64> {
    let l1 = l1_loss(img, gt)?;
    let ds = dssim_loss(width, height, img, gt, cfg)?;
    Ok((1.0 - cfg.lambda) * l1 + cfg.lambda * ds)
}

/// Loss value plus its gradient with respect to `img` in one pass.
pub fn total_loss_with_grad(
    width: usize,
    height: usize,
    img: &[[f64; 3]],
    gt: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<(f64, Vec<[f64; 3]>)> {
    let value = total_loss(width, height, img, gt, cfg)?;
    let d_l1 = l1_loss_backward(img, gt)?;
    let mut grad = dssim_loss_backward(width, height, img, gt, cfg)?;
    for (g, l) in grad.iter_mut().zip(&d_l1) {
        for ch in 0..3 {
            g[ch] = cfg.lambda * g[ch] + (1.0 - cfg.lambda) * l[ch];
        }
    }
    Ok((value, grad))
}

/// Cap for the peak signal-to-noise ratio; exact matches report this.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in decibels for unit-range images.
pub fn psnr(img: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if img.len() != gt.len() || img.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "image sizes {} and {} differ or are empty",
            img.len(),
            gt.len()
        )));
    }
    let mse: f64 = img
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
        })
        .sum::<f64>()
        / (3.0 * img.len() as f64);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect()
    }

    #[test]
    fn l1_of_identical_images_is_zero() {
        let img = random_image(1, 64);
        assert_eq!(l1_loss(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn l1_of_constant_offset_is_the_offset() {
        let gt = random_image(2, 64);
        let img: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]).collect();
        let loss = l1_loss(&img, &gt).unwrap();
        assert!((loss - 0.1).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        let img = random_image(3, 200);
        let gt = random_image(4, 200);
        let mut acc = 0.0;
        let mut count = 0.0;
        for (a, b) in img.iter().zip(&gt) {
            for ch in 0..3 {
                acc += (a[ch] - b[ch]).abs();
                count += 1.0;
            }
        }
        assert!((l1_loss(&img, &gt).unwrap() - acc / count).abs() < 1e-12);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let img = random_image(5, 10);
        let gt = random_image(6, 11);
        assert!(l1_loss(&img, &gt).is_err());
        assert!(dssim_loss(2, 5, &img, &gt, &LossConfig::default()).is_err());
        assert!(psnr(&img, &gt).is_err());
    }

    #[test]
    fn dssim_of_identical_images_is_zero() {
        let img = random_image(7, 16 * 16);
        let v = dssim_loss(16, 16, &img, &img, &LossConfig::default()).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    /// Direct per-window quadratic-time statistics, the oracle for the
    /// separable implementation.
    fn ssim_oracle(width: usize, height: usize, img: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
        let cfg = LossConfig::default();
        let taps = gaussian_taps(cfg.window, cfg.sigma);
        let half = cfg.window as isize / 2;
        let mut total = 0.0;
        for ch in 0..3 {
            for py in 0..height as isize {
                for px in 0..width as isize {
                    let (mut mu_x, mut mu_y, mut s_xx, mut s_yy, mut s_xy) =
                        (0.0, 0.0, 0.0, 0.0, 0.0);
                    for wy in -half..=half {
                        for wx in -half..=half {
                            let (x, y) = (px + wx, py + wy);
                            if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                                continue;
                            }
                            let w = taps[(wx + half) as usize] * taps[(wy + half) as usize];
                            let a = img[y as usize * width + x as usize][ch];
                            let b = gt[y as usize * width + x as usize][ch];
                            mu_x += w * a;
                            mu_y += w * b;
                            s_xx += w * a * a;
                            s_yy += w * b * b;
                            s_xy += w * a * b;
                        }
                    }
                    let a1 = 2.0 * mu_x * mu_y + SSIM_C1;
                    let a2 = 2.0 * (s_xy - mu_x * mu_y) + SSIM_C2;
                    let b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
                    let b2 = (s_xx - mu_x * mu_x) + (s_yy - mu_y * mu_y) + SSIM_C2;
                    total += a1 * a2 / (b1 * b2);
                }
            }
        }
        total / (3.0 * (width * height) as f64)
    }

    #[test]
    fn inverted_checkerboard_dissimilarity_matches_the_direct_oracle() {
        let (w, h) = (16, 16);
        let gt: Vec<[f64; 3]> = (0..w * h)
            .map(|p| {
                let v = ((p % w + p / w) % 2) as f64;
                [v, v, v]
            })
            .collect();
        let img: Vec<[f64; 3]> = gt.iter().map(|p| [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]).collect();
        let d = dssim_loss(w, h, &img, &gt, &LossConfig::default()).unwrap();
        assert!(d > 0.0 && d <= 1.0, "{d}");
        let oracle = (1.0 - ssim_oracle(w, h, &img, &gt)) / 2.0;
        assert!((d - oracle).abs() < 1e-8, "{d} vs {oracle}");
    }

    #[test]
    fn random_pair_similarity_matches_the_direct_oracle() {
        let (w, h) = (13, 9);
        let img = random_image(8, w * h);
        let gt = random_image(9, w * h);
        let s = ssim(w, h, &img, &gt, &LossConfig::default()).unwrap();
        assert!((s - ssim_oracle(w, h, &img, &gt)).abs() < 1e-8);
    }

    fn central_diff(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
    }

    #[test]
    fn dissimilarity_gradient_matches_finite_differences() {
        let (w, h) = (12, 10);
        let img = random_image(10, w * h);
        let gt = random_image(11, w * h);
        let cfg = LossConfig::default();
        let grad = dssim_loss_backward(w, h, &img, &gt, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..40 {
            let p = rng.gen_range(0..w * h);
            let ch = rng.gen_range(0..3);
            let fd = central_diff(
                |d| {
                    let mut probe = img.clone();
                    probe[p][ch] += d;
                    dssim_loss(w, h, &probe, &gt, &cfg).unwrap()
                },
                1e-5,
            );
            let denom = grad[p][ch].abs().max(fd.abs()).max(1e-9);
            assert!(
                (grad[p][ch] - fd).abs() / denom < 1e-4,
                "pixel {p} channel {ch}: analytic {} vs fd {fd}",
                grad[p][ch]
            );
        }
    }

    #[test]
    fn mixed_loss_is_the_weighted_sum_of_its_parts() {
        let (w, h) = (12, 12);
        let img = random_image(13, w * h);
        let gt = random_image(14, w * h);
        let cfg = LossConfig::default();
        let total = total_loss(w, h, &img, &gt, &cfg).unwrap();
        let l1 = l1_loss(&img, &gt).unwrap();
        let ds = dssim_loss(w, h, &img, &gt, &cfg).unwrap();
        assert_eq!(total, 0.8 * l1 + 0.2 * ds);

        let pure = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(w, h, &img, &gt, &pure).unwrap(), l1);
        assert_eq!(total_loss(w, h, &img, &img, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn mixed_loss_gradient_matches_finite_differences() {
        let (w, h) = (10, 8);
        let img = random_image(15, w * h);
        let gt = random_image(16, w * h);
        let cfg = LossConfig::default();
        let (_, grad) = total_loss_with_grad(w, h, &img, &gt, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..30 {
            let p = rng.gen_range(0..w * h);
            let ch = rng.gen_range(0..3);
            let fd = central_diff(
                |d| {
                    let mut probe = img.clone();
                    probe[p][ch] += d;
                    total_loss(w, h, &probe, &gt, &cfg).unwrap()
                },
                1e-5,
            );
            let denom = grad[p][ch].abs().max(fd.abs()).max(1e-9);
            assert!(
                (grad[p][ch] - fd).abs() / denom < 1e-4,
                "pixel {p} channel {ch}: analytic {} vs fd {fd}",
                grad[p][ch]
            );
        }
    }

    #[test]
    fn psnr_hits_the_cap_only_for_identical_images() {
        let img = random_image(18, 50);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
        let gt: Vec<[f64; 3]> = img.iter().map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]).collect();
        let db = psnr(&img, &gt).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "{db}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(LossConfig { lambda: 1.2, ..Default::default() }.validate().is_err());
        assert!(LossConfig { window: 10, ..Default::default() }.validate().is_err());
        assert!(LossConfig { sigma: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
