//! View-dependent color from degree-2 real spherical harmonics, plus the
//! scalar brightness (ambient occlusion) factor applied on top.

use nalgebra::Vector3;

/// Y_0^0.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Shared |Y_1^m| factor.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// Degree-2 factors in basis order.
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Number of basis functions per channel (degrees 0..=2).
pub const SH_BASIS: usize = 9;
/// Total coefficient count for an RGB color.
pub const SH_COEFFS: usize = 27;

/// The nine basis values at a unit direction.
pub fn sh_basis(d: Vector3<f64>) -> [f64; SH_BASIS] {
    let (x, y, z) = (d[0], d[1], d[2]);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ]
}

/// Derivative of each basis value with respect to the direction components.
fn sh_basis_jacobian(d: Vector3<f64>) -> [[f64; 3]; SH_BASIS] {
    let (x, y, z) = (d[0], d[1], d[2]);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
    ]
}

/// Decodes RGB from 27 coefficients (channel-major: 9 for red, then green,
/// then blue) at a unit view direction. An offset of 0.5 centers the DC term;
/// negative results clamp to zero, there is no upper clamp.
pub fn eval_sh(sh: &[f64; SH_COEFFS], dir: Vector3<f64>) -> Vector3<f64> {
    let basis = sh_basis(dir);
    Vector3::from_fn(|ch, _| {
        let mut v = 0.5;
        for (k, b) in basis.iter().enumerate() {
            v += sh[SH_BASIS * ch + k] * b;
        }
        v.max(0.0)
    })
}

/// Backward of [`eval_sh`]: gradients for the coefficients and the direction.
/// Channels that clamped to zero pass no gradient.
pub fn eval_sh_backward(
    sh: &[f64; SH_COEFFS],
    dir: Vector3<f64>,
    d_rgb: Vector3<f64>,
) -> ([f64; SH_COEFFS], Vector3<f64>) {
    let basis = sh_basis(dir);
    let jac = sh_basis_jacobian(dir);
    let mut d_sh = [0.0; SH_COEFFS];
    let mut d_dir = Vector3::zeros();
    for ch in 0..3 {
        let mut pre = 0.5;
        for (k, b) in basis.iter().enumerate() {
            pre += sh[SH_BASIS * ch + k] * b;
        }
        if pre <= 0.0 {
            continue;
        }
        let up = d_rgb[ch];
        for k in 0..SH_BASIS {
            d_sh[SH_BASIS * ch + k] = up * basis[k];
            let c = sh[SH_BASIS * ch + k];
            d_dir[0] += up * c * jac[k][0];
            d_dir[1] += up * c * jac[k][1];
            d_dir[2] += up * c * jac[k][2];
        }
    }
    (d_sh, d_dir)
}

/// Scales a decoded color by the brightness factor.
pub fn apply_ao(rgb: Vector3<f64>, ao: f64) -> Vector3<f64> {
    rgb * ao
}

/// Backward of [`apply_ao`]: gradients for the color and the factor.
pub fn apply_ao_backward(
    rgb: Vector3<f64>,
    ao: f64,
    d_out: Vector3<f64>,
) -> (Vector3<f64>, f64) {
    (d_out * ao, rgb.dot(&d_out))
}
