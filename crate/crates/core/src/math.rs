//! Small numeric building blocks shared by every stage: logistic helpers,
//! rotations from quaternions and Euler angles with hand-written backward
//! passes, and a 3D affine transform type used for bone matrices.

use nalgebra::{Matrix3, Vector3, Vector4};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d sigmoid(x) / dx expressed through the already computed output.
pub fn sigmoid_grad_from_output(y: f64) -> f64 {
    y * (1.0 - y)
}

/// Inverse of [`sigmoid`]. `p` must lie strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a quaternion stored as (w, x, y, z).
///
/// The input does not need unit norm; it is normalized here, and
/// [`quat_to_rot_backward`] differentiates through that normalization, so raw
/// quaternion storage can be optimized directly.
pub fn quat_to_rot(q: Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of `quat_to_rot` pulled back to the raw (unnormalized) quaternion.
pub fn quat_to_rot_backward(q: Vector4<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);

    // dR/d(unit component), each a 3x3 matrix; contract with d_rot.
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;

    let d_unit = Vector4::new(
        dw.dot(d_rot),
        dx.dot(d_rot),
        dy.dot(d_rot),
        dz.dot(d_rot),
    );
    // Through normalization: d_raw = (I - u u^T) d_unit / n.
    (d_unit - u * u.dot(&d_unit)) / n
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Rotation from Euler angles `omega = (a, b, c)` composed as
/// `Rz(c) * Ry(b) * Rx(a)`: the x rotation is applied to a point first.
/// One fixed convention everywhere; pose data must be authored against it.
pub fn euler_to_rot(omega: Vector3<f64>) -> Matrix3<f64> {
    rot_z(omega[2]) * rot_y(omega[1]) * rot_x(omega[0])
}

/// Gradient of `euler_to_rot` with respect to the three angles.
pub fn euler_to_rot_backward(omega: Vector3<f64>, d_rot: &Matrix3<f64>) -> Vector3<f64> {
    let (rx, ry, rz) = (rot_x(omega[0]), rot_y(omega[1]), rot_z(omega[2]));
    Vector3::new(
        (rz * ry * drot_x(omega[0])).dot(d_rot),
        (rz * drot_y(omega[1]) * rx).dot(d_rot),
        (drot_z(omega[2]) * ry * rx).dot(d_rot),
    )
}

/// 3D affine transform, the linear part kept separate from the translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine3 {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Affine3 {
    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Affine3 {
            linear,
            translation,
        }
    }

    pub fn identity() -> Self {
        Affine3::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Affine3::new(Matrix3::identity(), t)
    }

    /// Composition: `self` is applied after `rhs`.
    pub fn compose(&self, rhs: &Affine3) -> Affine3 {
        Affine3 {
            linear: self.linear * rhs.linear,
            translation: self.linear * rhs.translation + self.translation,
        }
    }

    pub fn apply_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.linear * p + self.translation
    }

    pub fn apply_vector(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.linear * v
    }

    /// Inverse assuming the linear part is invertible.
    pub fn inverse(&self) -> Option<Affine3> {
        let inv = self.linear.try_inverse()?;
        Some(Affine3 {
            linear: inv,
            translation: -(inv * self.translation),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Gradient half of [`Affine3`]: same shape, accumulated additively.
#[derive(Debug, Clone, Copy)]
pub struct Affine3Grad {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Affine3Grad {
    pub fn zero() -> Self {
        Affine3Grad {
            linear: Matrix3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn add(&mut self, other: &Affine3Grad) {
        self.linear += other.linear;
        self.translation += other.translation;
    }

    pub fn scale(&self, s: f64) -> Affine3Grad {
        Affine3Grad {
            linear: self.linear * s,
            translation: self.translation * s,
        }
    }
}

/// Backward of `c = a.compose(b)`: accumulates into the gradients of both
/// factors given the gradient of the composite.
pub fn compose_backward(
    a: &Affine3,
    b: &Affine3,
    d_c: &Affine3Grad,
    d_a: &mut Affine3Grad,
    d_b: &mut Affine3Grad,
) {
    // c.linear = a.linear * b.linear ; c.translation = a.linear * b.translation + a.translation
    d_a.linear += d_c.linear * b.linear.transpose() + d_c.translation * b.translation.transpose();
    d_a.translation += d_c.translation;
    d_b.linear += a.linear.transpose() * d_c.linear;
    d_b.translation += a.linear.transpose() * d_c.translation;
}
