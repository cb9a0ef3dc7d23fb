//! Real spherical-harmonic color basis up to degree 3.

use nalgebra::{Matrix3, Vector3};

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Basis values for `(l+1)²` coefficients at unit direction `d`, and their
/// partial derivatives with respect to the (unconstrained) components of `d`.
pub fn sh_basis_with_grad(d: &Vector3<f64>, degree: u8) -> (Vec<f64>, Vec<[f64; 3]>) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = vec![SH_C0];
    let mut g = vec![[0.0; 3]];
    if degree >= 1 {
        b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
        g.extend([[0.0, -SH_C1, 0.0], [0.0, 0.0, SH_C1], [-SH_C1, 0.0, 0.0]]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
        g.extend([
            [SH_C2[0] * y, SH_C2[0] * x, 0.0],
            [0.0, SH_C2[1] * z, SH_C2[1] * y],
            [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z],
            [SH_C2[3] * z, 0.0, SH_C2[3] * x],
            [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]);
        g.extend([
            [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
            [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
            [
                -2.0 * SH_C3[2] * x * y,
                SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * SH_C3[2] * y * z,
            ],
            [
                -6.0 * SH_C3[3] * x * z,
                -6.0 * SH_C3[3] * y * z,
                SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ],
            [
                SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * SH_C3[4] * x * y,
                8.0 * SH_C3[4] * x * z,
            ],
            [2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)],
            [SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, 0.0],
        ]);
    }
    (b, g)
}

pub fn sh_basis(d: &Vector3<f64>, degree: u8) -> Vec<f64> {
    sh_basis_with_grad(d, degree).0
}

/// Unclamped color `0.5 + Σ_k B_k · sh[3k + c]`.
pub fn sh_eval_raw(coeffs: &[f64], dir: &Vector3<f64>, degree: u8) -> [f64; 3] {
    let basis = sh_basis(dir, degree);
    let mut out = [0.5; 3];
    for (k, b) in basis.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += b * coeffs[3 * k + c];
        }
    }
    out
}

/// Color seen from direction `dir` (unit, pointing from the camera toward the
/// splat), clamped to [0, 1].
pub fn sh_eval(coeffs: &[f64], dir: &Vector3<f64>, degree: u8) -> [f64; 3] {
    sh_eval_raw(coeffs, dir, degree).map(|c| c.clamp(0.0, 1.0))
}

/// Jacobian of `v / |v|` with respect to `v`.
pub(crate) fn normalize_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let n = v.norm();
    let u = v / n;
    (Matrix3::identity() - u * u.transpose()) / n
}
