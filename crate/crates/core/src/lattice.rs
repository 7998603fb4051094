//! 3x3 cell algebra. Lattice rows are the cell vectors a, b, c.

use crate::scalar::{lit, Scalar};

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn dot<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Scalar>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn determinant<T: Scalar>(m: &Mat3<T>) -> T {
    dot(&m[0], &cross(&m[1], &m[2]))
}

/// Fractional row vector times lattice: Cartesian position.
#[inline]
pub fn frac_to_cart<T: Scalar>(f: &Vec3<T>, lattice: &Mat3<T>) -> Vec3<T> {
    let mut out = [T::zero(); 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = f[0] * lattice[0][k] + f[1] * lattice[1][k] + f[2] * lattice[2][k];
    }
    out
}

/// Distance between opposite faces of the cell, per axis.
pub fn perpendicular_widths<T: Scalar>(lattice: &Mat3<T>) -> Vec3<T> {
    let volume = determinant(lattice).abs();
    let mut widths = [T::zero(); 3];
    for (axis, w) in widths.iter_mut().enumerate() {
        let face = cross(&lattice[(axis + 1) % 3], &lattice[(axis + 2) % 3]);
        let area = norm(&face);
        *w = if area > T::zero() { volume / area } else { T::zero() };
    }
    widths
}

/// Cell parameters `(a, b, c, alpha, beta, gamma)`, angles in degrees.
pub fn cell_parameters<T: Scalar>(lattice: &Mat3<T>) -> [T; 6] {
    let a = norm(&lattice[0]);
    let b = norm(&lattice[1]);
    let c = norm(&lattice[2]);
    let angle = |u: &Vec3<T>, v: &Vec3<T>, nu: T, nv: T| {
        let cos = (dot(u, v) / (nu * nv)).max(-T::one()).min(T::one());
        cos.acos().to_degrees()
    };
    [
        a,
        b,
        c,
        angle(&lattice[1], &lattice[2], b, c),
        angle(&lattice[0], &lattice[2], a, c),
        angle(&lattice[0], &lattice[1], a, b),
    ]
}

/// `1 - cos²α - cos²β - cos²γ + 2 cosα cosβ cosγ`, the squared volume of a
/// cell with unit edges. Positive iff the angle triple is realizable.
pub fn angle_volume_factor<T: Scalar>(alpha: T, beta: T, gamma: T) -> T {
    let (ca, cb, cg) = (
        alpha.to_radians().cos(),
        beta.to_radians().cos(),
        gamma.to_radians().cos(),
    );
    T::one() - ca * ca - cb * cb - cg * cg + lit::<T>(2.0) * ca * cb * cg
}

/// Lattice from cell parameters in the standard orientation: a along x,
/// b in the xy plane. Returns `None` when the angles admit no cell.
pub fn lattice_from_parameters<T: Scalar>(params: &[T; 6]) -> Option<Mat3<T>> {
    let [a, b, c, alpha, beta, gamma] = *params;
    let (ca, cb) = (alpha.to_radians().cos(), beta.to_radians().cos());
    let (cg, sg) = (gamma.to_radians().cos(), gamma.to_radians().sin());
    if sg <= T::zero() {
        return None;
    }
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz_sq = c * c - cx * cx - cy * cy;
    if !(cz_sq > T::zero()) {
        return None;
    }
    let z = T::zero();
    Some([[a, z, z], [b * cg, b * sg, z], [cx, cy, cz_sq.sqrt()]])
}
