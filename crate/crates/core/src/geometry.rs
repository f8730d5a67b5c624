//! Rigid motion model and trilinear backward-warping resampler.
//!
//! Conventions (ground-truth labels depend on them):
//! - coordinates are voxel indices `(x, y, z)`, x fastest in memory;
//! - rotations are about the volume center `((n - 1) / 2, ...)`;
//! - the matrix is `T(c) · Rz · Ry · Rx · T(-c) · T(t)`, i.e. translate
//!   first, then rotate about the center with x applied first;
//! - angles are in degrees, translations in voxels.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result, Volume};

pub type Mat4 = Matrix4<f64>;

/// Six-parameter rigid misregistration: translations in voxels, rotations in
/// degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl RigidParams {
    pub const ZERO: RigidParams = RigidParams {
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
        ax: 0.0,
        ay: 0.0,
        az: 0.0,
    };

    /// Order `(tx, ty, tz, ax, ay, az)`.
    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tz: a[2],
            ax: a[3],
            ay: a[4],
            az: a[5],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.ax, self.ay, self.az]
    }

    pub fn translation(self) -> [f64; 3] {
        [self.tx, self.ty, self.tz]
    }

    pub fn rotation(self) -> [f64; 3] {
        [self.ax, self.ay, self.az]
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn volume_center(dims: [usize; 3]) -> Vector3<f64> {
    Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    )
}

/// `Rz(az) · Ry(ay) · Rx(ax)` with angles in degrees.
pub fn rotation_matrix(p: RigidParams) -> Matrix3<f64> {
    let (sx, cx) = p.ax.to_radians().sin_cos();
    let (sy, cy) = p.ay.to_radians().sin_cos();
    let (sz, cz) = p.az.to_radians().sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

fn affine(r: Matrix3<f64>, t: Vector3<f64>) -> Mat4 {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// Homogeneous voxel-space matrix of `p` for a grid of `dims`.
pub fn params_to_matrix(p: RigidParams, dims: [usize; 3]) -> Mat4 {
    let c = volume_center(dims);
    let r = rotation_matrix(p);
    let t = Vector3::new(p.tx, p.ty, p.tz);
    // T(c) R T(-c) T(t): x -> R (x + t - c) + c
    affine(r, r * (t - c) + c)
}

/// Exact inverse of [`params_to_matrix`].
pub fn invert(p: RigidParams, dims: [usize; 3]) -> Mat4 {
    let m = params_to_matrix(p, dims);
    let rt = m.fixed_view::<3, 3>(0, 0).transpose();
    let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
    affine(rt, -(rt * t))
}

/// Backward-warps `v` by `m`: output voxel `q` takes the trilinear sample
/// of `v` at `m⁻¹ q`. Samples outside the source grid read as 0.
pub fn resample(v: &Volume, m: &Mat4) -> Result<Volume> {
    let inv = m.try_inverse().ok_or(CoreError::Singular)?;
    if !inv.iter().all(|x| x.is_finite()) {
        return Err(CoreError::Singular);
    }
    Ok(resample_with_inverse(v, &inv))
}

/// Like [`resample`] but takes the output→source map directly.
pub fn resample_with_inverse(v: &Volume, inv: &Mat4) -> Volume {
    let [nx, ny, nz] = v.dims();
    let src = v.data();
    let mut out = vec![0.0f32; src.len()];
    let step_x = Vector3::new(inv[(0, 0)], inv[(1, 0)], inv[(2, 0)]);
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            let start = inv * Vector4::new(0.0, y as f64, z as f64, 1.0);
            let mut p = Vector3::new(start[0], start[1], start[2]);
            for _ in 0..nx {
                out[i] = trilinear(src, [nx, ny, nz], p) as f32;
                p += step_x;
                i += 1;
            }
        }
    }
    Volume::from_parts(v.dims(), v.spacing_mm(), v.modality(), out)
}

#[inline]
fn trilinear(src: &[f32], dims: [usize; 3], p: Vector3<f64>) -> f64 {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (p[0], p[1], p[2]);
    if !(x > -1.0 && y > -1.0 && z > -1.0)
        || x >= nx as f64
        || y >= ny as f64
        || z >= nz as f64
    {
        return 0.0;
    }
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let (x0, y0, z0) = (x0 as isize, y0 as isize, z0 as isize);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        let zi = z0 + dz;
        if wz == 0.0 || zi < 0 || zi >= nz as isize {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let yi = y0 + dy;
            if wy == 0.0 || yi < 0 || yi >= ny as isize {
                continue;
            }
            let row = (zi as usize * ny + yi as usize) * nx;
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let xi = x0 + dx;
                if wx == 0.0 || xi < 0 || xi >= nx as isize {
                    continue;
                }
                acc += wz * wy * wx * src[row + xi as usize] as f64;
            }
        }
    }
    acc
}
