//! Rigid transforms, pinhole calibration and LiDAR-to-image projection.
//!
//! Frames: the vehicle/LiDAR frame is x forward, y left, z up with its origin
//! on the ground below the sensor. Camera frames are x right, y down, z along
//! the optical axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Projections with camera-frame depth at or below this are rejected.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn mat_vec(m: &Mat3, p: &Vec3) -> Vec3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn length(a: &Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - want).abs() > ORTHONORMAL_TOL {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        if (det(&rotation) - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid("rotation determinant is not +1"));
        }
        if translation.iter().chain(rotation.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite transform entry"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: IDENTITY3,
            translation,
        }
    }

    /// Rotation about z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self::from_euler(0.0, 0.0, yaw, translation)
    }

    /// `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vec3) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let rotation = [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ];
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == IDENTITY3 && self.translation == [0.0; 3]
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Applies only the rotation (for directions).
    #[inline]
    pub fn rotate(&self, d: &Vec3) -> Vec3 {
        mat_vec(&self.rotation, d)
    }

    /// `compose(a, b)(p) == a(b(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = mat_mul(&self.rotation, &other.rotation);
        let translation = self.apply(&other.translation);
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Largest absolute entry difference against `other`.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let r = self
            .rotation
            .iter()
            .flatten()
            .zip(other.rotation.iter().flatten())
            .map(|(a, b)| (a - b).abs());
        let t = self
            .translation
            .iter()
            .zip(&other.translation)
            .map(|(a, b)| (a - b).abs());
        r.chain(t).fold(0.0, f64::max)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Each point `p` becomes `R p + t`. The identity returns the input untouched.
pub fn transform_points(points: &[Vec3], transform: &RigidTransform) -> Vec<Vec3> {
    if transform.is_identity() {
        return points.to_vec();
    }
    points.iter().map(|p| transform.apply(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration {
    pub intrinsics: CameraIntrinsics,
    /// LiDAR frame to camera frame.
    pub extrinsic: RigidTransform,
    pub height: usize,
    pub width: usize,
}

impl CameraCalibration {
    pub fn new(
        intrinsics: CameraIntrinsics,
        extrinsic: RigidTransform,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        Ok(Self {
            intrinsics,
            extrinsic,
            height,
            width,
        })
    }

    /// Camera with optical center at `center` (LiDAR frame), looking
    /// horizontally along azimuth `yaw` (radians, counter-clockwise from +x).
    pub fn looking_along(
        yaw: f64,
        center: Vec3,
        intrinsics: CameraIntrinsics,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // Rows are the camera axes expressed in the LiDAR frame.
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let rc = mat_vec(&rotation, &center);
        let extrinsic = RigidTransform::new(rotation, [-rc[0], -rc[1], -rc[2]])?;
        Self::new(intrinsics, extrinsic, height, width)
    }

    /// Optical center in the LiDAR frame.
    pub fn center(&self) -> Vec3 {
        self.extrinsic.inverse().translation
    }

    /// Ray through the center of pixel `(row, col)`, as (origin, unit
    /// direction) in the LiDAR frame.
    pub fn pixel_ray(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let d_cam = [
            (col as f64 + 0.5 - k.cx) / k.fx,
            (row as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        ];
        let inv = self.extrinsic.inverse();
        let d = inv.rotate(&d_cam);
        let n = length(&d);
        (inv.translation, [d[0] / n, d[1] / n, d[2] / n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PixelProjection {
    /// Integer pixel owning this projection as (row, col).
    #[inline]
    pub fn pixel(&self) -> (usize, usize) {
        (self.v.floor() as usize, self.u.floor() as usize)
    }
}

/// Projects a LiDAR-frame point into the image. Returns `None` behind the
/// camera or outside `[0, W) x [0, H)`.
pub fn project_point(point: &Vec3, calib: &CameraCalibration) -> Option<PixelProjection> {
    let pc = calib.extrinsic.apply(point);
    let z = pc[2];
    if z <= MIN_DEPTH || !z.is_finite() {
        return None;
    }
    let k = &calib.intrinsics;
    let u = k.fx * pc[0] / z + k.cx;
    let v = k.fy * pc[1] / z + k.cy;
    if !(u >= 0.0 && u < calib.width as f64 && v >= 0.0 && v < calib.height as f64) {
        return None;
    }
    Some(PixelProjection { u, v, depth: z })
}
