//! SE3 poses, twists, camera intrinsics and ray construction.
//!
//! Conventions used throughout the crate: the camera looks down +z in its own
//! frame with x right and y down (pinhole convention), and pose increments are
//! applied on the left (`delta * pose`).

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::{Error, Result};

/// Below this rotation magnitude the Rodrigues coefficients switch to their
/// second-order Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            return Vec3::ZERO;
        }
        self * (1.0 / n)
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.x, self.y, self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn zero() -> Self {
        Mat3([[0.0; 3]; 3])
    }

    pub fn skew(w: Vec3) -> Self {
        Mat3([[0.0, -w.z, w.y], [w.z, 0.0, -w.x], [-w.y, w.x, 0.0]])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.0[i][k] * o.0[k][j];
                }
                r[i][j] = s;
            }
        }
        Mat3(r)
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut r = self.0;
        for row in r.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        Mat3(r)
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut r = self.0;
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] += o.0[i][j];
            }
        }
        Mat3(r)
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Rigid transform: `p_world = r * p + t`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: Vec3::ZERO }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn rotate(&self, d: Vec3) -> Vec3 {
        self.rotation.mul_vec(d)
    }

    pub fn compose(&self, o: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul_mat(&o.rotation),
            translation: self.rotation.mul_vec(o.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -rt.mul_vec(self.translation) }
    }

    /// Checks orthonormality and unit determinant to `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rrt = self.rotation.mul_mat(&self.rotation.transpose());
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((rrt.0[i][j] - want).abs());
            }
        }
        err <= tol && (self.rotation.det() - 1.0).abs() <= tol && self.translation.is_finite()
    }
}

/// se3 element: translational part `v` (meters), rotational part `w` (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub v: Vec3,
    pub w: Vec3,
}

impl Twist {
    pub const ZERO: Twist = Twist { v: Vec3::ZERO, w: Vec3::ZERO };

    pub fn new(v: Vec3, w: Vec3) -> Self {
        Twist { v, w }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Twist { v: Vec3::new(a[0], a[1], a[2]), w: Vec3::new(a[3], a[4], a[5]) }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z]
    }
}

/// Rodrigues coefficients a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let s = theta.sin();
        let c = theta.cos();
        (s / theta, (1.0 - c) / (theta * theta), (theta - s) / (theta * theta * theta))
    }
}

/// Rotation matrix for a rotation vector.
pub fn so3_exp(w: Vec3) -> Mat3 {
    let theta = w.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let k = Mat3::skew(w);
    let k2 = k.mul_mat(&k);
    Mat3::identity().add(&k.scale(a)).add(&k2.scale(b))
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: Vec3) -> Mat3 {
    let theta = w.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let k = Mat3::skew(w);
    let k2 = k.mul_mat(&k);
    Mat3::identity().add(&k.scale(b)).add(&k2.scale(c))
}

/// Exponential map se3 -> SE3. Rotation by Rodrigues, translation through the
/// SE3 left Jacobian.
pub fn se3_exp(xi: Twist) -> Pose {
    Pose { rotation: so3_exp(xi.w), translation: so3_left_jacobian(xi.w).mul_vec(xi.v) }
}

/// Rotation-vector logarithm. Valid for rotation angles below pi.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vec3::new(
        r.0[2][1] - r.0[1][2],
        r.0[0][2] - r.0[2][0],
        r.0[1][0] - r.0[0][1],
    );
    if theta < SMALL_ANGLE {
        vee * 0.5
    } else {
        vee * (theta / (2.0 * theta.sin()))
    }
}

/// Logarithm map SE3 -> se3, inverse of [`se3_exp`].
pub fn se3_log(p: &Pose) -> Twist {
    let w = so3_log(&p.rotation);
    let theta = w.norm();
    let k = Mat3::skew(w);
    let k2 = k.mul_mat(&k);
    let v_inv = if theta < SMALL_ANGLE {
        Mat3::identity().add(&k.scale(-0.5)).add(&k2.scale(1.0 / 12.0))
    } else {
        let half = theta * 0.5;
        let coeff = (1.0 - half * half.cos() / half.sin().max(1e-300)) / (theta * theta);
        Mat3::identity().add(&k.scale(-0.5)).add(&k2.scale(coeff))
    };
    Twist { v: v_inv.mul_vec(p.translation), w }
}

/// Left Jacobian of SE(3) as a 6x6 matrix in (v, w) block order:
/// `exp(xi + d) ≈ exp(J d) * exp(xi)` for small `d`.
pub fn se3_left_jacobian(xi: Twist) -> [[f64; 6]; 6] {
    let jl = so3_left_jacobian(xi.w);
    let q = se3_jacobian_q(xi.v, xi.w);
    let mut out = [[0.0; 6]; 6];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = jl.0[i][j];
            out[i][j + 3] = q.0[i][j];
            out[i + 3][j + 3] = jl.0[i][j];
        }
    }
    out
}

/// The translation-rotation coupling block of the SE(3) left Jacobian.
fn se3_jacobian_q(v: Vec3, w: Vec3) -> Mat3 {
    let theta = w.norm();
    let (c1, c2, c3) = if theta < 1e-4 {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let s = theta.sin();
        let c = theta.cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let t4 = t3 * theta;
        let t5 = t4 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t5),
        )
    };
    let p = Mat3::skew(v);
    let q = Mat3::skew(w);
    let qp = q.mul_mat(&p);
    let pq = p.mul_mat(&q);
    let qpq = qp.mul_mat(&q);
    let qqp = q.mul_mat(&qp);
    let pqq = pq.mul_mat(&q);
    let qpqq = qpq.mul_mat(&q);
    let qqpq = qqp.mul_mat(&q);
    p.scale(0.5)
        .add(&qp.add(&pq).add(&qpq).scale(c1))
        .add(&qqp.add(&pqq).add(&qpq.scale(-3.0)).scale(c2))
        .add(&qpqq.add(&qqpq).scale(c3))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Parse("intrinsics: focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 || cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::Parse("intrinsics: principal point outside image".into()));
        }
        Ok(Intrinsics { fx, fy, cx, cy, width, height })
    }
}

/// World-space ray through pixel (u, v): origin at the camera center, unit
/// direction `R * ((u-cx)/fx, (v-cy)/fy, 1)`.
pub fn ray_from_pixel(k: &Intrinsics, pose: &Pose, u: f64, v: f64) -> (Vec3, Vec3) {
    let dir_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let d = pose.rotate(dir_cam).normalized();
    (pose.translation, d)
}

/// Camera-frame unprojection of pixel (u, v) at depth d (z = d).
pub fn unproject_pixel(k: &Intrinsics, u: f64, v: f64, depth: f64) -> Vec3 {
    Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth)
}

/// Writes poses as `frame_id r00 r01 r02 t0 r10 ... t2` (row-major 3x4).
pub fn save_poses(path: &Path, poses: &[(usize, Pose)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (id, p) in poses {
        let r = &p.rotation.0;
        let t = p.translation;
        writeln!(
            f,
            "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            id, r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1], r[2][2], t.z
        )?;
    }
    Ok(())
}

pub fn load_poses(path: &Path) -> Result<Vec<(usize, Pose)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("poses line {}: {}", lineno + 1, e)))?;
        if vals.len() != 13 {
            return Err(Error::Parse(format!(
                "poses line {}: expected frame id + 12 values, got {}",
                lineno + 1,
                vals.len()
            )));
        }
        let id = vals[0] as usize;
        let m = &vals[1..];
        let pose = Pose::new(
            Mat3([[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]),
            Vec3::new(m[3], m[7], m[11]),
        );
        out.push((id, pose));
    }
    Ok(out)
}

/// Writes intrinsics as a single `fx fy cx cy width height` line.
pub fn save_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{:.17e} {:.17e} {:.17e} {:.17e} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height)?;
    Ok(())
}

pub fn load_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = std::fs::read_to_string(path)?;
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(Error::Parse(format!("intrinsics: expected 6 fields, got {}", toks.len())));
    }
    let num = |i: usize| -> Result<f64> {
        toks[i].parse().map_err(|e| Error::Parse(format!("intrinsics field {}: {}", i, e)))
    };
    Intrinsics::new(
        num(0)?,
        num(1)?,
        num(2)?,
        num(3)?,
        toks[4].parse().map_err(|e| Error::Parse(format!("intrinsics width: {}", e)))?,
        toks[5].parse().map_err(|e| Error::Parse(format!("intrinsics height: {}", e)))?,
    )
}
