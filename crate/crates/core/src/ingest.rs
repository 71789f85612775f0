//! Depth-frame loading, unprojection to oriented point clouds, synthetic
//! noise injection and voxel binning.
//!
//! Depth images are 16-bit grayscale PNGs in millimeters (0 = invalid). A
//! scene directory holds `depth/%06d.png`, `poses.txt` and `intrinsics.txt`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geom::{se3_exp, unproject_pixel, Intrinsics, Pose, Twist, Vec3};
use crate::tape::VoxelKey;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DepthFrame {
    /// Row-major W*H depths in meters; 0 marks an invalid pixel.
    pub depth: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub frame_id: usize,
}

impl DepthFrame {
    pub fn new(depth: Vec<f64>, intrinsics: Intrinsics, pose: Pose, frame_id: usize) -> Result<Self> {
        if depth.len() != intrinsics.width * intrinsics.height {
            return Err(Error::ShapeMismatch(format!(
                "depth has {} pixels for a {}x{} image",
                depth.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        if depth.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Parse("depth values must be finite and >= 0".into()));
        }
        Ok(DepthFrame { depth, intrinsics, pose, frame_id })
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.intrinsics.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}

/// World-frame points with unit normals, in matching order.
#[derive(Debug, Clone, Default)]
pub struct OrientedPointCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: OrientedPointCloud) {
        self.points.extend(other.points);
        self.normals.extend(other.normals);
    }
}

/// Points grouped by the voxel that contains them, keyed by floor(p / b).
/// Stored per point: local coordinates in [0,1)^3 and the world normal.
#[derive(Debug, Clone)]
pub struct VoxelBinning {
    pub voxel_size: f64,
    pub bins: BTreeMap<VoxelKey, Vec<(Vec3, Vec3)>>,
}

impl VoxelBinning {
    pub fn num_points(&self) -> usize {
        self.bins.values().map(|v| v.len()).sum()
    }
}

/// Per-pixel world-frame normals from cross products of neighboring
/// unprojections, oriented toward the camera. Pixels whose own depth or whose
/// right/down neighbor is invalid get `None`.
pub fn estimate_normals(f: &DepthFrame) -> Vec<Option<Vec3>> {
    let (w, h) = (f.intrinsics.width, f.intrinsics.height);
    let mut out = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let d = f.at(u, v);
            if d <= 0.0 || u + 1 >= w || v + 1 >= h {
                continue;
            }
            let dr = f.at(u + 1, v);
            let dd = f.at(u, v + 1);
            if dr <= 0.0 || dd <= 0.0 {
                continue;
            }
            let p = unproject_pixel(&f.intrinsics, u as f64, v as f64, d);
            let pr = unproject_pixel(&f.intrinsics, (u + 1) as f64, v as f64, dr);
            let pd = unproject_pixel(&f.intrinsics, u as f64, (v + 1) as f64, dd);
            let n = (pr - p).cross(pd - p);
            if n.norm() == 0.0 {
                continue;
            }
            let mut n = n.normalized();
            if n.dot(p) > 0.0 {
                n = -n;
            }
            out[v * w + u] = Some(f.pose.rotate(n));
        }
    }
    out
}

/// Unprojects all valid pixels to world points, attaching estimated normals.
/// Pixels without a valid normal are dropped.
pub fn unproject_frame(f: &DepthFrame) -> Result<OrientedPointCloud> {
    if f.valid_count() == 0 {
        return Err(Error::EmptyFrame);
    }
    let normals = estimate_normals(f);
    let (w, h) = (f.intrinsics.width, f.intrinsics.height);
    let mut cloud = OrientedPointCloud::default();
    for v in 0..h {
        for u in 0..w {
            let d = f.at(u, v);
            if d <= 0.0 {
                continue;
            }
            let Some(n) = normals[v * w + u] else { continue };
            let p = f.pose.apply(unproject_pixel(&f.intrinsics, u as f64, v as f64, d));
            cloud.points.push(p);
            cloud.normals.push(n);
        }
    }
    if cloud.is_empty() {
        return Err(Error::EmptyFrame);
    }
    Ok(cloud)
}

/// Projects a world point into the frame; returns (u, v, depth) without any
/// bounds check.
pub fn project_point(k: &Intrinsics, pose: &Pose, p: Vec3) -> (f64, f64, f64) {
    let pc = pose.inverse().apply(p);
    (k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy, pc.z)
}

/// Adds zero-mean Gaussian noise to every valid pixel, deterministically under
/// `seed`. Invalid pixels stay exactly zero.
pub fn add_depth_noise(f: &DepthFrame, sigma: f64, seed: u64) -> DepthFrame {
    if sigma == 0.0 {
        return f.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = f.clone();
    for d in out.depth.iter_mut() {
        if *d > 0.0 {
            *d = (*d + normal.sample(&mut rng)).max(0.0);
        }
    }
    out
}

/// Left-composes a Gaussian pose increment: translation components drawn with
/// std `sigma_t` (meters), rotation components with std `sigma_r` (radians).
pub fn perturb_pose(pose: &Pose, sigma_t: f64, sigma_r: f64, seed: u64) -> Pose {
    if sigma_t == 0.0 && sigma_r == 0.0 {
        return *pose;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |sigma: f64| -> Vec3 {
        if sigma == 0.0 {
            return Vec3::ZERO;
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng))
    };
    let v = draw(sigma_t);
    let w = draw(sigma_r);
    se3_exp(Twist::new(v, w)).compose(pose)
}

/// Merges per-frame clouds in frame order.
pub fn accumulate(frames: &[DepthFrame]) -> Result<OrientedPointCloud> {
    let mut cloud = OrientedPointCloud::default();
    for f in frames {
        match unproject_frame(f) {
            Ok(c) => cloud.extend(c),
            Err(Error::EmptyFrame) => {}
            Err(e) => return Err(e),
        }
    }
    if cloud.is_empty() {
        return Err(Error::EmptyFrame);
    }
    Ok(cloud)
}

/// Bins points into voxels of size `b`: key = floor(p/b) per component,
/// local coordinate = p/b - key in [0,1)^3.
pub fn bin_points(cloud: &OrientedPointCloud, b: f64) -> Result<VoxelBinning> {
    if b <= 0.0 {
        return Err(Error::Parse("voxel size must be positive".into()));
    }
    let mut bins: BTreeMap<VoxelKey, Vec<(Vec3, Vec3)>> = BTreeMap::new();
    for (p, n) in cloud.points.iter().zip(&cloud.normals) {
        let s = Vec3::new(p.x / b, p.y / b, p.z / b);
        let key = [s.x.floor() as i32, s.y.floor() as i32, s.z.floor() as i32];
        let local = Vec3::new(s.x - key[0] as f64, s.y - key[1] as f64, s.z - key[2] as f64);
        bins.entry(key).or_default().push((local, *n));
    }
    Ok(VoxelBinning { voxel_size: b, bins })
}

// ---- scene directory I/O ---------------------------------------------------

const DEPTH_SCALE: f64 = 1000.0;

pub fn save_depth_png(path: &Path, depth: &[f64], width: usize, height: usize) -> Result<()> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let mm = (depth[i] * DEPTH_SCALE).round();
        px.0[0] = if mm <= 0.0 { 0 } else { mm.min(u16::MAX as f64) as u16 };
    }
    img.save(path)?;
    Ok(())
}

pub fn load_depth_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let depth = img.pixels().map(|p| p.0[0] as f64 / DEPTH_SCALE).collect();
    Ok((depth, w, h))
}

pub fn depth_file_name(frame_id: usize) -> String {
    format!("{frame_id:06}.png")
}

/// Loads `depth/%06d.png` + `poses.txt` + `intrinsics.txt`, keeping every
/// `stride`-th frame (stride 1 keeps all).
pub fn load_scene_dir(dir: &Path, stride: usize) -> Result<Vec<DepthFrame>> {
    let stride = stride.max(1);
    let intrinsics = crate::geom::load_intrinsics(&dir.join("intrinsics.txt"))?;
    let poses = crate::geom::load_poses(&dir.join("poses.txt"))?;
    let mut frames = Vec::new();
    for (i, &(frame_id, pose)) in poses.iter().enumerate() {
        if i % stride != 0 {
            continue;
        }
        let path = dir.join("depth").join(depth_file_name(frame_id));
        let (depth, w, h) = load_depth_png(&path)?;
        if w != intrinsics.width || h != intrinsics.height {
            return Err(Error::ShapeMismatch(format!(
                "frame {frame_id}: image {w}x{h} does not match intrinsics {}x{}",
                intrinsics.width, intrinsics.height
            )));
        }
        frames.push(DepthFrame::new(depth, intrinsics, pose, frame_id)?);
    }
    if frames.is_empty() {
        return Err(Error::EmptyFrame);
    }
    Ok(frames)
}
