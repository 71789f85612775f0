//! Analytic CSG scenes: exact signed-distance oracles, surface samplers,
//! voxel occupancy tests, and the procedural room generator used for
//! synthetic training and evaluation data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{Pose, Vec3};
use crate::tape::VoxelKey;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum Csg {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { center: Vec3, half: Vec3 },
    CylinderZ { center: Vec3, radius: f64, half_height: f64 },
    Union(Box<Csg>, Box<Csg>),
    Difference(Box<Csg>, Box<Csg>),
}

impl Csg {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Csg::Sphere { center, radius } => (p - *center).norm() - radius,
            Csg::Cuboid { center, half } => {
                let q = (p - *center).abs() - *half;
                let outside = q.max(Vec3::ZERO).norm();
                outside + q.max_component().min(0.0)
            }
            Csg::CylinderZ { center, radius, half_height } => {
                let d = p - *center;
                let dr = (d.x * d.x + d.y * d.y).sqrt() - radius;
                let dz = d.z.abs() - half_height;
                let a = dr.max(0.0);
                let b = dz.max(0.0);
                dr.max(dz).min(0.0) + (a * a + b * b).sqrt()
            }
            Csg::Union(a, b) => a.sdf(p).min(b.sdf(p)),
            Csg::Difference(a, b) => a.sdf(p).max(-b.sdf(p)),
        }
    }

    /// Analytic gradient, defined almost everywhere (selection surfaces and
    /// medial axes excluded).
    pub fn grad(&self, p: Vec3) -> Vec3 {
        match self {
            Csg::Sphere { center, .. } => (p - *center).normalized(),
            Csg::Cuboid { center, half } => {
                let d = p - *center;
                let q = d.abs() - *half;
                let sign = Vec3::new(
                    if d.x >= 0.0 { 1.0 } else { -1.0 },
                    if d.y >= 0.0 { 1.0 } else { -1.0 },
                    if d.z >= 0.0 { 1.0 } else { -1.0 },
                );
                let qp = q.max(Vec3::ZERO);
                let outside = qp.norm();
                if outside > 0.0 {
                    Vec3::new(sign.x * qp.x, sign.y * qp.y, sign.z * qp.z) * (1.0 / outside)
                } else if q.x >= q.y && q.x >= q.z {
                    Vec3::new(sign.x, 0.0, 0.0)
                } else if q.y >= q.z {
                    Vec3::new(0.0, sign.y, 0.0)
                } else {
                    Vec3::new(0.0, 0.0, sign.z)
                }
            }
            Csg::CylinderZ { center, radius, half_height } => {
                let d = p - *center;
                let rxy = (d.x * d.x + d.y * d.y).sqrt();
                let rd = if rxy > 0.0 {
                    Vec3::new(d.x / rxy, d.y / rxy, 0.0)
                } else {
                    Vec3::new(1.0, 0.0, 0.0)
                };
                let zd = if d.z >= 0.0 { 1.0 } else { -1.0 };
                let dr = rxy - radius;
                let dz = d.z.abs() - half_height;
                let a = dr.max(0.0);
                let b = dz.max(0.0);
                let n = (a * a + b * b).sqrt();
                if n > 0.0 {
                    Vec3::new(rd.x * a / n, rd.y * a / n, zd * b / n)
                } else if dr >= dz {
                    rd
                } else {
                    Vec3::new(0.0, 0.0, zd)
                }
            }
            Csg::Union(a, b) => {
                if a.sdf(p) <= b.sdf(p) {
                    a.grad(p)
                } else {
                    b.grad(p)
                }
            }
            Csg::Difference(a, b) => {
                if a.sdf(p) >= -b.sdf(p) {
                    a.grad(p)
                } else {
                    -b.grad(p)
                }
            }
        }
    }
}

/// An exact signed-distance oracle with surface sampling and voxel occupancy
/// queries, plus the axis-aligned region it is meant to be evaluated in.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GtScene {
    pub root: Csg,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
}

impl GtScene {
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.root.sdf(p)
    }

    pub fn grad(&self, p: Vec3) -> Vec3 {
        self.root.grad(p)
    }

    pub fn normal(&self, p: Vec3) -> Vec3 {
        self.grad(p).normalized()
    }

    /// Newton projection onto the zero level set.
    pub fn project_to_surface(&self, mut p: Vec3) -> Vec3 {
        for _ in 0..60 {
            let s = self.sdf(p);
            if s.abs() < 1e-13 {
                break;
            }
            p = p - self.grad(p) * s;
        }
        p
    }

    /// Surface points with outward normals; rejection-projected from uniform
    /// box samples, deterministic under `seed`. Every returned point has
    /// |sdf| < 1e-9.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<(Vec3, Vec3)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut guard = 0usize;
        while out.len() < n && guard < n * 200 {
            guard += 1;
            let p = Vec3::new(
                rng.gen_range(self.bbox_min.x..self.bbox_max.x),
                rng.gen_range(self.bbox_min.y..self.bbox_max.y),
                rng.gen_range(self.bbox_min.z..self.bbox_max.z),
            );
            let q = self.project_to_surface(p);
            if self.sdf(q).abs() < 1e-9
                && q.x >= self.bbox_min.x
                && q.x <= self.bbox_max.x
                && q.y >= self.bbox_min.y
                && q.y <= self.bbox_max.y
                && q.z >= self.bbox_min.z
                && q.z <= self.bbox_max.z
            {
                out.push((q, self.normal(q)));
            }
        }
        out
    }

    /// Whether the surface intersects voxel `key` of size `b`: a center
    /// distance bound, refined by sign sampling at the 8 corners and center.
    pub fn voxel_occupied(&self, key: VoxelKey, b: f64) -> bool {
        let lo = Vec3::new(key[0] as f64 * b, key[1] as f64 * b, key[2] as f64 * b);
        let center = lo + Vec3::splat(b * 0.5);
        let sc = self.sdf(center);
        if sc.abs() > b * 3.0_f64.sqrt() / 2.0 {
            return false;
        }
        let mut neg = sc < 0.0;
        let mut pos = sc > 0.0;
        if sc == 0.0 {
            return true;
        }
        for bits in 0..8 {
            let corner = lo
                + Vec3::new(
                    ((bits >> 2) & 1) as f64 * b,
                    ((bits >> 1) & 1) as f64 * b,
                    (bits & 1) as f64 * b,
                );
            let s = self.sdf(corner);
            if s == 0.0 {
                return true;
            }
            neg |= s < 0.0;
            pos |= s > 0.0;
            if neg && pos {
                return true;
            }
        }
        false
    }

    /// All occupied voxel keys of size `b` inside the scene bbox.
    pub fn occupied_voxels(&self, b: f64) -> Vec<VoxelKey> {
        let lo = [
            (self.bbox_min.x / b).floor() as i32,
            (self.bbox_min.y / b).floor() as i32,
            (self.bbox_min.z / b).floor() as i32,
        ];
        let hi = [
            (self.bbox_max.x / b).ceil() as i32,
            (self.bbox_max.y / b).ceil() as i32,
            (self.bbox_max.z / b).ceil() as i32,
        ];
        let mut keys = Vec::new();
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    if self.voxel_occupied([x, y, z], b) {
                        keys.push([x, y, z]);
                    }
                }
            }
        }
        keys
    }
}

/// A procedurally generated room: a hollow box shell with a few primitives
/// floating inside, all centered near the origin.
pub fn generate_room(seed: u64) -> GtScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let inner = Vec3::new(
        rng.gen_range(0.42..0.55),
        rng.gen_range(0.42..0.55),
        rng.gen_range(0.42..0.55),
    );
    let wall = 0.08;
    let outer = inner + Vec3::splat(wall);
    let shell = Csg::Difference(
        Box::new(Csg::Cuboid { center: Vec3::ZERO, half: outer * 0.5 }),
        Box::new(Csg::Cuboid { center: Vec3::ZERO, half: inner * 0.5 }),
    );

    let mut root = shell;
    let n_objects = rng.gen_range(2..=5);
    let mut centers: Vec<Vec3> = Vec::new();
    for _ in 0..n_objects {
        let margin = 0.16;
        let mut center = Vec3::ZERO;
        for _ in 0..40 {
            center = Vec3::new(
                rng.gen_range(-(inner.x * 0.5 - margin)..(inner.x * 0.5 - margin)),
                rng.gen_range(-(inner.y * 0.5 - margin)..(inner.y * 0.5 - margin)),
                rng.gen_range(-(inner.z * 0.5 - margin)..(inner.z * 0.5 - margin)),
            );
            if centers.iter().all(|c| (*c - center).norm() > 0.16) {
                break;
            }
        }
        centers.push(center);
        let shape = match rng.gen_range(0..3) {
            0 => Csg::Sphere { center, radius: rng.gen_range(0.05..0.09) },
            1 => Csg::Cuboid {
                center,
                half: Vec3::new(
                    rng.gen_range(0.04..0.08),
                    rng.gen_range(0.04..0.08),
                    rng.gen_range(0.04..0.08),
                ),
            },
            _ => Csg::CylinderZ {
                center,
                radius: rng.gen_range(0.04..0.07),
                half_height: rng.gen_range(0.05..0.09),
            },
        };
        root = Csg::Union(Box::new(root), Box::new(shape));
    }

    let pad = 0.02;
    GtScene {
        root,
        bbox_min: -outer * 0.5 - Vec3::splat(pad),
        bbox_max: outer * 0.5 + Vec3::splat(pad),
    }
}

/// Camera poses on a circle inside the room, looking outward. The camera
/// frame is +z forward, y down.
pub fn circular_camera_path(n_frames: usize, radius: f64, height: f64) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let ang = i as f64 / n_frames as f64 * std::f64::consts::TAU;
        let eye = Vec3::new(radius * ang.cos(), height, radius * ang.sin());
        let forward = Vec3::new(ang.cos(), 0.0, ang.sin());
        let down0 = Vec3::new(0.0, 1.0, 0.0);
        let right = down0.cross(forward).normalized();
        let down = forward.cross(right);
        let r = crate::geom::Mat3([
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ]);
        poses.push(Pose::new(r, eye));
    }
    poses
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere() -> GtScene {
        GtScene {
            root: Csg::Sphere { center: Vec3::ZERO, radius: 1.0 },
            bbox_min: Vec3::splat(-1.3),
            bbox_max: Vec3::splat(1.3),
        }
    }

    #[test]
    fn sphere_sdf_is_distance_to_shell() {
        let s = unit_sphere();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            assert!((s.sdf(p) - (p.norm() - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn surface_samples_sit_on_surface() {
        let room = generate_room(3);
        let samples = room.sample_surface(500, 11);
        assert_eq!(samples.len(), 500);
        for (p, n) in samples {
            assert!(room.sdf(p).abs() < 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_is_eikonal_away_from_seams() {
        let room = generate_room(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 200 {
            let p = Vec3::new(
                rng.gen_range(room.bbox_min.x..room.bbox_max.x),
                rng.gen_range(room.bbox_min.y..room.bbox_max.y),
                rng.gen_range(room.bbox_min.z..room.bbox_max.z),
            );
            // skip points near selection seams where the argmin may switch
            let g = room.grad(p);
            let fd = Vec3::new(
                (room.sdf(p + Vec3::new(h, 0.0, 0.0)) - room.sdf(p - Vec3::new(h, 0.0, 0.0))) / (2.0 * h),
                (room.sdf(p + Vec3::new(0.0, h, 0.0)) - room.sdf(p - Vec3::new(0.0, h, 0.0))) / (2.0 * h),
                (room.sdf(p + Vec3::new(0.0, 0.0, h)) - room.sdf(p - Vec3::new(0.0, 0.0, h))) / (2.0 * h),
            );
            if (g - fd).norm() > 1e-4 {
                continue; // kink in the FD stencil; not a smooth point
            }
            checked += 1;
            assert!((g.norm() - 1.0).abs() < 1e-6, "grad norm {} at {p}", g.norm());
        }
    }

    #[test]
    fn plane_like_occupancy_layer() {
        // slab surface at z = 0.125 via a huge cuboid whose top face is z = 0.125
        let scene = GtScene {
            root: Csg::Cuboid { center: Vec3::new(0.0, 0.0, -0.9375), half: Vec3::new(10.0, 10.0, 1.0625) },
            bbox_min: Vec3::new(-0.2, -0.2, 0.0),
            bbox_max: Vec3::new(0.2, 0.2, 0.3),
        };
        let b = 0.05;
        for z in 0..6 {
            let occupied = scene.voxel_occupied([1, 1, z], b);
            assert_eq!(occupied, z == 2, "layer {z}");
        }
    }

    #[test]
    fn empty_region_has_no_occupied_voxels() {
        let scene = GtScene {
            root: Csg::Sphere { center: Vec3::new(100.0, 0.0, 0.0), radius: 0.1 },
            bbox_min: Vec3::splat(-0.3),
            bbox_max: Vec3::splat(0.3),
        };
        assert!(scene.occupied_voxels(0.05).is_empty());
    }

    #[test]
    fn camera_path_is_valid_and_looks_outward() {
        for pose in circular_camera_path(8, 0.1, 0.0) {
            assert!(pose.is_valid(1e-9));
            let fwd = pose.rotate(Vec3::new(0.0, 0.0, 1.0));
            let outward = Vec3::new(pose.translation.x, 0.0, pose.translation.z).normalized();
            assert!(fwd.dot(outward) > 0.99);
        }
    }
}
