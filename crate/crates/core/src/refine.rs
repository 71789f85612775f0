//! Inference-time refinement: joint optimization of latent vectors and
//! per-frame pose increments against observed depth, driven entirely by the
//! implicit-differentiation backward pass of the renderer. Network weights
//! and the octree structure stay frozen; only latent values and twists move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::circnet::FrozenField;
use crate::geom::{ray_from_pixel, se3_exp, se3_left_jacobian, Pose, Twist, Vec3};
use crate::ingest::DepthFrame;
use crate::render::{backward_implicit, build_octree_from_keys, render_rays, OctreeIndex, RayJob};
use crate::tape::Tensor;
use crate::train::{adam_step, AdamState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    pub iters: usize,
    /// Random pixels rendered per frame per step (0 = every valid pixel).
    pub rays_per_frame: usize,
    pub lr_latent: f64,
    pub lr_pose: f64,
    pub seed: u64,
    /// Maximum along-ray render distance, meters.
    pub t_max: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iters: 200,
            rays_per_frame: 1024,
            lr_latent: 1e-3,
            lr_pose: 1e-3,
            seed: 0,
            t_max: 5.0,
        }
    }
}

/// Mean absolute difference between observed and rendered depths over pixels
/// valid on both sides; also reports the excluded fraction.
pub fn depth_residual(observed: &[f64], rendered: &[f64]) -> Result<(f64, f64)> {
    assert_eq!(observed.len(), rendered.len());
    let mut total = 0.0;
    let mut n = 0usize;
    for (&o, &r) in observed.iter().zip(rendered) {
        if o > 0.0 && r > 0.0 {
            total += (o - r).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    let excluded = 1.0 - n as f64 / observed.len() as f64;
    Ok((total / n as f64, excluded))
}

/// Gradient of the sampled loss w.r.t. a stored twist, from per-ray origin
/// and direction derivatives. `contribs` carries (o, d, dL/do, dL/dd) per
/// included ray of that frame.
pub fn twist_gradient(xi: Twist, contribs: &[(Vec3, Vec3, Vec3, Vec3)]) -> [f64; 6] {
    let mut gv = Vec3::ZERO;
    let mut gw = Vec3::ZERO;
    for &(o, d, dl_do, dl_dd) in contribs {
        gv = gv + dl_do;
        gw = gw + o.cross(dl_do) + d.cross(dl_dd);
    }
    // local-increment gradient -> stored-twist gradient through the SE(3)
    // left Jacobian: exp(xi + dxi) = exp(J dxi) exp(xi)
    let j = se3_left_jacobian(xi);
    let local = [gv.x, gv.y, gv.z, gw.x, gw.y, gw.z];
    let mut out = [0.0; 6];
    for (col, o) in out.iter_mut().enumerate() {
        for (row, l) in local.iter().enumerate() {
            *o += j[row][col] * l;
        }
    }
    out
}

pub struct RefineState {
    pub field: FrozenField,
    pub octree: OctreeIndex,
    pub twists: Vec<Twist>,
    lat_params: crate::tape::ParamSet,
    lat_adam: AdamState,
    pose_params: crate::tape::ParamSet,
    pose_adam: AdamState,
    pub iter: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineStepReport {
    pub residual: f64,
    pub excluded_fraction: f64,
    pub included_rays: usize,
    pub dropped_grazing: usize,
    pub update_norm: f64,
}

impl RefineState {
    /// Builds refinement state over a fitted field; the octree is frozen to
    /// the grid's current active set.
    pub fn new(field: FrozenField, n_frames: usize) -> Self {
        let octree =
            build_octree_from_keys(field.grid.keys.keys().to_vec(), field.grid.voxel_size);
        let mut lat_params = crate::tape::ParamSet::new();
        lat_params.add("latents", field.grid.latents.clone());
        let lat_adam = AdamState::new(&lat_params);
        let mut pose_params = crate::tape::ParamSet::new();
        for t in 0..n_frames {
            pose_params.add(&format!("twist{t}"), Tensor::zeros(&[6]));
        }
        let pose_adam = AdamState::new(&pose_params);
        RefineState {
            field,
            octree,
            twists: vec![Twist::ZERO; n_frames],
            lat_params,
            lat_adam,
            pose_params,
            pose_adam,
            iter: 0,
        }
    }

    /// The pose currently realized for frame `t`: exp(twist) * base.
    pub fn current_pose(&self, base: &Pose, t: usize) -> Pose {
        se3_exp(self.twists[t]).compose(base)
    }

    /// One refinement step over all frames with the given config.
    pub fn step(&mut self, frames: &[DepthFrame], cfg: &RefineConfig) -> Result<RefineStepReport> {
        assert_eq!(frames.len(), self.twists.len());

        struct FrameSample {
            obs: Vec<f64>,
            cos: Vec<f64>,
        }

        // sample pixels and render
        let mut samples = Vec::with_capacity(frames.len());
        let mut all_hits = Vec::with_capacity(frames.len());
        let mut sampled_total = 0usize;
        for (t, frame) in frames.iter().enumerate() {
            let pose = self.current_pose(&frame.pose, t);
            let fwd = pose.rotate(Vec3::new(0.0, 0.0, 1.0));
            let valid: Vec<usize> =
                (0..frame.depth.len()).filter(|&i| frame.depth[i] > 0.0).collect();
            if valid.is_empty() {
                samples.push(FrameSample { obs: Vec::new(), cos: Vec::new() });
                all_hits.push(Vec::new());
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (self.iter as u64) << 20 ^ (t as u64) << 4 ^ 0x5bd1,
            );
            let chosen: Vec<usize> = if cfg.rays_per_frame == 0 || cfg.rays_per_frame >= valid.len() {
                valid
            } else {
                (0..cfg.rays_per_frame).map(|_| valid[rng.gen_range(0..valid.len())]).collect()
            };
            let mut rays = Vec::with_capacity(chosen.len());
            let mut obs = Vec::with_capacity(chosen.len());
            let mut cos = Vec::with_capacity(chosen.len());
            for &pix in &chosen {
                let (u, v) = (
                    (pix % frame.intrinsics.width) as f64,
                    (pix / frame.intrinsics.width) as f64,
                );
                let (o, d) = ray_from_pixel(&frame.intrinsics, &pose, u, v);
                rays.push(RayJob { pixel: pix, o, d });
                obs.push(frame.depth[pix]);
                cos.push(d.dot(fwd));
            }
            sampled_total += rays.len();
            let (hits, _) = render_rays(&self.field, &self.octree, &rays, cfg.t_max);
            samples.push(FrameSample { obs, cos });
            all_hits.push(hits);
        }

        // residual over included pixels
        let mut included = 0usize;
        let mut residual_sum = 0.0;
        for (sample, hits) in samples.iter().zip(&all_hits) {
            for ((hit, &obs), &cos) in hits.iter().zip(&sample.obs).zip(&sample.cos) {
                if let Some(h) = hit {
                    residual_sum += (h.t * cos - obs).abs();
                    included += 1;
                }
            }
        }
        if included == 0 {
            return Err(Error::NoOverlap);
        }
        let residual = residual_sum / included as f64;
        let n = included as f64;

        // backward through the implicit renderer
        let mut latent_grads =
            Tensor::zeros(&[self.field.grid.keys.len(), self.field.grid.latent_dim()]);
        let mut dropped = 0usize;
        let mut pose_contribs: Vec<Vec<(Vec3, Vec3, Vec3, Vec3)>> =
            vec![Vec::new(); frames.len()];
        for (t, (sample, hits)) in samples.iter().zip(&all_hits).enumerate() {
            let mut frame_hits = Vec::new();
            let mut dl_dt = Vec::new();
            for ((hit, &obs), &cos) in hits.iter().zip(&sample.obs).zip(&sample.cos) {
                if let Some(h) = hit {
                    let e = h.t * cos - obs;
                    let sign = if e > 0.0 {
                        1.0
                    } else if e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    frame_hits.push(h);
                    dl_dt.push(sign * cos / n);
                }
            }
            let out = backward_implicit(&self.field, &frame_hits, &dl_dt)?;
            latent_grads.add_assign(&out.latent_grads);
            dropped += out.dropped;
            for (hit, ray_grad) in frame_hits.iter().zip(&out.ray_grads) {
                if let Some((dl_do, dl_dd)) = ray_grad {
                    pose_contribs[t].push((hit.o, hit.d, *dl_do, *dl_dd));
                }
            }
        }

        // updates: Adam on both groups, then refresh the derived state
        let lat_id = self.lat_params.id("latents").unwrap();
        self.lat_params.zero_grads();
        self.lat_params.grad_mut(lat_id).add_assign(&latent_grads);
        let before = self.lat_params.value(lat_id).clone();
        adam_step(&mut self.lat_params, &mut self.lat_adam, cfg.lr_latent);

        self.pose_params.zero_grads();
        for t in 0..frames.len() {
            let g = twist_gradient(self.twists[t], &pose_contribs[t]);
            let pid = self.pose_params.id(&format!("twist{t}")).unwrap();
            self.pose_params.grad_mut(pid).data_mut().copy_from_slice(&g);
        }
        adam_step(&mut self.pose_params, &mut self.pose_adam, cfg.lr_pose);

        let mut update_norm = 0.0;
        for (a, b) in self.lat_params.value(lat_id).data().iter().zip(before.data()) {
            update_norm += (a - b) * (a - b);
        }
        for t in 0..frames.len() {
            let pid = self.pose_params.id(&format!("twist{t}")).unwrap();
            let tw = self.pose_params.value(pid).data();
            let old = self.twists[t].to_array();
            for (a, b) in tw.iter().zip(&old) {
                update_norm += (a - b) * (a - b);
            }
            self.twists[t] = Twist::from_array([tw[0], tw[1], tw[2], tw[3], tw[4], tw[5]]);
        }
        self.field.grid.latents = self.lat_params.value(lat_id).clone();
        self.field.refresh_corners();
        self.iter += 1;

        Ok(RefineStepReport {
            residual,
            excluded_fraction: 1.0 - included as f64 / sampled_total.max(1) as f64,
            included_rays: included,
            dropped_grazing: dropped,
            update_norm: update_norm.sqrt(),
        })
    }
}

/// Runs the full refinement loop; returns the per-iteration residual curve
/// and the refined poses.
pub fn refine(
    state: &mut RefineState,
    frames: &[DepthFrame],
    cfg: &RefineConfig,
) -> Result<(Vec<RefineStepReport>, Vec<Pose>)> {
    let mut curve = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        curve.push(state.step(frames, cfg)?);
    }
    let poses =
        frames.iter().enumerate().map(|(t, f)| state.current_pose(&f.pose, t)).collect();
    Ok((curve, poses))
}

/// Evaluates the sampled depth residual at fixed pixels without updating any
/// parameter (used to compare before/after states on equal footing).
pub fn evaluate_residual(
    state: &RefineState,
    frames: &[DepthFrame],
    rays_per_frame: usize,
    seed: u64,
    t_max: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut included = 0usize;
    for (t, frame) in frames.iter().enumerate() {
        let pose = state.current_pose(&frame.pose, t);
        let fwd = pose.rotate(Vec3::new(0.0, 0.0, 1.0));
        let valid: Vec<usize> = (0..frame.depth.len()).filter(|&i| frame.depth[i] > 0.0).collect();
        if valid.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64) << 8);
        let chosen: Vec<usize> = if rays_per_frame == 0 || rays_per_frame >= valid.len() {
            valid
        } else {
            (0..rays_per_frame).map(|_| valid[rng.gen_range(0..valid.len())]).collect()
        };
        let rays: Vec<RayJob> = chosen
            .iter()
            .map(|&pix| {
                let (u, v) = (
                    (pix % frame.intrinsics.width) as f64,
                    (pix / frame.intrinsics.width) as f64,
                );
                let (o, d) = ray_from_pixel(&frame.intrinsics, &pose, u, v);
                RayJob { pixel: pix, o, d }
            })
            .collect();
        let (hits, _) = render_rays(&state.field, &state.octree, &rays, t_max);
        for ((hit, ray), &pix) in hits.iter().zip(&rays).zip(&chosen) {
            if let Some(h) = hit {
                total += (h.t * ray.d.dot(fwd) - frame.depth[pix]).abs();
                included += 1;
            }
        }
    }
    if included == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(total / included as f64)
}
