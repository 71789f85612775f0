//! Differentiable depth rendering over the sparse grid: octree construction,
//! depth-sorted ray-voxel intersection, per-voxel sphere tracing, the
//! implicit-differentiation backward pass, and an unrolled
//! automatic-differentiation baseline that shares the exact forward schedule.

use rayon::prelude::*;

use crate::circnet::{query_sdf_on_tape, DecoderIds, FrozenField, SparsityPyramid};
use crate::geom::{ray_from_pixel, Intrinsics, Pose, Vec3};
use crate::scene::GtScene;
use crate::tape::{key_parent, KeyIndex, ParamSet, Tape, Tensor, VoxelKey};
use crate::Result;

/// Sphere-tracing policy shared by every tracer in the crate.
pub const TRACE_MAX_STEPS: usize = 64;
pub const TRACE_TOL_NORM: f64 = 1e-4;
pub const TRACE_SAFETY: f64 = 0.9;
pub const TRACE_FLOOR: f64 = 1e-5;
/// Rays with |<d, grad f>| below this (world units) are dropped from backward.
pub const GRAZING_CUTOFF: f64 = 0.01;
/// Nudge into a voxel when starting a trace exactly on its entry face.
const ENTRY_NUDGE: f64 = 1e-9;

/// A signed-distance field the renderer can march through. Distances are in
/// world meters; `None` marks points outside the queryable region.
pub trait SdfField: Sync {
    fn world_sdf(&self, p: Vec3) -> Option<f64>;
    fn world_grad(&self, p: Vec3) -> Option<Vec3>;
    /// Normalization scale: convergence uses |sdf/tau| < 1e-4.
    fn tau(&self) -> f64;
}

impl SdfField for FrozenField {
    fn world_sdf(&self, p: Vec3) -> Option<f64> {
        self.query_world_sdf(p).ok()
    }

    fn world_grad(&self, p: Vec3) -> Option<Vec3> {
        self.query_sdf_gradient(p).ok()
    }

    fn tau(&self) -> f64 {
        self.tau
    }
}

/// Ground-truth oracle viewed as a renderable field (defined everywhere).
pub struct GtField<'a> {
    pub scene: &'a GtScene,
    pub tau: f64,
}

impl SdfField for GtField<'_> {
    fn world_sdf(&self, p: Vec3) -> Option<f64> {
        Some(self.scene.sdf(p))
    }

    fn world_grad(&self, p: Vec3) -> Option<Vec3> {
        Some(self.scene.grad(p))
    }

    fn tau(&self) -> f64 {
        self.tau
    }
}

/// Multi-level occupancy hierarchy; level 0 is the finest.
#[derive(Debug)]
pub struct OctreeIndex {
    pub levels: Vec<KeyIndex>,
    pub voxel_size: f64,
}

impl OctreeIndex {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty() || self.levels[0].is_empty()
    }
}

/// Builds the hierarchy from finest occupied keys by repeated parent closure,
/// stopping once the top level is small.
pub fn build_octree_from_keys(finest: Vec<VoxelKey>, voxel_size: f64) -> OctreeIndex {
    let mut levels = Vec::new();
    let mut cur = KeyIndex::from_keys(finest);
    while !cur.is_empty() {
        let parents = KeyIndex::from_keys(cur.keys().iter().map(|&k| key_parent(k)).collect());
        let done = cur.len() <= 1 || levels.len() >= 15;
        levels.push(cur);
        if done {
            break;
        }
        cur = parents;
    }
    OctreeIndex { levels, voxel_size }
}

/// Builds the hierarchy from a sparsity pyramid, enforcing parent closure
/// (a predicted level is widened to cover its children's parents).
pub fn build_octree(pyramid: &SparsityPyramid, voxel_size: f64) -> OctreeIndex {
    let mut levels: Vec<KeyIndex> = Vec::new();
    for (l, level) in pyramid.levels.iter().enumerate() {
        let mut keys = level.keys.clone();
        if l > 0 {
            keys.extend(levels[l - 1].keys().iter().map(|&k| key_parent(k)));
        }
        levels.push(KeyIndex::from_keys(keys));
    }
    // extend upward until the top is small
    while levels.last().map_or(false, |top| top.len() > 8) && levels.len() < 15 {
        let top = levels.last().unwrap();
        levels.push(KeyIndex::from_keys(top.keys().iter().map(|&k| key_parent(k)).collect()));
    }
    OctreeIndex { levels, voxel_size }
}

/// Ray-AABB slab test over [lo, hi); returns (t_enter, t_exit) when the ray
/// segment [0, t_max] crosses the box.
fn slab(lo: Vec3, hi: Vec3, o: Vec3, d: Vec3, t_max: f64, pad: f64) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let lo = [lo.x - pad, lo.y - pad, lo.z - pad];
    let hi = [hi.x + pad, hi.y + pad, hi.z + pad];
    let ov = [o.x, o.y, o.z];
    let dv = [d.x, d.y, d.z];
    for a in 0..3 {
        if dv[a] == 0.0 {
            if ov[a] < lo[a] || ov[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dv[a];
        let mut ta = (lo[a] - ov[a]) * inv;
        let mut tb = (hi[a] - ov[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 <= t1 && t1 >= 0.0 && t0 <= t_max {
        Some((t0, t1))
    } else {
        None
    }
}

/// One depth-sorted (t_enter, voxel key) pair; t is clamped at zero.
pub type IntersectionList = Vec<(f64, VoxelKey)>;

/// Finest voxels crossed by the ray, ascending in (clamped) entry depth.
/// Hierarchical descent through the octree levels; ancestors are tested with
/// a tiny padding so floating-point never prunes a hit child.
pub fn intersect_ray(oct: &OctreeIndex, o: Vec3, d: Vec3, t_max: f64) -> IntersectionList {
    let mut out = Vec::new();
    if oct.is_empty() {
        return out;
    }
    let b = oct.voxel_size;
    let top = oct.num_levels() - 1;
    let mut stack: Vec<(usize, VoxelKey)> =
        oct.levels[top].keys().iter().map(|&k| (top, k)).collect();
    while let Some((level, key)) = stack.pop() {
        let cell = b * (1u64 << level) as f64;
        let lo = Vec3::new(key[0] as f64 * cell, key[1] as f64 * cell, key[2] as f64 * cell);
        let hi = lo + Vec3::splat(cell);
        let pad = if level == 0 { 0.0 } else { 1e-9 * cell.max(1.0) };
        let Some((t_enter, _t_exit)) = slab(lo, hi, o, d, t_max, pad) else { continue };
        if level == 0 {
            out.push((t_enter.max(0.0), key));
        } else {
            for bits in 0..8 {
                let child = crate::tape::key_child(key, bits);
                if oct.levels[level - 1].contains(child) {
                    stack.push((level - 1, child));
                }
            }
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    out
}

/// Exhaustive per-voxel slab test over all finest voxels; the oracle the
/// hierarchical traversal must match exactly.
pub fn intersect_ray_bruteforce(oct: &OctreeIndex, o: Vec3, d: Vec3, t_max: f64) -> IntersectionList {
    let b = oct.voxel_size;
    let mut out = Vec::new();
    for &key in oct.levels[0].keys() {
        let lo = Vec3::new(key[0] as f64 * b, key[1] as f64 * b, key[2] as f64 * b);
        let hi = lo + Vec3::splat(b);
        if let Some((t_enter, _)) = slab(lo, hi, o, d, t_max, 0.0) {
            out.push((t_enter.max(0.0), key));
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderStats {
    pub rays: usize,
    pub hits: usize,
    pub sdf_evals: usize,
    pub trace_steps: usize,
    /// Differentiation state retained per backward method: one record per hit
    /// for the implicit pass, one per tracing step for unrolled AD.
    pub retained_states: usize,
    pub degenerate_rays: usize,
}

impl RenderStats {
    pub fn merge(mut self, o: RenderStats) -> RenderStats {
        self.rays += o.rays;
        self.hits += o.hits;
        self.sdf_evals += o.sdf_evals;
        self.trace_steps += o.trace_steps;
        self.retained_states += o.retained_states;
        self.degenerate_rays += o.degenerate_rays;
        self
    }
}

/// A converged surface hit with the cached pieces Eq-style backward needs.
#[derive(Debug, Clone)]
pub struct HitRecord {
    pub t: f64,
    pub voxel: VoxelKey,
    pub p: Vec3,
    pub o: Vec3,
    pub d: Vec3,
    /// World-units SDF gradient at the hit point.
    pub grad_world: Vec3,
    /// <d, grad>; gamma is its inverse.
    pub denom: f64,
}

/// Sphere-traces one voxel: steps by 0.9x the queried distance with a 1e-5 m
/// floor, converges at |s| < 1e-4 normalized, and gives up (without exiting
/// mid-update) at the voxel boundary or after 64 steps.
pub fn sphere_trace_voxel(
    field: &impl SdfField,
    o: Vec3,
    d: Vec3,
    t_enter: f64,
    t_exit: f64,
    stats: &mut RenderStats,
) -> Option<f64> {
    let tau = field.tau();
    let mut t = t_enter + ENTRY_NUDGE;
    if t >= t_exit {
        return None;
    }
    for _ in 0..TRACE_MAX_STEPS {
        let p = o + d * t;
        stats.sdf_evals += 1;
        let Some(s_world) = field.world_sdf(p) else { return None };
        let s_norm = s_world / tau;
        if s_norm.abs() < TRACE_TOL_NORM {
            return Some(t);
        }
        let step = (s_world * TRACE_SAFETY).max(TRACE_FLOOR);
        stats.trace_steps += 1;
        let t_next = t + step;
        if t_next >= t_exit {
            return None;
        }
        t = t_next;
    }
    None
}

#[derive(Debug, Clone, Copy)]
pub struct RayJob {
    pub pixel: usize,
    pub o: Vec3,
    pub d: Vec3,
}

/// Traces one ray through its intersection list; first converged hit wins.
pub fn trace_ray(
    field: &impl SdfField,
    oct: &OctreeIndex,
    o: Vec3,
    d: Vec3,
    t_max: f64,
) -> (Option<HitRecord>, RenderStats) {
    let mut stats = RenderStats { rays: 1, ..Default::default() };
    for (t_enter, key) in intersect_ray(oct, o, d, t_max) {
        let b = oct.voxel_size;
        let lo = Vec3::new(key[0] as f64 * b, key[1] as f64 * b, key[2] as f64 * b);
        let t_exit = slab(lo, lo + Vec3::splat(b), o, d, t_max, 0.0).map(|x| x.1).unwrap_or(t_enter);
        if let Some(t) = sphere_trace_voxel(field, o, d, t_enter, t_exit, &mut stats) {
            let p = o + d * t;
            let grad = field.world_grad(p).unwrap_or(Vec3::ZERO);
            stats.hits += 1;
            stats.retained_states += 1;
            return (
                Some(HitRecord { t, voxel: key, p, o, d, grad_world: grad, denom: d.dot(grad) }),
                stats,
            );
        }
    }
    (None, stats)
}

/// Renders a set of rays in parallel; output order matches input order and
/// stats are summed deterministically.
pub fn render_rays(
    field: &(impl SdfField + Sync),
    oct: &OctreeIndex,
    rays: &[RayJob],
    t_max: f64,
) -> (Vec<Option<HitRecord>>, RenderStats) {
    let results: Vec<(Option<HitRecord>, RenderStats)> =
        rays.par_iter().map(|r| trace_ray(field, oct, r.o, r.d, t_max)).collect();
    let mut hits = Vec::with_capacity(rays.len());
    let mut stats = RenderStats::default();
    for (h, s) in results {
        hits.push(h);
        stats = stats.merge(s);
    }
    (hits, stats)
}

/// Full-frame depth render; misses are zero. Depths are along-ray distances
/// converted to camera z (matching the depth-image convention).
pub fn render_depth(
    field: &(impl SdfField + Sync),
    oct: &OctreeIndex,
    intr: &Intrinsics,
    pose: &Pose,
    t_max: f64,
) -> (Vec<f64>, Vec<Option<HitRecord>>, RenderStats) {
    let rays: Vec<RayJob> = (0..intr.width * intr.height)
        .map(|i| {
            let (u, v) = ((i % intr.width) as f64, (i / intr.width) as f64);
            let (o, d) = ray_from_pixel(intr, pose, u, v);
            RayJob { pixel: i, o, d }
        })
        .collect();
    let (hits, stats) = render_rays(field, oct, &rays, t_max);
    let fwd = pose.rotate(Vec3::new(0.0, 0.0, 1.0));
    let depth = hits
        .iter()
        .zip(&rays)
        .map(|(h, r)| h.as_ref().map_or(0.0, |h| h.t * r.d.dot(fwd)))
        .collect();
    (depth, hits, stats)
}

/// Depth derivatives w.r.t. ray origin and direction for one hit:
/// dt/do = -gamma * grad, dt/dd = -gamma * t * grad.
pub fn implicit_ray_derivatives(hit: &HitRecord) -> Option<(Vec3, Vec3)> {
    if hit.denom.abs() < GRAZING_CUTOFF {
        return None;
    }
    let gamma = 1.0 / hit.denom;
    let dt_do = hit.grad_world * -gamma;
    let dt_dd = hit.grad_world * (-gamma * hit.t);
    Some((dt_do, dt_dd))
}

/// Per-ray loss derivatives mapped through the implicit-function theorem.
pub struct BackwardOutput {
    /// d loss / d latents, accumulated over all non-grazing hits ([M, L]).
    pub latent_grads: Tensor,
    /// Per input hit: d loss / d (o, d), None for grazing (dropped) rays.
    pub ray_grads: Vec<Option<(Vec3, Vec3)>>,
    pub dropped: usize,
}

/// Implicit backward over a batch of hits. `dl_dt[i]` is the loss derivative
/// w.r.t. the i-th hit's depth. Only latents receive field gradients; the
/// decoder and corner weights stay frozen. Exactly one retained point per hit
/// is consulted.
pub fn backward_implicit(
    field: &FrozenField,
    hits: &[&HitRecord],
    dl_dt: &[f64],
) -> Result<BackwardOutput> {
    assert_eq!(hits.len(), dl_dt.len());
    let m = field.grid.keys.len();
    let l = field.grid.latent_dim();
    let mut latent_grads = Tensor::zeros(&[m, l]);
    let mut ray_grads = Vec::with_capacity(hits.len());
    let mut dropped = 0;
    for (hit, &dldt) in hits.iter().zip(dl_dt) {
        let Some((dt_do, dt_dd)) = implicit_ray_derivatives(hit) else {
            dropped += 1;
            ray_grads.push(None);
            continue;
        };
        // one reverse evaluation at the frozen hit point
        let q = field.query_derivatives(hit.p)?;
        let gamma = 1.0 / hit.denom;
        field.accumulate_latent_gradient(&q, -gamma * dldt, &mut latent_grads);
        ray_grads.push(Some((dt_do * dldt, dt_dd * dldt)));
    }
    Ok(BackwardOutput { latent_grads, ray_grads, dropped })
}

/// Outcome of the unrolled automatic-differentiation render of one ray.
pub struct AdRayOutcome {
    pub t: Option<f64>,
    /// Tracing points recorded on the tape (the per-ray retained state).
    pub recorded_points: usize,
    pub sdf_evals: usize,
    /// dt/d(latent row), sparse over voxel rows of the full grid.
    pub latent_grad: Vec<(u32, Vec<f64>)>,
}

/// Renders one ray by recording every tracing step on a tape and
/// differentiating the unrolled schedule. The forward schedule mirrors
/// [`sphere_trace_voxel`] arithmetic exactly, so depths are bit-identical.
pub fn render_ray_ad(field: &FrozenField, oct: &OctreeIndex, o: Vec3, d: Vec3, t_max: f64) -> AdRayOutcome {
    let list = intersect_ray(oct, o, d, t_max);
    if list.is_empty() {
        return AdRayOutcome { t: None, recorded_points: 0, sdf_evals: 0, latent_grad: Vec::new() };
    }

    // restrict the differentiable sub-grid to the ray's neighborhood
    let mut patch_keys = Vec::new();
    for &(_, key) in &list {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let k = [key[0] + dx, key[1] + dy, key[2] + dz];
                    if field.grid.keys.contains(k) {
                        patch_keys.push(k);
                    }
                }
            }
        }
    }
    let patch = KeyIndex::from_keys(patch_keys);
    let lrows = field.grid.latent_dim();
    let mut sub_lat = Tensor::zeros(&[patch.len(), lrows]);
    for (i, &k) in patch.keys().iter().enumerate() {
        let full = field.grid.keys.get(k).unwrap();
        sub_lat.data_mut()[i * lrows..(i + 1) * lrows]
            .copy_from_slice(field.grid.latents.row(full));
    }
    let sub_field = FrozenField::with_weights(
        crate::circnet::SparseFeatureGrid {
            voxel_size: field.grid.voxel_size,
            keys: patch.clone(),
            latents: sub_lat.clone(),
        },
        field.dec.clone(),
        field.corner_w.clone(),
    );

    let mut params = ParamSet::new();
    let lat_id = params.add("latents", sub_lat);
    let mut tape = Tape::new();
    let lat_node = tape.param(&params, lat_id);
    let wc = tape.leaf(field.corner_w.clone());
    let corner_node = tape
        .pair_conv(lat_node, wc, sub_field.corner_table.clone())
        .expect("corner conv shapes");
    let dec = DecoderIds::leaves(&mut tape, &field.dec);

    let tau = field.tau();
    let mut evals = 0usize;
    let mut recorded = 0usize;

    for (t_enter, key) in list {
        let b = oct.voxel_size;
        let lo = Vec3::new(key[0] as f64 * b, key[1] as f64 * b, key[2] as f64 * b);
        let Some((_, t_exit)) = slab(lo, lo + Vec3::splat(b), o, d, t_max, 0.0) else { continue };
        let voxel = patch.get(key).expect("listed voxel in patch");

        let t_start = t_enter + ENTRY_NUDGE;
        if t_start >= t_exit {
            continue;
        }
        let mut t_node = tape.leaf(Tensor::scalar(t_start));
        for _ in 0..TRACE_MAX_STEPS {
            let p_node = tape
                .ray_point(t_node, o.to_array(), d.to_array())
                .expect("scalar t");
            recorded += 1;
            evals += 1;
            let s_node = query_sdf_on_tape(&mut tape, &dec, &sub_field, corner_node, voxel, p_node)
                .expect("query shapes");
            let s_norm = tape.scalar_value(s_node);
            if s_norm.abs() < TRACE_TOL_NORM {
                // converged: differentiate the unrolled depth
                tape.backward(t_node).expect("scalar depth");
                tape.add_param_grads(&mut params);
                let g = params.grad(lat_id);
                let mut sparse = Vec::new();
                for (i, &k) in patch.keys().iter().enumerate() {
                    let row = &g.data()[i * lrows..(i + 1) * lrows];
                    if row.iter().any(|&v| v != 0.0) {
                        let full = field.grid.keys.get(k).unwrap() as u32;
                        sparse.push((full, row.to_vec()));
                    }
                }
                return AdRayOutcome {
                    t: Some(tape.scalar_value(t_node)),
                    recorded_points: recorded,
                    sdf_evals: evals,
                    latent_grad: sparse,
                };
            }
            let s_world = tape.scale(s_node, tau).expect("scale");
            let step_raw = tape.scale(s_world, TRACE_SAFETY).expect("scale");
            let step = tape.max_const(step_raw, TRACE_FLOOR).expect("max");
            let t_next = tape.add(t_node, step).expect("add");
            if tape.scalar_value(t_next) >= t_exit {
                break;
            }
            t_node = t_next;
        }
    }
    AdRayOutcome { t: None, recorded_points: recorded, sdf_evals: evals, latent_grad: Vec::new() }
}

/// Depth of the first sign change found by marching `field` at a fixed step,
/// refined by linear interpolation between brackets. The oracle tracer.
pub fn dense_march(f: &impl Fn(Vec3) -> f64, o: Vec3, d: Vec3, t0: f64, t_max: f64, step: f64) -> Option<f64> {
    let mut t = t0;
    let mut prev_t = t0;
    let mut prev_s = f(o + d * t0);
    if prev_s <= 0.0 {
        return Some(t0);
    }
    while t < t_max {
        t += step;
        let s = f(o + d * t);
        if s <= 0.0 {
            let alpha = prev_s / (prev_s - s);
            return Some(prev_t + alpha * (t - prev_t));
        }
        prev_t = t;
        prev_s = s;
    }
    None
}

/// Uniform 256-sample ray querying baseline: returns (depth, evals).
pub fn uniform_sample_depth(field: &impl SdfField, o: Vec3, d: Vec3, t_max: f64) -> (Option<f64>, usize) {
    const SAMPLES: usize = 256;
    let dt = t_max / SAMPLES as f64;
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..SAMPLES {
        let t = dt * (i as f64 + 0.5);
        let s = field.world_sdf(o + d * t).unwrap_or(f64::INFINITY);
        if let Some((pt, ps)) = prev {
            if ps > 0.0 && s <= 0.0 && s.is_finite() {
                let alpha = ps / (ps - s);
                return (Some(pt + alpha * (t - pt)), SAMPLES);
            }
        }
        prev = Some((t, s));
    }
    (None, SAMPLES)
}

/// Global sphere tracing without voxel localization: returns (depth, evals).
pub fn global_sphere_trace(field: &impl SdfField, o: Vec3, d: Vec3, t_max: f64) -> (Option<f64>, usize) {
    let tau = field.tau();
    let mut t = 0.0;
    let mut evals = 0usize;
    for _ in 0..100_000 {
        if t >= t_max {
            return (None, evals);
        }
        let Some(s) = field.world_sdf(o + d * t) else { return (None, evals) };
        evals += 1;
        if (s / tau).abs() < TRACE_TOL_NORM {
            return (Some(t), evals);
        }
        t += (s * TRACE_SAFETY).max(TRACE_FLOOR);
    }
    (None, evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Csg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct PlaneUp {
        /// surface z = h, solid above
        h: f64,
        tau: f64,
    }

    impl SdfField for PlaneUp {
        fn world_sdf(&self, p: Vec3) -> Option<f64> {
            Some(self.h - p.z)
        }
        fn world_grad(&self, _p: Vec3) -> Option<Vec3> {
            Some(Vec3::new(0.0, 0.0, -1.0))
        }
        fn tau(&self) -> f64 {
            self.tau
        }
    }

    struct SphereSolid {
        r: f64,
        tau: f64,
    }

    impl SdfField for SphereSolid {
        fn world_sdf(&self, p: Vec3) -> Option<f64> {
            Some(p.norm() - self.r)
        }
        fn world_grad(&self, p: Vec3) -> Option<Vec3> {
            Some(p.normalized())
        }
        fn tau(&self) -> f64 {
            self.tau
        }
    }

    #[test]
    fn octree_shapes() {
        let oct = build_octree_from_keys(vec![[5, 3, 2]], 0.05);
        for level in &oct.levels {
            assert_eq!(level.len(), 1);
        }

        let empty = build_octree_from_keys(vec![], 0.05);
        assert!(empty.is_empty());
        assert!(intersect_ray(&empty, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 10.0).is_empty());

        let siblings: Vec<VoxelKey> = (0..8).map(|b| crate::tape::key_child([2, 2, 2], b)).collect();
        let oct = build_octree_from_keys(siblings, 0.05);
        assert_eq!(oct.levels[0].len(), 8);
        assert_eq!(oct.levels[1].len(), 1);
    }

    #[test]
    fn intersect_single_voxel_analytic() {
        let oct = build_octree_from_keys(vec![[0, 0, 0]], 0.05);
        let list = intersect_ray(&oct, Vec3::new(-1.0, 0.025, 0.025), Vec3::new(1.0, 0.0, 0.0), 10.0);
        assert_eq!(list.len(), 1);
        assert!((list[0].0 - 1.0).abs() < 1e-12);
        assert_eq!(list[0].1, [0, 0, 0]);

        let miss = intersect_ray(&oct, Vec3::new(-1.0, 0.2, 0.0), Vec3::new(1.0, 0.0, 0.0), 10.0);
        assert!(miss.is_empty());
    }

    #[test]
    fn intersection_matches_bruteforce_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..100 {
            let n = rng.gen_range(1..=50);
            let keys: Vec<VoxelKey> = (0..n)
                .map(|_| [rng.gen_range(-6..6), rng.gen_range(-6..6), rng.gen_range(-6..6)])
                .collect();
            let oct = build_octree_from_keys(keys, 0.05);
            for _ in 0..20 {
                let o = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let d = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalized();
                if d.norm() == 0.0 {
                    continue;
                }
                let got = intersect_ray(&oct, o, d, 5.0);
                let want = intersect_ray_bruteforce(&oct, o, d, 5.0);
                assert_eq!(got.len(), want.len(), "count mismatch");
                for (a, b) in got.iter().zip(&want) {
                    assert_eq!(a.1, b.1, "order mismatch");
                    assert_eq!(a.0, b.0, "entry depth mismatch");
                }
            }
        }
    }

    #[test]
    fn sphere_trace_plane_inside_voxel() {
        // surface z = 0.12 inside voxel (0,0,2)
        let field = PlaneUp { h: 0.12, tau: 0.05 };
        let mut stats = RenderStats::default();
        let o = Vec3::new(0.025, 0.025, 0.0);
        let d = Vec3::new(0.0, 0.0, 1.0);
        let t = sphere_trace_voxel(&field, o, d, 0.10, 0.15, &mut stats).unwrap();
        assert!((t - 0.12).abs() < 1e-4);

        // far surface: no hit inside this voxel
        let field = PlaneUp { h: 0.5, tau: 0.05 };
        let mut stats = RenderStats::default();
        assert!(sphere_trace_voxel(&field, o, d, 0.10, 0.15, &mut stats).is_none());
    }

    #[test]
    fn sphere_trace_matches_dense_marching() {
        let field = SphereSolid { r: 0.35, tau: 0.05 };
        let keys: Vec<VoxelKey> = {
            let scene = crate::scene::GtScene {
                root: Csg::Sphere { center: Vec3::ZERO, radius: 0.35 },
                bbox_min: Vec3::splat(-0.5),
                bbox_max: Vec3::splat(0.5),
            };
            scene.occupied_voxels(0.05)
        };
        let oct = build_octree_from_keys(keys, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let o = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), -1.2);
            let d = Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 1.0).normalized();
            let (hit, _) = trace_ray(&field, &oct, o, d, 3.0);
            let dense = dense_march(&|p: Vec3| p.norm() - 0.35, o, d, 0.0, 3.0, 1e-5);
            match (hit, dense) {
                (Some(h), Some(t)) => assert!((h.t - t).abs() < 1e-3, "{} vs {}", h.t, t),
                (None, None) => {}
                (h, t) => panic!("tracer {h:?} vs dense {t:?}"),
            }
        }
    }

    #[test]
    fn render_depth_planes_and_occlusion() {
        let intr = Intrinsics::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let pose = Pose::identity();

        // empty octree renders zeros
        let field = PlaneUp { h: 0.5, tau: 0.05 };
        let empty = build_octree_from_keys(vec![], 0.05);
        let (depth, _, _) = render_depth(&field, &empty, &intr, &pose, 3.0);
        assert!(depth.iter().all(|&d| d == 0.0));

        // fronto-parallel plane at z = 0.5: depth image is exactly 0.5
        let slab_keys: Vec<VoxelKey> = {
            let mut v = Vec::new();
            for x in -20..20 {
                for y in -20..20 {
                    v.push([x, y, 9]);
                    v.push([x, y, 10]);
                }
            }
            v
        };
        let oct = build_octree_from_keys(slab_keys.clone(), 0.05);
        let (depth, hits, stats) = render_depth(&field, &oct, &intr, &pose, 3.0);
        assert!(stats.hits > 0);
        for (i, h) in hits.iter().enumerate() {
            let h = h.as_ref().expect("every pixel hits the plane");
            assert!((depth[i] - 0.5).abs() < 1e-3, "depth {}", depth[i]);
            // hit point is on the surface within the normalized tolerance
            let s = field.world_sdf(h.p).unwrap() / field.tau();
            assert!(s.abs() < TRACE_TOL_NORM);
        }

        // occluder: nearer plane wins where it covers the pixel
        struct TwoPlanes;
        impl SdfField for TwoPlanes {
            fn world_sdf(&self, p: Vec3) -> Option<f64> {
                // plane at z=0.4 for x<0, else only the far plane at z=0.5
                let near = if p.x < 0.0 { 0.4 - p.z } else { f64::INFINITY };
                Some(near.min(0.5 - p.z))
            }
            fn world_grad(&self, _p: Vec3) -> Option<Vec3> {
                Some(Vec3::new(0.0, 0.0, -1.0))
            }
            fn tau(&self) -> f64 {
                0.05
            }
        }
        let mut keys = slab_keys;
        for x in -20..0 {
            for y in -20..20 {
                keys.push([x, y, 7]);
                keys.push([x, y, 8]);
            }
        }
        let oct = build_octree_from_keys(keys, 0.05);
        let (depth, _, _) = render_depth(&TwoPlanes, &oct, &intr, &pose, 3.0);
        for v in 0..24 {
            for u in 0..32 {
                let (_, d) = ray_from_pixel(&intr, &pose, u as f64, v as f64);
                let t_near = 0.4 / d.z;
                let t_far = 0.5 / d.z;
                let x_near = d.x * t_near;
                let want = if x_near < -1e-3 { 0.4 } else { 0.5 };
                let got = depth[v * 32 + u];
                if (x_near).abs() > 1e-3 {
                    assert!((got - want).abs() < 2e-3, "pixel ({u},{v}): {got} vs {want}");
                }
                let _ = t_far;
            }
        }
    }

    #[test]
    fn implicit_derivative_signs_match_analytic_cases() {
        // plane: t = h, dt/dh analytic = 1
        let field = PlaneUp { h: 0.32, tau: 0.05 };
        let o = Vec3::ZERO;
        let d = Vec3::new(0.0, 0.0, 1.0);
        let keys: Vec<VoxelKey> = (0..20).flat_map(|x| (0..20).map(move |y| [x - 10, y - 10, 6])).collect();
        let oct = build_octree_from_keys(keys, 0.05);
        let (hit, _) = trace_ray(&field, &oct, o, d, 2.0);
        let hit = hit.unwrap();
        assert!((hit.t - 0.32).abs() < 1e-4);
        // df/dh = +1 for f = h - z; dt/dh = -gamma * df/dh
        let gamma = 1.0 / hit.denom;
        let dt_dh = -gamma * 1.0;
        assert!((dt_dh - 1.0).abs() < 1e-9);
        // finite difference of the actual tracer
        let field2 = PlaneUp { h: 0.32 + 1e-6, tau: 0.05 };
        let (hit2, _) = trace_ray(&field2, &oct, o, d, 2.0);
        let fd = (hit2.unwrap().t - hit.t) / 1e-6;
        assert!((fd - 1.0).abs() < 1e-3, "fd {fd}");

        // sphere from distance D through the center: dt/dr = -1
        let field = SphereSolid { r: 0.3, tau: 0.05 };
        let scene = crate::scene::GtScene {
            root: Csg::Sphere { center: Vec3::ZERO, radius: 0.3 },
            bbox_min: Vec3::splat(-0.45),
            bbox_max: Vec3::splat(0.45),
        };
        let oct = build_octree_from_keys(scene.occupied_voxels(0.05), 0.05);
        let o = Vec3::new(0.0, 0.0, -1.0);
        let (hit, _) = trace_ray(&field, &oct, o, d, 3.0);
        let hit = hit.unwrap();
        assert!((hit.t - 0.7).abs() < 1e-4);
        let gamma = 1.0 / hit.denom; // <d, grad> = -1 at the near surface
        let dt_dr = -gamma * -1.0; // df/dr = -1
        assert!((dt_dr + 1.0).abs() < 1e-6);

        // ray-origin and direction derivatives against the tracer
        let (dt_do, dt_dd) = implicit_ray_derivatives(&hit).unwrap();
        let eps = 1e-6;
        let (hit_o, _) = trace_ray(&field, &oct, o + Vec3::new(0.0, 0.0, eps), d, 3.0);
        let fd_oz = (hit_o.unwrap().t - hit.t) / eps;
        assert!((dt_do.z - fd_oz).abs() < 1e-3, "dt/do_z {} vs {}", dt_do.z, fd_oz);
        let dpert = (d + Vec3::new(eps, 0.0, 0.0)).normalized();
        let (hit_d, _) = trace_ray(&field, &oct, o, dpert, 3.0);
        let fd_dx = (hit_d.unwrap().t - hit.t) / eps;
        // project the analytic derivative the same way the perturbation acts
        let delta_d = dpert - d;
        let analytic = (dt_dd.x * delta_d.x + dt_dd.y * delta_d.y + dt_dd.z * delta_d.z) / eps;
        assert!((analytic - fd_dx).abs() < 1e-2, "dt/dd {} vs {}", analytic, fd_dx);
    }
}
