//! Point-set reconstruction metrics: RMSE, chamfer distance, and surface
//! precision/recall/F-score at a distance threshold. Nearest neighbors go
//! through a uniform hash grid that returns exactly the brute-force answer.

use std::collections::HashMap;

use crate::geom::Vec3;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    /// Root mean squared prediction-to-truth distance, meters.
    pub rmse: f64,
    /// Symmetric chamfer distance (mean of both directional means), meters.
    pub chamfer: f64,
    /// Percent of predicted points within tau of the truth.
    pub precision: f64,
    /// Percent of truth points within tau of the prediction.
    pub recall: f64,
    pub fscore: f64,
    pub tau: f64,
    pub pred_points: usize,
    pub gt_points: usize,
}

/// Uniform-grid nearest-neighbor index. Queries expand Chebyshev shells until
/// the best squared distance provably beats every unvisited cell, so results
/// match exhaustive search exactly.
pub struct PointIndex {
    cell: f64,
    grid: HashMap<[i64; 3], Vec<u32>>,
    cell_lo: [i64; 3],
    cell_hi: [i64; 3],
    points: Vec<Vec3>,
}

impl PointIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut lo = Vec3::splat(f64::INFINITY);
        let mut hi = Vec3::splat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        let extent = (hi - lo).max_component().max(1e-9);
        let cell = (extent / (points.len() as f64).cbrt()).max(extent * 1e-6);
        let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut cell_lo = [i64::MAX; 3];
        let mut cell_hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = Self::key(cell, *p);
            for a in 0..3 {
                cell_lo[a] = cell_lo[a].min(key[a]);
                cell_hi[a] = cell_hi[a].max(key[a]);
            }
            grid.entry(key).or_default().push(i as u32);
        }
        Ok(PointIndex { cell, grid, cell_lo, cell_hi, points: points.to_vec() })
    }

    fn key(cell: f64, p: Vec3) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    fn scan_all(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for p in &self.points {
            let d = q - *p;
            let sq = d.dot(d);
            if sq < best {
                best = sq;
            }
        }
        best
    }

    /// Exact squared distance to the nearest stored point.
    pub fn nearest_sq(&self, q: Vec3) -> f64 {
        let center = Self::key(self.cell, q);
        // first shell that can contain any cell at all
        let mut start = 0i64;
        for a in 0..3 {
            let gap = if center[a] < self.cell_lo[a] {
                self.cell_lo[a] - center[a]
            } else if center[a] > self.cell_hi[a] {
                center[a] - self.cell_hi[a]
            } else {
                0
            };
            start = start.max(gap);
        }
        let mut best = f64::INFINITY;
        let mut ring = start;
        loop {
            // shells wider than the whole grid: plain scan is cheaper and
            // always exact
            let slots = (2 * ring + 1).pow(2).saturating_mul(6).max(1) as usize;
            if slots > 4 * self.grid.len() + 64 {
                return best.min(self.scan_all(q));
            }
            // any point in an unvisited cell is at least (ring-1)*cell away
            if ring > start {
                let bound = (ring - 1) as f64 * self.cell;
                if best <= bound * bound {
                    return best;
                }
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(ids) = self.grid.get(&key) {
                            for &i in ids {
                                let d = q - self.points[i as usize];
                                let sq = d.dot(d);
                                if sq < best {
                                    best = sq;
                                }
                            }
                        }
                    }
                }
            }
            ring += 1;
        }
    }
}

fn nearest_sq_all(from: &[Vec3], to: &PointIndex) -> Vec<f64> {
    from.iter().map(|&p| to.nearest_sq(p)).collect()
}

/// Symmetric chamfer distance: the average of both directional mean
/// nearest-neighbor distances (not squared).
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let ia = PointIndex::build(a)?;
    let ib = PointIndex::build(b)?;
    let ab: f64 = nearest_sq_all(a, &ib).iter().map(|d| d.sqrt()).sum::<f64>() / a.len() as f64;
    let ba: f64 = nearest_sq_all(b, &ia).iter().map(|d| d.sqrt()).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// Root mean squared nearest-neighbor distance from prediction to truth.
pub fn rmse(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySet);
    }
    let igt = PointIndex::build(gt)?;
    let mean_sq: f64 = nearest_sq_all(pred, &igt).iter().sum::<f64>() / pred.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Surface precision/recall/F-score (percent) at threshold tau: a point is
/// accepted when its nearest counterpart is closer than tau.
pub fn precision_recall_fscore(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<(f64, f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySet);
    }
    let igt = PointIndex::build(gt)?;
    let ipred = PointIndex::build(pred)?;
    let tau_sq = tau * tau;
    let p_hit = pred.iter().filter(|&&p| igt.nearest_sq(p) < tau_sq).count();
    let r_hit = gt.iter().filter(|&&p| ipred.nearest_sq(p) < tau_sq).count();
    let p = 100.0 * p_hit as f64 / pred.len() as f64;
    let r = 100.0 * r_hit as f64 / gt.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f))
}

/// Full report at the standard 0.02 m acceptance threshold.
pub fn evaluate(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<MetricReport> {
    let (precision, recall, fscore) = precision_recall_fscore(pred, gt, tau)?;
    Ok(MetricReport {
        rmse: rmse(pred, gt)?,
        chamfer: chamfer(pred, gt)?,
        precision,
        recall,
        fscore,
        tau,
        pred_points: pred.len(),
        gt_points: gt.len(),
    })
}

/// Brute-force O(N^2) reference implementations. These stay independent of
/// the accelerated path so they can serve as its oracle.
pub mod exhaustive {
    use super::*;

    pub fn nearest_sq(q: Vec3, pts: &[Vec3]) -> f64 {
        let mut best = f64::INFINITY;
        for p in pts {
            let d = q - *p;
            let sq = d.dot(d);
            if sq < best {
                best = sq;
            }
        }
        best
    }

    pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let ab: f64 = a.iter().map(|&p| nearest_sq(p, b).sqrt()).sum::<f64>() / a.len() as f64;
        let ba: f64 = b.iter().map(|&p| nearest_sq(p, a).sqrt()).sum::<f64>() / b.len() as f64;
        0.5 * (ab + ba)
    }

    pub fn rmse(pred: &[Vec3], gt: &[Vec3]) -> f64 {
        let mean_sq: f64 =
            pred.iter().map(|&p| nearest_sq(p, gt)).sum::<f64>() / pred.len() as f64;
        mean_sq.sqrt()
    }

    pub fn precision_recall_fscore(pred: &[Vec3], gt: &[Vec3], tau: f64) -> (f64, f64, f64) {
        let tau_sq = tau * tau;
        let p_hit = pred.iter().filter(|&&p| nearest_sq(p, gt) < tau_sq).count();
        let r_hit = gt.iter().filter(|&&p| nearest_sq(p, pred) < tau_sq).count();
        let p = 100.0 * p_hit as f64 / pred.len() as f64;
        let r = 100.0 * r_hit as f64 / gt.len() as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cloud(&mut rng, 200, 1.0);
        let r = evaluate(&a, &a, 0.02).unwrap();
        assert_eq!(r.chamfer, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!((r.precision, r.recall, r.fscore), (100.0, 100.0, 100.0));
    }

    #[test]
    fn single_point_offset_arithmetic() {
        let a = vec![Vec3::ZERO];
        let b = vec![Vec3::new(0.0, 0.0, 0.01)];
        let r = evaluate(&a, &b, 0.02).unwrap();
        assert!((r.chamfer - 0.01).abs() < 1e-15);
        assert!((r.rmse - 0.01).abs() < 1e-15);
        assert_eq!((r.precision, r.recall, r.fscore), (100.0, 100.0, 100.0));
    }

    #[test]
    fn accelerated_equals_bruteforce_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..25 {
            let n = rng.gen_range(1..400);
            let m = rng.gen_range(1..400);
            let a = random_cloud(&mut rng, n, 0.5);
            let b = random_cloud(&mut rng, m, 0.5);
            assert_eq!(chamfer(&a, &b).unwrap(), exhaustive::chamfer(&a, &b));
            assert_eq!(rmse(&a, &b).unwrap(), exhaustive::rmse(&a, &b));
            assert_eq!(
                precision_recall_fscore(&a, &b, 0.02).unwrap(),
                exhaustive::precision_recall_fscore(&a, &b, 0.02)
            );
        }
    }

    #[test]
    fn chamfer_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_cloud(&mut rng, 60, 1.0);
            let b = random_cloud(&mut rng, 45, 1.0);
            assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        }
    }

    #[test]
    fn widening_tau_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_cloud(&mut rng, 80, 0.2);
        let b = random_cloud(&mut rng, 90, 0.2);
        let mut prev = (0.0, 0.0);
        for tau in [0.005, 0.01, 0.02, 0.05, 0.1, 0.5] {
            let (p, r, _) = precision_recall_fscore(&a, &b, tau).unwrap();
            assert!(p >= prev.0 && r >= prev.1, "tau {tau} decreased precision/recall");
            prev = (p, r);
        }
    }

    #[test]
    fn empty_inputs_error() {
        let a = vec![Vec3::ZERO];
        assert!(matches!(chamfer(&a, &[]), Err(Error::EmptySet)));
        assert!(matches!(rmse(&[], &a), Err(Error::EmptySet)));
        assert!(matches!(precision_recall_fscore(&[], &a, 0.02), Err(Error::EmptySet)));
    }
}
