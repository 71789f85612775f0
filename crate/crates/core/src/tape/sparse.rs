//! Sparse voxel bookkeeping: integer keys, key indices, and the pair tables
//! that drive submanifold convolution, strided down/upsampling and
//! center-to-corner propagation.

use std::collections::HashMap;
use std::sync::Arc;

use super::NodeId;

/// Integer voxel (or lattice corner) coordinate.
pub type VoxelKey = [i32; 3];

pub fn key_parent(k: VoxelKey) -> VoxelKey {
    [k[0].div_euclid(2), k[1].div_euclid(2), k[2].div_euclid(2)]
}

/// Offset of `k` within its parent, packed as x*4 + y*2 + z in {0..8}.
pub fn key_child_bits(k: VoxelKey) -> usize {
    let ox = k[0].rem_euclid(2) as usize;
    let oy = k[1].rem_euclid(2) as usize;
    let oz = k[2].rem_euclid(2) as usize;
    ox * 4 + oy * 2 + oz
}

pub fn key_child(parent: VoxelKey, bits: usize) -> VoxelKey {
    [
        parent[0] * 2 + ((bits >> 2) & 1) as i32,
        parent[1] * 2 + ((bits >> 1) & 1) as i32,
        parent[2] * 2 + (bits & 1) as i32,
    ]
}

pub fn key_add(k: VoxelKey, d: [i32; 3]) -> VoxelKey {
    [k[0] + d[0], k[1] + d[1], k[2] + d[2]]
}

/// Sorted, deduplicated key list with an O(1) reverse index.
#[derive(Debug, Clone)]
pub struct KeyIndex {
    keys: Vec<VoxelKey>,
    index: HashMap<VoxelKey, u32>,
}

impl KeyIndex {
    pub fn from_keys(mut keys: Vec<VoxelKey>) -> Self {
        keys.sort_unstable();
        keys.dedup();
        let index = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        KeyIndex { keys, index }
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, k: VoxelKey) -> Option<usize> {
        self.index.get(&k).map(|&i| i as usize)
    }

    pub fn contains(&self, k: VoxelKey) -> bool {
        self.index.contains_key(&k)
    }
}

/// One (input site, output site, tap) relation set, with CSR views over both
/// sides plus a by-tap bucketing for deterministic weight gradients.
#[derive(Debug)]
pub struct PairTable {
    pub n_in: usize,
    pub n_out: usize,
    pub taps: usize,
    /// CSR over output sites: (input site, tap).
    pub fwd_off: Vec<u32>,
    pub fwd: Vec<(u32, u16)>,
    /// CSR over input sites: (output site, tap).
    pub bwd_off: Vec<u32>,
    pub bwd: Vec<(u32, u16)>,
    /// Per tap: (input site, output site), in output-site order.
    pub by_tap: Vec<Vec<(u32, u32)>>,
}

impl PairTable {
    /// `pairs` as (out_site, in_site, tap); need not be sorted.
    fn build(n_in: usize, n_out: usize, taps: usize, mut pairs: Vec<(u32, u32, u16)>) -> Self {
        pairs.sort_unstable();
        let mut fwd_off = vec![0u32; n_out + 1];
        let mut fwd = Vec::with_capacity(pairs.len());
        for &(o, i, t) in &pairs {
            fwd_off[o as usize + 1] += 1;
            fwd.push((i, t));
        }
        for i in 0..n_out {
            fwd_off[i + 1] += fwd_off[i];
        }

        let mut by_in: Vec<(u32, u32, u16)> = pairs.iter().map(|&(o, i, t)| (i, o, t)).collect();
        by_in.sort_unstable();
        let mut bwd_off = vec![0u32; n_in + 1];
        let mut bwd = Vec::with_capacity(pairs.len());
        for &(i, o, t) in &by_in {
            bwd_off[i as usize + 1] += 1;
            bwd.push((o, t));
        }
        for i in 0..n_in {
            bwd_off[i + 1] += bwd_off[i];
        }

        let mut by_tap = vec![Vec::new(); taps];
        for &(o, i, t) in &pairs {
            by_tap[t as usize].push((i, o));
        }

        PairTable { n_in, n_out, taps, fwd_off, fwd, bwd_off, bwd, by_tap }
    }
}

/// 3x3x3 submanifold convolution pairs: outputs = inputs, taps indexed
/// (dx+1)*9 + (dy+1)*3 + (dz+1).
pub fn conv3_pairs(index: &KeyIndex) -> Arc<PairTable> {
    let n = index.len();
    let mut pairs = Vec::with_capacity(n * 8);
    for (out_site, &k) in index.keys().iter().enumerate() {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(in_site) = index.get(key_add(k, [dx, dy, dz])) {
                        let tap = ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as u16;
                        pairs.push((out_site as u32, in_site as u32, tap));
                    }
                }
            }
        }
    }
    Arc::new(PairTable::build(n, n, 27, pairs))
}

/// Stride-2 2x2x2 downsampling: output keys are the distinct parents, the tap
/// is the child offset within the parent.
pub fn down_pairs(index: &KeyIndex) -> (KeyIndex, Arc<PairTable>) {
    let parents = KeyIndex::from_keys(index.keys().iter().map(|&k| key_parent(k)).collect());
    let mut pairs = Vec::with_capacity(index.len());
    for (in_site, &k) in index.keys().iter().enumerate() {
        let out_site = parents.get(key_parent(k)).unwrap();
        pairs.push((out_site as u32, in_site as u32, key_child_bits(k) as u16));
    }
    let table = Arc::new(PairTable::build(index.len(), parents.len(), 8, pairs));
    (parents, table)
}

/// Upsampling from parents onto an explicit child key set; each listed child
/// receives its parent's features through the tap for its offset. Children
/// without a present parent receive zeros.
pub fn up_pairs(parents: &KeyIndex, children: &KeyIndex) -> Arc<PairTable> {
    let mut pairs = Vec::with_capacity(children.len());
    for (out_site, &c) in children.keys().iter().enumerate() {
        if let Some(in_site) = parents.get(key_parent(c)) {
            pairs.push((out_site as u32, in_site as u32, key_child_bits(c) as u16));
        }
    }
    let table = Arc::new(PairTable::build(parents.len(), children.len(), 8, pairs));
    table
}

/// Center-to-corner 2x2x2 propagation. The corners of voxel k are the lattice
/// points k + {0,1}^3; corner c gathers from the up-to-8 incident voxels
/// c - {0,1}^3, tapped by the relative offset.
pub fn corner_pairs(voxels: &KeyIndex) -> (KeyIndex, Arc<PairTable>) {
    let mut corner_keys = Vec::with_capacity(voxels.len() * 8);
    for &k in voxels.keys() {
        for bits in 0..8 {
            corner_keys.push(key_add(k, [(bits >> 2) & 1, (bits >> 1) & 1, bits & 1]));
        }
    }
    let corners = KeyIndex::from_keys(corner_keys);
    let mut pairs = Vec::new();
    for (out_site, &c) in corners.keys().iter().enumerate() {
        for bits in 0..8i32 {
            let v = key_add(c, [-((bits >> 2) & 1), -((bits >> 1) & 1), -(bits & 1)]);
            if let Some(in_site) = voxels.get(v) {
                pairs.push((out_site as u32, in_site as u32, bits as u16));
            }
        }
    }
    let table = Arc::new(PairTable::build(voxels.len(), corners.len(), 8, pairs));
    (corners, table)
}

/// Features attached to a sorted key set at one pyramid level (0 = finest).
#[derive(Debug, Clone)]
pub struct SparseTensor {
    pub keys: Arc<KeyIndex>,
    pub level: u32,
    pub feat: NodeId,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parent_and_child_bits_handle_negatives() {
        assert_eq!(key_parent([-1, -2, 3]), [-1, -1, 1]);
        assert_eq!(key_child_bits([-1, -2, 3]), 4 * 1 + 2 * 0 + 1);
        for bits in 0..8 {
            let child = key_child([-3, 2, 0], bits);
            assert_eq!(key_parent(child), [-3, 2, 0]);
            assert_eq!(key_child_bits(child), bits);
        }
    }

    #[test]
    fn key_index_sorts_and_dedups() {
        let idx = KeyIndex::from_keys(vec![[2, 0, 0], [0, 0, 0], [2, 0, 0]]);
        assert_eq!(idx.keys(), &[[0, 0, 0], [2, 0, 0]]);
        assert_eq!(idx.get([2, 0, 0]), Some(1));
        assert_eq!(idx.get([1, 0, 0]), None);
    }

    #[test]
    fn down_groups_eight_siblings_to_one_parent() {
        let keys: Vec<VoxelKey> = (0..8).map(|b| key_child([3, -1, 2], b)).collect();
        let idx = KeyIndex::from_keys(keys);
        let (parents, table) = down_pairs(&idx);
        assert_eq!(parents.len(), 1);
        assert_eq!(table.fwd.len(), 8);
    }

    #[test]
    fn corner_counts_for_single_voxel() {
        let idx = KeyIndex::from_keys(vec![[0, 0, 0]]);
        let (corners, table) = corner_pairs(&idx);
        assert_eq!(corners.len(), 8);
        // each corner sees exactly the one voxel
        assert_eq!(table.fwd.len(), 8);
    }
}
