//! Generated 256-case marching-cubes table.
//!
//! Corner i has coordinate bits (x = i>>2 & 1, y = i>>1 & 1, z = i & 1),
//! matching the corner convention used by the sparse grid. Contour segments
//! on each face pair the crossings that bound a run of inside corners; the
//! pairing depends only on the face's own corner signs, so neighboring cells
//! always agree and the extracted surface has no cracks, including in the
//! classic ambiguous saddle cases.

use std::sync::OnceLock;

/// Edge i connects CUBE_EDGES[i].0 and CUBE_EDGES[i].1.
pub const CUBE_EDGES: [(usize, usize); 12] = [
    // x-aligned
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
    // y-aligned
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    // z-aligned
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
];

/// Faces as corner cycles (rotational order).
const FACES: [[usize; 4]; 6] = [
    [0, 1, 3, 2], // x = 0
    [4, 5, 7, 6], // x = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 2, 6, 4], // z = 0
    [1, 3, 7, 5], // z = 1
];

fn edge_between(a: usize, b: usize) -> usize {
    for (i, &(x, y)) in CUBE_EDGES.iter().enumerate() {
        if (x, y) == (a, b) || (x, y) == (b, a) {
            return i;
        }
    }
    unreachable!("corners {a},{b} do not share an edge")
}

/// Triangles (as edge-index triples) for one sign configuration.
fn triangulate_config(config: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| (config >> c) & 1 == 1;

    // adjacency between crossed edges: each crossed edge meets exactly one
    // contour segment on each of its two faces
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for face in &FACES {
        // boundary crossings of this face, in cyclic order
        let mut entries: Vec<(usize, usize)> = Vec::new(); // (cycle slot, edge id)
        for i in 0..4 {
            let a = face[i];
            let b = face[(i + 1) % 4];
            if inside(a) != inside(b) {
                entries.push((i, edge_between(a, b)));
            }
        }
        if entries.is_empty() {
            continue;
        }
        // pair crossings that bound an inside run: entry where the run
        // starts (outside -> inside), exit where it ends
        for &(slot, edge) in &entries {
            let a = face[slot];
            let b = face[(slot + 1) % 4];
            if !(inside(b) && !inside(a)) {
                continue; // only handle entries; exits are found by walking
            }
            let _ = b;
            // walk forward until the run of inside corners ends
            let mut j = (slot + 1) % 4;
            loop {
                let nxt = (j + 1) % 4;
                if !inside(face[nxt]) {
                    let exit = edge_between(face[j], face[nxt]);
                    adj[edge].push(exit);
                    adj[exit].push(edge);
                    break;
                }
                j = nxt;
            }
        }
    }

    // extract closed loops and fan-triangulate
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if seen[start] || adj[start].is_empty() {
            continue;
        }
        debug_assert_eq!(adj[start].len(), 2, "crossed edges have two segments");
        let mut cycle = vec![start];
        seen[start] = true;
        let mut prev = start;
        let mut cur = adj[start][0];
        while cur != start {
            cycle.push(cur);
            seen[cur] = true;
            let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
            prev = cur;
            cur = next;
        }
        for i in 1..cycle.len() - 1 {
            tris.push([cycle[0] as u8, cycle[i] as u8, cycle[i + 1] as u8]);
        }
    }
    tris
}

/// The 256-case table: triangles as edge-index triples per configuration.
pub fn mc_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate_config).collect())
}
