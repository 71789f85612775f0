//! The implicit scene network: a per-point encoder pooled into voxels, a
//! sparse U-Net with sparsity prediction and pruning, center-to-corner
//! feature propagation, and the SDF decoder with trilinear feature
//! interpolation.
//!
//! The decoder sees the local position through a periodic cosine window
//! rather than raw fractional coordinates; together with corner-shared
//! features this keeps the decoded field continuous across voxel faces.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::Vec3;
use crate::ingest::VoxelBinning;
use crate::tape::{
    self, conv3_pairs, corner_pairs, cos_window, cos_window_grad, down_pairs, key_child,
    key_parent, leaky_relu, leaky_relu_grad, pair_conv_apply, trilinear_weight,
    trilinear_weight_grad, up_pairs, KeyIndex, NodeId, PairTable, ParamId, ParamSet, Tape, Tensor,
    VoxelKey,
};
use crate::{Error, Result};

pub const MAX_UNET_WIDTH: usize = 256;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub unet_levels: usize,
    pub decoder_hidden: usize,
    pub voxel_size: f64,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            encoder_layers: 4,
            unet_levels: 5,
            decoder_hidden: 64,
            voxel_size: 0.05,
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel width at a pyramid level: 32-64-128-256-256 and mirrored up.
    pub fn width(&self, level: usize) -> usize {
        (self.latent_dim << level).min(MAX_UNET_WIDTH)
    }

    /// Truncation: decoder output s in [-1,1] spans [-tau, tau] meters.
    pub fn truncation(&self) -> f64 {
        self.voxel_size
    }
}

/// Per-decoder-level predicted-occupied keys with confidence scores; level 0
/// is the finest. Parent-closed: each key's parent is present one level up.
#[derive(Debug, Clone)]
pub struct SparsityPyramid {
    pub levels: Vec<PyramidLevel>,
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub keys: Vec<VoxelKey>,
    pub conf: Vec<f64>,
}

impl SparsityPyramid {
    /// Builds a pyramid from finest-level keys by parent aggregation, with
    /// unit confidence everywhere.
    pub fn from_finest(finest: Vec<VoxelKey>, levels: usize) -> Self {
        let mut out = Vec::with_capacity(levels);
        let mut cur = KeyIndex::from_keys(finest);
        for _ in 0..levels {
            let next = KeyIndex::from_keys(cur.keys().iter().map(|&k| key_parent(k)).collect());
            out.push(PyramidLevel { conf: vec![1.0; cur.len()], keys: cur.keys().to_vec() });
            cur = next;
        }
        SparsityPyramid { levels: out }
    }

    pub fn is_parent_closed(&self) -> bool {
        for l in 0..self.levels.len() - 1 {
            let parents = KeyIndex::from_keys(self.levels[l + 1].keys.clone());
            for &k in &self.levels[l].keys {
                if !parents.contains(key_parent(k)) {
                    return false;
                }
            }
        }
        true
    }
}

pub struct CircNet {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

struct Layer {
    w: ParamId,
    b: ParamId,
}

impl CircNet {
    pub fn new(cfg: ModelConfig) -> Self {
        assert_eq!(cfg.width(0), cfg.latent_dim, "finest U-Net width must equal the latent size");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamSet::new();
        let l = cfg.latent_dim;

        // point encoder: shared MLP on (p_local, normal) in R^6
        let mut enc_in = 6;
        for i in 0..cfg.encoder_layers {
            p.add_kaiming(&format!("enc.l{i}.w"), &[enc_in, l], enc_in, &mut rng);
            p.add_zeros(&format!("enc.l{i}.b"), &[l]);
            if i + 1 < cfg.encoder_layers {
                p.add_const(&format!("enc.l{i}.gamma"), &[l], 1.0);
                p.add_zeros(&format!("enc.l{i}.beta"), &[l]);
            }
            enc_in = l;
        }

        // U-Net encoder path
        for lev in 0..cfg.unet_levels {
            let c = cfg.width(lev);
            p.add_kaiming(&format!("unet.enc{lev}.w"), &[27 * c, c], 27 * c, &mut rng);
            p.add_const(&format!("unet.enc{lev}.gamma"), &[c], 1.0);
            p.add_zeros(&format!("unet.enc{lev}.beta"), &[c]);
            if lev + 1 < cfg.unet_levels {
                let cn = cfg.width(lev + 1);
                p.add_kaiming(&format!("unet.down{lev}.w"), &[8 * c, cn], 8 * c, &mut rng);
                p.add_const(&format!("unet.down{lev}.gamma"), &[cn], 1.0);
                p.add_zeros(&format!("unet.down{lev}.beta"), &[cn]);
            }
        }

        // U-Net decoder path with sparsity heads
        for lev in (0..cfg.unet_levels - 1).rev() {
            let c = cfg.width(lev);
            let cp = cfg.width(lev + 1);
            p.add_kaiming(&format!("unet.up{lev}.w"), &[8 * cp, c], 8 * cp, &mut rng);
            p.add_const(&format!("unet.up{lev}.gamma"), &[c], 1.0);
            p.add_zeros(&format!("unet.up{lev}.beta"), &[c]);
            p.add_kaiming(&format!("unet.head{lev}.w1"), &[c, 32], c, &mut rng);
            p.add_zeros(&format!("unet.head{lev}.b1"), &[32]);
            p.add_kaiming(&format!("unet.head{lev}.w2"), &[32, 1], 32, &mut rng);
            p.add_zeros(&format!("unet.head{lev}.b2"), &[1]);
            p.add_kaiming(&format!("unet.dec{lev}.w"), &[27 * c, c], 27 * c, &mut rng);
            p.add_const(&format!("unet.dec{lev}.gamma"), &[c], 1.0);
            p.add_zeros(&format!("unet.dec{lev}.beta"), &[c]);
        }

        // center-to-corner propagation (bias-free)
        p.add_kaiming("corner.w", &[8 * l, l], 8 * l, &mut rng);

        // SDF decoder
        let h = cfg.decoder_hidden;
        p.add_kaiming("dec.l0.w", &[3 + l, h], 3 + l, &mut rng);
        p.add_zeros("dec.l0.b", &[h]);
        p.add_kaiming("dec.l1.w", &[h, h], h, &mut rng);
        p.add_zeros("dec.l1.b", &[h]);
        p.add_kaiming("dec.l2.w", &[h, 1], h, &mut rng);
        p.add_zeros("dec.l2.b", &[1]);

        CircNet { cfg, params: p }
    }

    fn layer(&self, name: &str) -> Layer {
        Layer {
            w: self.params.id(&format!("{name}.w")).unwrap(),
            b: self.params.id(&format!("{name}.b")).unwrap(),
        }
    }

    fn norm_ids(&self, name: &str) -> (ParamId, ParamId) {
        (
            self.params.id(&format!("{name}.gamma")).unwrap(),
            self.params.id(&format!("{name}.beta")).unwrap(),
        )
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        table: Arc<PairTable>,
        conv: &str,
        norm: &str,
    ) -> Result<NodeId> {
        let w = tape.param(&self.params, self.params.id(conv).unwrap());
        let y = tape.pair_conv(x, w, table)?;
        let (g, b) = self.norm_ids(norm);
        let gn = tape.param(&self.params, g);
        let bn = tape.param(&self.params, b);
        let y = tape.instance_norm(y, gn, bn, 1e-5)?;
        tape.leaky_relu(y, self.cfg.leaky_slope)
    }

    /// Shared per-point MLP + per-voxel mean pooling. Returns the occupied
    /// voxel keys (sorted) and the pooled features node, one row per voxel.
    pub fn encode_points(&self, tape: &mut Tape, bins: &VoxelBinning) -> Result<(Arc<KeyIndex>, NodeId)> {
        if bins.bins.is_empty() {
            return Err(Error::EmptyScene);
        }
        let n_pts = bins.num_points();
        let mut data = Vec::with_capacity(n_pts * 6);
        let mut groups = Vec::with_capacity(bins.bins.len());
        let mut keys = Vec::with_capacity(bins.bins.len());
        let mut row = 0u32;
        for (key, pts) in &bins.bins {
            keys.push(*key);
            groups.push((row, row + pts.len() as u32));
            row += pts.len() as u32;
            for (local, normal) in pts {
                data.extend_from_slice(&[local.x, local.y, local.z, normal.x, normal.y, normal.z]);
            }
        }
        let mut x = tape.leaf(Tensor::new(vec![n_pts, 6], data)?);
        for i in 0..self.cfg.encoder_layers {
            let lay = self.layer(&format!("enc.l{i}"));
            let w = tape.param(&self.params, lay.w);
            let b = tape.param(&self.params, lay.b);
            x = tape.linear(x, w, b)?;
            if i + 1 < self.cfg.encoder_layers {
                let (g, bt) = self.norm_ids(&format!("enc.l{i}"));
                let gn = tape.param(&self.params, g);
                let bn = tape.param(&self.params, bt);
                x = tape.instance_norm(x, gn, bn, 1e-5)?;
                x = tape.leaky_relu(x, self.cfg.leaky_slope)?;
            }
        }
        let pooled = tape.mean_pool_groups(x, Rc::new(groups))?;
        Ok((Arc::new(KeyIndex::from_keys(keys)), pooled))
    }

    /// Runs the sparse U-Net. With `teacher` present, ground-truth occupancy
    /// replaces thresholding for keeping, skipping, and the next level's
    /// candidate set; confidence heads are still evaluated on the candidate
    /// sites so the structure loss can supervise them.
    pub fn unet_forward(
        &self,
        tape: &mut Tape,
        v0_keys: Arc<KeyIndex>,
        v0_feats: NodeId,
        teacher: Option<&SparsityPyramid>,
    ) -> Result<UnetRun> {
        let levels = self.cfg.unet_levels;
        if let Some(t) = teacher {
            assert_eq!(t.levels.len(), levels, "teacher pyramid level count");
        }

        // encoder path
        let mut enc: Vec<(Arc<KeyIndex>, NodeId)> = Vec::with_capacity(levels);
        let mut keys = v0_keys;
        let mut x = v0_feats;
        for lev in 0..levels {
            let table = conv3_pairs(&keys);
            x = self.conv_block(tape, x, table, &format!("unet.enc{lev}.w"), &format!("unet.enc{lev}"))?;
            enc.push((keys.clone(), x));
            if lev + 1 < levels {
                let (parents, dtable) = down_pairs(&keys);
                x = self.conv_block(tape, x, dtable, &format!("unet.down{lev}.w"), &format!("unet.down{lev}"))?;
                keys = Arc::new(parents);
            }
        }

        // decoder start: coarsest active set
        let (mut cur_keys, mut cur_feats) = match teacher {
            None => (enc[levels - 1].0.clone(), enc[levels - 1].1),
            Some(t) => {
                let want = KeyIndex::from_keys(t.levels[levels - 1].keys.clone());
                let map: Vec<Option<u32>> = want
                    .keys()
                    .iter()
                    .map(|&k| enc[levels - 1].0.get(k).map(|i| i as u32))
                    .collect();
                let feats = tape.gather_rows_or_zero(enc[levels - 1].1, Rc::new(map))?;
                (Arc::new(want), feats)
            }
        };

        let mut pyramid_levels = vec![PyramidLevel { keys: Vec::new(), conf: Vec::new() }; levels];
        pyramid_levels[levels - 1] =
            PyramidLevel { keys: cur_keys.keys().to_vec(), conf: vec![1.0; cur_keys.len()] };
        let mut struct_terms = Vec::new();

        for lev in (0..levels - 1).rev() {
            // candidates: all 8 children of the current set
            let mut cand_keys = Vec::with_capacity(cur_keys.len() * 8);
            for &k in cur_keys.keys() {
                for bits in 0..8 {
                    cand_keys.push(key_child(k, bits));
                }
            }
            let cand = Arc::new(KeyIndex::from_keys(cand_keys));
            let utable = up_pairs(&cur_keys, &cand);
            let up = {
                let w = tape.param(&self.params, self.params.id(&format!("unet.up{lev}.w")).unwrap());
                let y = tape.pair_conv(cur_feats, w, utable)?;
                let (g, b) = self.norm_ids(&format!("unet.up{lev}"));
                let gn = tape.param(&self.params, g);
                let bn = tape.param(&self.params, b);
                let y = tape.instance_norm(y, gn, bn, 1e-5)?;
                tape.leaky_relu(y, self.cfg.leaky_slope)?
            };

            // sparsity head on every candidate
            let conf = {
                let w1 = tape.param(&self.params, self.params.id(&format!("unet.head{lev}.w1")).unwrap());
                let b1 = tape.param(&self.params, self.params.id(&format!("unet.head{lev}.b1")).unwrap());
                let h = tape.linear(up, w1, b1)?;
                let h = tape.leaky_relu(h, self.cfg.leaky_slope)?;
                let w2 = tape.param(&self.params, self.params.id(&format!("unet.head{lev}.w2")).unwrap());
                let b2 = tape.param(&self.params, self.params.id(&format!("unet.head{lev}.b2")).unwrap());
                let z = tape.linear(h, w2, b2)?;
                tape.sigmoid(z)?
            };
            let conf_vals: Vec<f64> = tape.value(conf).data().to_vec();

            // keep: teacher occupancy, or confidence >= 0.5
            let keep_keys: Vec<VoxelKey> = match teacher {
                Some(t) => {
                    let labels: Vec<f64> = {
                        let gt = KeyIndex::from_keys(t.levels[lev].keys.clone());
                        cand.keys().iter().map(|&k| if gt.contains(k) { 1.0 } else { 0.0 }).collect()
                    };
                    struct_terms.push(StructTerm { level: lev, conf, labels: Rc::new(labels) });
                    t.levels[lev].keys.clone()
                }
                None => cand
                    .keys()
                    .iter()
                    .zip(&conf_vals)
                    .filter(|(_, &c)| c >= 0.5)
                    .map(|(&k, _)| k)
                    .collect(),
            };
            if keep_keys.is_empty() {
                return Err(Error::AllPruned);
            }
            let keep = Arc::new(KeyIndex::from_keys(keep_keys));
            let keep_rows: Vec<u32> =
                keep.keys().iter().map(|&k| cand.get(k).unwrap() as u32).collect();
            let kept = tape.gather_rows(up, Rc::new(keep_rows))?;

            pyramid_levels[lev] = PyramidLevel {
                keys: keep.keys().to_vec(),
                conf: keep.keys().iter().map(|&k| conf_vals[cand.get(k).unwrap()]).collect(),
            };

            // sparsity-guided skip: encoder features where they exist, zeros
            // on completed voxels
            let skip_map: Vec<Option<u32>> =
                keep.keys().iter().map(|&k| enc[lev].0.get(k).map(|i| i as u32)).collect();
            let skip = tape.gather_rows_or_zero(enc[lev].1, Rc::new(skip_map))?;
            let mixed = tape.add(kept, skip)?;

            let table = conv3_pairs(&keep);
            cur_feats = self.conv_block(tape, mixed, table, &format!("unet.dec{lev}.w"), &format!("unet.dec{lev}"))?;
            cur_keys = keep;
        }

        Ok(UnetRun {
            keys: cur_keys,
            latents: cur_feats,
            pyramid: SparsityPyramid { levels: pyramid_levels },
            struct_terms,
        })
    }

    /// Records corner propagation on the tape: corner feature = bias-free
    /// 2x2x2 convolution over the up-to-8 incident voxel latents.
    pub fn propagate_corners_on_tape(
        &self,
        tape: &mut Tape,
        keys: &KeyIndex,
        latents: NodeId,
    ) -> Result<(KeyIndex, NodeId)> {
        let (corners, table) = corner_pairs(keys);
        let w = tape.param(&self.params, self.params.id("corner.w").unwrap());
        let feats = tape.pair_conv(latents, w, table)?;
        Ok((corners, feats))
    }

    pub fn decoder_weights(&self) -> DecoderWeights {
        DecoderWeights {
            w1: self.params.value(self.params.id("dec.l0.w").unwrap()).clone(),
            b1: self.params.value(self.params.id("dec.l0.b").unwrap()).clone(),
            w2: self.params.value(self.params.id("dec.l1.w").unwrap()).clone(),
            b2: self.params.value(self.params.id("dec.l1.b").unwrap()).clone(),
            w3: self.params.value(self.params.id("dec.l2.w").unwrap()).clone(),
            b3: self.params.value(self.params.id("dec.l2.b").unwrap()).clone(),
            slope: self.cfg.leaky_slope,
        }
    }
}

pub struct UnetRun {
    pub keys: Arc<KeyIndex>,
    pub latents: NodeId,
    pub pyramid: SparsityPyramid,
    pub struct_terms: Vec<StructTerm>,
}

pub struct StructTerm {
    pub level: usize,
    pub conf: NodeId,
    pub labels: Rc<Vec<f64>>,
}

/// The scene representation: finest-level latent vectors on a sparse voxel
/// grid.
#[derive(Debug, Clone)]
pub struct SparseFeatureGrid {
    pub voxel_size: f64,
    pub keys: KeyIndex,
    /// [M, L] latent rows matching `keys` order.
    pub latents: Tensor,
}

const GRID_MAGIC: &str = "CGRD1";

impl SparseFeatureGrid {
    pub fn latent_dim(&self) -> usize {
        self.latents.cols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{GRID_MAGIC}")?;
        writeln!(f, "{:.17e} {} {}", self.voxel_size, self.latent_dim(), self.keys.len())?;
        writeln!(f, "---")?;
        let mut blob = Vec::with_capacity(self.keys.len() * (12 + self.latent_dim() * 8));
        for k in self.keys.keys() {
            for c in k {
                blob.extend_from_slice(&c.to_le_bytes());
            }
        }
        for v in self.latents.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let sep = b"---\n";
        let split = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| Error::Format("grid: missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Format("grid: header is not utf-8".into()))?;
        let blob = &bytes[split + sep.len()..];
        let mut lines = header.lines();
        if lines.next() != Some(GRID_MAGIC) {
            return Err(Error::Format(format!("grid: expected magic {GRID_MAGIC}")));
        }
        let meta = lines.next().ok_or_else(|| Error::Format("grid: missing metadata".into()))?;
        let toks: Vec<&str> = meta.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::Format("grid: metadata wants `b L M`".into()));
        }
        let b: f64 = toks[0].parse().map_err(|e| Error::Format(format!("grid b: {e}")))?;
        let l: usize = toks[1].parse().map_err(|e| Error::Format(format!("grid L: {e}")))?;
        let m: usize = toks[2].parse().map_err(|e| Error::Format(format!("grid M: {e}")))?;
        let want = m * 12 + m * l * 8;
        if blob.len() != want {
            return Err(Error::Format(format!("grid: payload {} bytes, want {want}", blob.len())));
        }
        let mut keys = Vec::with_capacity(m);
        for i in 0..m {
            let at = i * 12;
            let k = |o: usize| i32::from_le_bytes(blob[at + o * 4..at + o * 4 + 4].try_into().unwrap());
            keys.push([k(0), k(1), k(2)]);
        }
        let data: Vec<f64> = blob[m * 12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let index = KeyIndex::from_keys(keys.clone());
        if index.keys() != keys.as_slice() {
            return Err(Error::Format("grid: keys must be sorted and unique".into()));
        }
        Ok(SparseFeatureGrid { voxel_size: b, keys: index, latents: Tensor::new(vec![m, l], data)? })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub slope: f64,
}

impl DecoderWeights {
    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Plain decoder evaluation: inputs are the cosine-windowed local
    /// coordinates and the interpolated feature; output is clamped to [-1, 1].
    pub fn decode(&self, u: [f64; 3], lhat: &[f64]) -> f64 {
        self.decode_full(u, lhat).0
    }

    /// Returns (s, pre-clamp z3, z1, z2, input) for gradient chains.
    #[allow(clippy::type_complexity)]
    fn decode_full(&self, u: [f64; 3], lhat: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden();
        let din = self.input_dim();
        debug_assert_eq!(lhat.len() + 3, din);
        let mut input = Vec::with_capacity(din);
        input.push(cos_window(u[0]));
        input.push(cos_window(u[1]));
        input.push(cos_window(u[2]));
        input.extend_from_slice(lhat);

        // matmul first, bias second: the same evaluation order the tape's
        // linear op records, so recorded and plain paths agree bit for bit
        let mut z1 = vec![0.0; h];
        tape::matmul_acc(&input, 1, din, self.w1.data(), h, &mut z1);
        for (z, b) in z1.iter_mut().zip(self.b1.data()) {
            *z += b;
        }
        let h1: Vec<f64> = z1.iter().map(|&z| leaky_relu(z, self.slope)).collect();
        let mut z2 = vec![0.0; h];
        tape::matmul_acc(&h1, 1, h, self.w2.data(), h, &mut z2);
        for (z, b) in z2.iter_mut().zip(self.b2.data()) {
            *z += b;
        }
        let h2: Vec<f64> = z2.iter().map(|&z| leaky_relu(z, self.slope)).collect();
        let mut z3 = vec![0.0; 1];
        tape::matmul_acc(&h2, 1, h, self.w3.data(), 1, &mut z3);
        z3[0] += self.b3.data()[0];
        (tape::clamp11(z3[0]), z3[0], z1, z2, input)
    }

    /// Gradient of the clamped output w.r.t. the decoder input vector
    /// (windowed position and feature), evaluated analytically.
    fn input_gradient(&self, z3: f64, z1: &[f64], z2: &[f64]) -> Vec<f64> {
        let h = self.hidden();
        let din = self.input_dim();
        let g3 = tape::clamp11_grad(z3);
        // delta2 = g3 * W3^T .* lrelu'(z2)
        let mut delta2 = vec![0.0; h];
        for i in 0..h {
            delta2[i] = g3 * self.w3.data()[i] * leaky_relu_grad(z2[i], self.slope);
        }
        // delta1 = (delta2 W2^T) .* lrelu'(z1)
        let mut delta1 = vec![0.0; h];
        tape::matmul_nt_acc(&delta2, 1, h, self.w2.data(), h, &mut delta1);
        for (d, &z) in delta1.iter_mut().zip(z1) {
            *d *= leaky_relu_grad(z, self.slope);
        }
        // j = delta1 W1^T
        let mut j = vec![0.0; din];
        tape::matmul_nt_acc(&delta1, 1, h, self.w1.data(), din, &mut j);
        j
    }
}

/// A frozen grid + decoder, cheap to query concurrently. Corner features are
/// derived from the latents through the (frozen) corner convolution and must
/// be refreshed when latents change.
pub struct FrozenField {
    pub grid: SparseFeatureGrid,
    pub dec: DecoderWeights,
    pub corner_w: Tensor,
    pub corner_keys: KeyIndex,
    pub corner_table: Arc<PairTable>,
    pub corner_feats: Tensor,
    /// Per voxel: row index of each of its 8 corners, in bit order.
    pub corner_rows: Vec<[u32; 8]>,
    pub tau: f64,
}

/// Partial derivatives of one SDF evaluation, used by the renderer's backward
/// pass.
pub struct QueryDerivatives {
    pub s_norm: f64,
    pub grad_world: Vec3,
    pub voxel: usize,
    /// d f_norm / d interpolated-feature (length L).
    pub dlhat: Vec<f64>,
    /// Local coordinates inside the voxel.
    pub u: [f64; 3],
}

impl FrozenField {
    pub fn new(grid: SparseFeatureGrid, net: &CircNet) -> Self {
        let corner_w = net.params.value(net.params.id("corner.w").unwrap()).clone();
        Self::with_weights(grid, net.decoder_weights(), corner_w)
    }

    pub fn with_weights(grid: SparseFeatureGrid, dec: DecoderWeights, corner_w: Tensor) -> Self {
        let (corner_keys, corner_table) = corner_pairs(&grid.keys);
        let corner_feats = pair_conv_apply(&grid.latents, &corner_w, &corner_table);
        let corner_rows = corner_rows_for(&grid.keys, &corner_keys);
        let tau = grid.voxel_size;
        FrozenField { grid, dec, corner_w, corner_keys, corner_table, corner_feats, corner_rows, tau }
    }

    /// Re-derives corner features after a latent update.
    pub fn refresh_corners(&mut self) {
        self.corner_feats = pair_conv_apply(&self.grid.latents, &self.corner_w, &self.corner_table);
    }

    pub fn voxel_size(&self) -> f64 {
        self.grid.voxel_size
    }

    /// Locates the active voxel containing p; returns (voxel row, local
    /// coordinates in [0,1)^3).
    pub fn locate(&self, p: Vec3) -> Option<(usize, [f64; 3])> {
        let b = self.grid.voxel_size;
        let s = [p.x / b, p.y / b, p.z / b];
        let key = [s[0].floor() as i32, s[1].floor() as i32, s[2].floor() as i32];
        let vi = self.grid.keys.get(key)?;
        Some((vi, [s[0] - key[0] as f64, s[1] - key[1] as f64, s[2] - key[2] as f64]))
    }

    fn gather_corners(&self, voxel: usize) -> Tensor {
        let l = self.grid.latent_dim();
        let mut out = Tensor::zeros(&[8, l]);
        for bits in 0..8 {
            let row = self.corner_rows[voxel][bits] as usize;
            out.data_mut()[bits * l..(bits + 1) * l].copy_from_slice(self.corner_feats.row(row));
        }
        out
    }

    /// Trilinearly interpolated corner feature at p.
    pub fn interpolate_feature(&self, p: Vec3) -> Result<Vec<f64>> {
        let (vi, u) = self.locate(p).ok_or(Error::OutsideGrid)?;
        let corners = self.gather_corners(vi);
        let l = self.grid.latent_dim();
        let mut out = vec![0.0; l];
        tape::trilerp_acc(corners.data(), l, u, &mut out);
        Ok(out)
    }

    /// Normalized signed distance in [-1, 1].
    pub fn query_sdf(&self, p: Vec3) -> Result<f64> {
        let (vi, u) = self.locate(p).ok_or(Error::OutsideGrid)?;
        let corners = self.gather_corners(vi);
        let l = self.grid.latent_dim();
        let mut lhat = vec![0.0; l];
        tape::trilerp_acc(corners.data(), l, u, &mut lhat);
        Ok(self.dec.decode(u, &lhat))
    }

    /// Signed distance in meters (normalized value scaled by tau).
    pub fn query_world_sdf(&self, p: Vec3) -> Result<f64> {
        Ok(self.query_sdf(p)? * self.tau)
    }

    /// Analytic world-space gradient of the world SDF at p.
    pub fn query_sdf_gradient(&self, p: Vec3) -> Result<Vec3> {
        Ok(self.query_derivatives(p)?.grad_world)
    }

    /// Full evaluation with the pieces the renderer backward needs.
    pub fn query_derivatives(&self, p: Vec3) -> Result<QueryDerivatives> {
        let (vi, u) = self.locate(p).ok_or(Error::OutsideGrid)?;
        let corners = self.gather_corners(vi);
        let l = self.grid.latent_dim();
        let mut lhat = vec![0.0; l];
        tape::trilerp_acc(corners.data(), l, u, &mut lhat);

        let (s, z3, z1, z2, _input) = self.dec.decode_full(u, &lhat);
        let j = self.dec.input_gradient(z3, &z1, &z2);
        let (jx, jl) = j.split_at(3);

        // d s / d u: windowed direct input + feature interpolation movement
        let mut du = [0.0; 3];
        for a in 0..3 {
            du[a] = jx[a] * cos_window_grad(u[a]);
        }
        for bits in 0..8 {
            let dw = trilinear_weight_grad(bits, u);
            let mut dot = 0.0;
            for (cv, jv) in corners.row(bits).iter().zip(jl) {
                dot += cv * jv;
            }
            for a in 0..3 {
                du[a] += dw[a] * dot;
            }
        }
        let scale = self.tau / self.grid.voxel_size;
        Ok(QueryDerivatives {
            s_norm: s,
            grad_world: Vec3::new(du[0] * scale, du[1] * scale, du[2] * scale),
            voxel: vi,
            dlhat: jl.to_vec(),
            u,
        })
    }

    /// Scatters d(world sdf)/d(latent rows) for a query into `acc` ([M, L]),
    /// scaled by `coeff`. Chains through the trilinear weights and the frozen
    /// corner convolution.
    pub fn accumulate_latent_gradient(&self, q: &QueryDerivatives, coeff: f64, acc: &mut Tensor) {
        let l = self.grid.latent_dim();
        debug_assert_eq!(acc.rows(), self.grid.keys.len());
        debug_assert_eq!(acc.cols(), l);
        for bits in 0..8 {
            let w = trilinear_weight(bits, q.u) * coeff * self.tau;
            if w == 0.0 {
                continue;
            }
            let corner = self.corner_rows[q.voxel][bits] as usize;
            // d corner_feat[corner] = w * dlhat; chain through corner conv
            let lo = self.corner_table.fwd_off[corner] as usize;
            let hi = self.corner_table.fwd_off[corner + 1] as usize;
            for &(vox, tap) in &self.corner_table.fwd[lo..hi] {
                let wblock = &self.corner_w.data()[tap as usize * l * l..(tap as usize + 1) * l * l];
                let dst = &mut acc.data_mut()[vox as usize * l..(vox as usize + 1) * l];
                for ci in 0..l {
                    let mut s = 0.0;
                    let wrow = &wblock[ci * l..(ci + 1) * l];
                    for (jv, wv) in q.dlhat.iter().zip(wrow) {
                        s += jv * wv;
                    }
                    dst[ci] += w * s;
                }
            }
        }
    }
}

/// Records one SDF query as tape ops so unrolled tracing can differentiate
/// through it. `point` must be a [1,3] node; corner features come from
/// `corner_feats_node` rows. Returns the normalized SDF node [1,1].
pub fn query_sdf_on_tape(
    tape: &mut Tape,
    dec: &DecoderIds,
    field: &FrozenField,
    corner_feats_node: NodeId,
    voxel: usize,
    point: NodeId,
) -> Result<NodeId> {
    let b = field.grid.voxel_size;
    let key = field.grid.keys.keys()[voxel];
    let origin = Rc::new(vec![-(key[0] as f64), -(key[1] as f64), -(key[2] as f64)]);
    let scaled = tape.scale(point, 1.0 / b)?;
    let u = tape.add_const_row(scaled, origin)?;
    let rows: Vec<u32> = field.corner_rows[voxel].to_vec();
    let corners = tape.gather_rows(corner_feats_node, Rc::new(rows))?;
    let lhat = tape.trilerp(corners, u)?;
    let win = tape.cos_window(u)?;
    let input = tape.concat_cols(win, lhat)?;
    let z1 = tape.linear(input, dec.w1, dec.b1)?;
    let h1 = tape.leaky_relu(z1, field.dec.slope)?;
    let z2 = tape.linear(h1, dec.w2, dec.b2)?;
    let h2 = tape.leaky_relu(z2, field.dec.slope)?;
    let z3 = tape.linear(h2, dec.w3, dec.b3)?;
    tape.clamp11(z3)
}

/// Decoder weight nodes bound onto a tape.
pub struct DecoderIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl DecoderIds {
    /// Binds decoder weights as constant leaves (frozen).
    pub fn leaves(tape: &mut Tape, dec: &DecoderWeights) -> Self {
        DecoderIds {
            w1: tape.leaf(dec.w1.clone()),
            b1: tape.leaf(dec.b1.clone()),
            w2: tape.leaf(dec.w2.clone()),
            b2: tape.leaf(dec.b2.clone()),
            w3: tape.leaf(dec.w3.clone()),
            b3: tape.leaf(dec.b3.clone()),
        }
    }

    /// Binds decoder weights as trainable parameters.
    pub fn params(tape: &mut Tape, net: &CircNet) -> Self {
        let id = |n: &str| net.params.id(n).unwrap();
        DecoderIds {
            w1: tape.param(&net.params, id("dec.l0.w")),
            b1: tape.param(&net.params, id("dec.l0.b")),
            w2: tape.param(&net.params, id("dec.l1.w")),
            b2: tape.param(&net.params, id("dec.l1.b")),
            w3: tape.param(&net.params, id("dec.l2.w")),
            b3: tape.param(&net.params, id("dec.l2.b")),
        }
    }
}

/// Batched decode + spatial gradient on the tape for training: `queries` are
/// (voxel index, local coords); corner features must already be on the tape.
/// Returns (s [n,1], grad_world [n,3]).
pub fn decode_batch_on_tape(
    tape: &mut Tape,
    dec: &DecoderIds,
    slope: f64,
    tau_over_b: f64,
    corner_feats_node: NodeId,
    corner_rows: &[[u32; 8]],
    queries: &[(usize, [f64; 3])],
) -> Result<(NodeId, NodeId)> {
    let n = queries.len();
    let mut upos = Vec::with_capacity(n * 3);
    let mut idx = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut dwx = Vec::with_capacity(n);
    let mut dwy = Vec::with_capacity(n);
    let mut dwz = Vec::with_capacity(n);
    for &(vi, u) in queries {
        upos.extend_from_slice(&u);
        idx.push(corner_rows[vi]);
        let mut wr = [0.0; 8];
        let mut dx = [0.0; 8];
        let mut dy = [0.0; 8];
        let mut dz = [0.0; 8];
        for bits in 0..8 {
            wr[bits] = trilinear_weight(bits, u);
            let g = trilinear_weight_grad(bits, u);
            dx[bits] = g[0];
            dy[bits] = g[1];
            dz[bits] = g[2];
        }
        w.push(wr);
        dwx.push(dx);
        dwy.push(dy);
        dwz.push(dz);
    }
    let idx = Rc::new(idx);
    let u_node = tape.leaf(Tensor::new(vec![n, 3], upos)?);

    let lhat = tape.weighted_gather(corner_feats_node, idx.clone(), Rc::new(w))?;
    let win = tape.cos_window(u_node)?;
    let input = tape.concat_cols(win, lhat)?;
    let z1 = tape.linear(input, dec.w1, dec.b1)?;
    let h1 = tape.leaky_relu(z1, slope)?;
    let z2 = tape.linear(h1, dec.w2, dec.b2)?;
    let h2 = tape.leaky_relu(z2, slope)?;
    let z3 = tape.linear(h2, dec.w3, dec.b3)?;
    let s = tape.clamp11(z3)?;

    // spatial gradient as a differentiable expression
    let g3 = tape.clamp11_grad_of(z3)?;
    let w3t = tape.transpose(dec.w3)?;
    let t2 = tape.matmul(g3, w3t)?;
    let a2 = tape.leaky_relu_grad_of(z2, slope)?;
    let d2 = tape.mul(t2, a2)?;
    let w2t = tape.transpose(dec.w2)?;
    let t1 = tape.matmul(d2, w2t)?;
    let a1 = tape.leaky_relu_grad_of(z1, slope)?;
    let d1 = tape.mul(t1, a1)?;
    let w1t = tape.transpose(dec.w1)?;
    let j = tape.matmul(d1, w1t)?;
    let l_dim = tape.value(corner_feats_node).cols();
    let jx = tape.slice_cols(j, 0, 3)?;
    let jl = tape.slice_cols(j, 3, 3 + l_dim)?;

    let wing = tape.cos_window_grad_of(u_node)?;
    let direct = tape.mul(jx, wing)?;

    let gx = tape.weighted_gather(corner_feats_node, idx.clone(), Rc::new(dwx))?;
    let gy = tape.weighted_gather(corner_feats_node, idx.clone(), Rc::new(dwy))?;
    let gz = tape.weighted_gather(corner_feats_node, idx, Rc::new(dwz))?;
    let dotx = tape.row_dot(jl, gx)?;
    let doty = tape.row_dot(jl, gy)?;
    let dotz = tape.row_dot(jl, gz)?;
    let dxy = tape.concat_cols(dotx, doty)?;
    let dxyz = tape.concat_cols(dxy, dotz)?;
    let total = tape.add(direct, dxyz)?;
    let grad = tape.scale(total, tau_over_b)?;
    Ok((s, grad))
}

/// Row index of each voxel's 8 corners (bit order) within a corner key set.
pub fn corner_rows_for(voxels: &KeyIndex, corners: &KeyIndex) -> Vec<[u32; 8]> {
    voxels
        .keys()
        .iter()
        .map(|&k| {
            let mut rows = [0u32; 8];
            for bits in 0..8 {
                let c = [
                    k[0] + ((bits >> 2) & 1) as i32,
                    k[1] + ((bits >> 1) & 1) as i32,
                    k[2] + (bits & 1) as i32,
                ];
                rows[bits] = corners.get(c).unwrap() as u32;
            }
            rows
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::ingest::OrientedPointCloud;
    use rand::Rng;

    fn tiny_net(seed: u64) -> CircNet {
        CircNet::new(ModelConfig { seed, ..ModelConfig::default() })
    }

    fn bins_from_points(points: &[(Vec3, Vec3)], b: f64) -> VoxelBinning {
        let cloud = OrientedPointCloud {
            points: points.iter().map(|p| p.0).collect(),
            normals: points.iter().map(|p| p.1).collect(),
        };
        crate::ingest::bin_points(&cloud, b).unwrap()
    }

    #[test]
    fn encoder_pooling_invariances() {
        let net = tiny_net(1);
        let n = Vec3::new(0.0, 0.0, 1.0);
        let a = (Vec3::new(0.012, 0.02, 0.03), n);
        let c = (Vec3::new(0.04, 0.01, 0.015), n);

        let run = |pts: &[(Vec3, Vec3)]| -> Vec<f64> {
            let bins = bins_from_points(pts, 0.05);
            let mut tape = Tape::new();
            let (_, feats) = net.encode_points(&mut tape, &bins).unwrap();
            tape.value(feats).data().to_vec()
        };

        let single = run(&[a]);
        assert_eq!(single.len(), 32);

        let ab = run(&[a, c]);
        let ba = run(&[c, a]);
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-12, "permutation changed pooled features");
        }

        let dup = run(&[a, c, a, c]);
        for (x, y) in ab.iter().zip(&dup) {
            assert!((x - y).abs() < 1e-9, "duplication changed the mean");
        }
    }

    #[test]
    fn sparse_conv_matches_dense_oracle() {
        // random active sets inside a 6^3 region vs a dense masked convolution
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..20 {
            let c_in = 3;
            let c_out = 2;
            let n_keys = rng.gen_range(1..20);
            let keys: Vec<VoxelKey> = (0..n_keys)
                .map(|_| [rng.gen_range(0..6), rng.gen_range(0..6), rng.gen_range(0..6)])
                .collect();
            let index = KeyIndex::from_keys(keys);
            let n = index.len();
            let feats = Tensor::new(
                vec![n, c_in],
                (0..n * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w = Tensor::new(
                vec![27 * c_in, c_out],
                (0..27 * c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();

            let mut tape = Tape::new();
            let x = tape.leaf(feats.clone());
            let wn = tape.leaf(w.clone());
            let table = conv3_pairs(&index);
            let y = tape.pair_conv(x, wn, table).unwrap();
            let got = tape.value(y);

            // dense oracle over the bounding grid with masking
            for (site, &k) in index.keys().iter().enumerate() {
                for co in 0..c_out {
                    let mut want = 0.0;
                    for dx in -1..=1i32 {
                        for dy in -1..=1i32 {
                            for dz in -1..=1i32 {
                                if let Some(nb) = index.get([k[0] + dx, k[1] + dy, k[2] + dz]) {
                                    let tap = ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize;
                                    for ci in 0..c_in {
                                        want += feats.at(nb, ci) * w.at(tap * c_in + ci, co);
                                    }
                                }
                            }
                        }
                    }
                    assert!(
                        (got.at(site, co) - want).abs() < 1e-10,
                        "trial {trial} site {site} channel {co}"
                    );
                }
            }
        }
    }

    #[test]
    fn sparse_conv_single_voxel_uses_center_tap_only() {
        let index = KeyIndex::from_keys(vec![[2, 2, 2]]);
        let c = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Tensor::new(vec![1, c], (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut w = Tensor::zeros(&[27 * c, c]);
        for i in 0..27 * c {
            for j in 0..c {
                w.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(feats.clone());
        let wn = tape.leaf(w.clone());
        let y = tape.pair_conv(x, wn, conv3_pairs(&index)).unwrap();
        let center_tap = 13; // (0,0,0) offset
        for j in 0..c {
            let mut want = 0.0;
            for ci in 0..c {
                want += feats.at(0, ci) * w.at(center_tap * c + ci, j);
            }
            assert!((tape.value(y).at(0, j) - want).abs() < 1e-12);
        }

        // identity center tap passes features through
        let mut wid = Tensor::zeros(&[27 * c, c]);
        for ci in 0..c {
            wid.set(center_tap * c + ci, ci, 1.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(feats.clone());
        let wn = tape.leaf(wid);
        let y = tape.pair_conv(x, wn, conv3_pairs(&index)).unwrap();
        assert_eq!(tape.value(y).data(), feats.data());
    }

    #[test]
    fn down_up_shapes_and_single_parent_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let keys: Vec<VoxelKey> = (0..8).map(|b| key_child([1, 1, 1], b)).collect();
        let index = KeyIndex::from_keys(keys);
        let c = 3;
        let feats =
            Tensor::new(vec![8, c], (0..8 * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w =
            Tensor::new(vec![8 * c, c], (0..8 * c * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();

        let (parents, dtable) = down_pairs(&index);
        assert_eq!(parents.len(), 1);
        let mut tape = Tape::new();
        let x = tape.leaf(feats.clone());
        let wn = tape.leaf(w.clone());
        let down = tape.pair_conv(x, wn, dtable).unwrap();
        // hand-computed: sum over children of w[childbits] applied to child row
        for j in 0..c {
            let mut want = 0.0;
            for (row, &k) in index.keys().iter().enumerate() {
                let tap = crate::tape::key_child_bits(k);
                for ci in 0..c {
                    want += feats.at(row, ci) * w.at(tap * c + ci, j);
                }
            }
            assert!((tape.value(down).at(0, j) - want).abs() < 1e-10);
        }

        // up onto a restricted child set keeps exactly the listed keys
        let targets = KeyIndex::from_keys(vec![[2, 2, 2], [3, 2, 3]]);
        let utable = up_pairs(&parents, &targets);
        let pf = Tensor::new(vec![1, c], vec![0.3, -0.2, 0.9]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(pf.clone());
        let wn = tape.leaf(w.clone());
        let up = tape.pair_conv(x, wn, utable).unwrap();
        assert_eq!(tape.value(up).rows(), targets.len());
        for (row, &k) in targets.keys().iter().enumerate() {
            let tap = crate::tape::key_child_bits(k);
            for j in 0..c {
                let mut want = 0.0;
                for ci in 0..c {
                    want += pf.at(0, ci) * w.at(tap * c + ci, j);
                }
                assert!((tape.value(up).at(row, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_propagation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = 4;
        let w = Tensor::new(
            vec![8 * l, l],
            (0..8 * l * l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        // single voxel: every corner sees exactly one tap
        let index = KeyIndex::from_keys(vec![[0, 0, 0]]);
        let lat = Tensor::new(vec![1, l], (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (corners, table) = corner_pairs(&index);
        let feats = pair_conv_apply(&lat, &w, &table);
        for (ci, &ck) in corners.keys().iter().enumerate() {
            let tap = (ck[0] as usize) * 4 + (ck[1] as usize) * 2 + ck[2] as usize;
            for j in 0..l {
                let mut want = 0.0;
                for i in 0..l {
                    want += lat.at(0, i) * w.at(tap * l + i, j);
                }
                assert!((feats.at(ci, j) - want).abs() < 1e-12);
            }
        }

        // full 2x2x2 block with identical latents: shared corner = sum of all taps
        let block: Vec<VoxelKey> = (0..8).map(|b| key_child([0, 0, 0], b)).collect();
        let index = KeyIndex::from_keys(block);
        let lrow: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut lat = Tensor::zeros(&[8, l]);
        for r in 0..8 {
            for j in 0..l {
                lat.set(r, j, lrow[j]);
            }
        }
        let (corners, table) = corner_pairs(&index);
        let feats = pair_conv_apply(&lat, &w, &table);
        let shared = corners.get([1, 1, 1]).unwrap();
        for j in 0..l {
            let mut want = 0.0;
            for tap in 0..8 {
                for i in 0..l {
                    want += lrow[i] * w.at(tap * l + i, j);
                }
            }
            assert!((feats.at(shared, j) - want).abs() < 1e-10);
        }

        // random 3-voxel cluster vs dense masked 2x2x2 oracle
        let cluster = KeyIndex::from_keys(vec![[0, 0, 0], [1, 0, 0], [0, 1, 0]]);
        let lat = Tensor::new(vec![3, l], (0..3 * l).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (corners, table) = corner_pairs(&cluster);
        let feats = pair_conv_apply(&lat, &w, &table);
        for (ci, &ck) in corners.keys().iter().enumerate() {
            for j in 0..l {
                let mut want = 0.0;
                for bits in 0..8i32 {
                    let v = [
                        ck[0] - ((bits >> 2) & 1),
                        ck[1] - ((bits >> 1) & 1),
                        ck[2] - (bits & 1),
                    ];
                    if let Some(row) = cluster.get(v) {
                        for i in 0..l {
                            want += lat.at(row, i) * w.at(bits as usize * l + i, j);
                        }
                    }
                }
                assert!((feats.at(ci, j) - want).abs() < 1e-10);
            }
        }
    }

    fn field_from_random_grid(seed: u64, keys: Vec<VoxelKey>) -> FrozenField {
        let net = tiny_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let index = KeyIndex::from_keys(keys);
        let m = index.len();
        let latents = Tensor::new(
            vec![m, 32],
            (0..m * 32).map(|_| rng.gen_range(-0.8..0.8)).collect(),
        )
        .unwrap();
        let grid = SparseFeatureGrid { voxel_size: 0.05, keys: index, latents };
        FrozenField::new(grid, &net)
    }

    #[test]
    fn interpolation_weights_partition_of_unity() {
        let field = field_from_random_grid(2, vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let mut total = 0.0;
            for bits in 0..8 {
                total += trilinear_weight(bits, u);
                assert!(trilinear_weight(bits, u) >= 0.0);
            }
            assert!((total - 1.0).abs() < 1e-12);
        }

        // at a corner the feature is the corner feature exactly
        let p = Vec3::new(0.05, 0.0, 0.0) * 0.999999; // stay inside voxel [0,0,0]
        let _ = p;
        let corner_feat = field.corner_feats.row(field.corner_rows[0][0] as usize).to_vec();
        let lhat = field.interpolate_feature(Vec3::new(1e-12, 1e-12, 1e-12)).unwrap();
        for (a, b) in lhat.iter().zip(&corner_feat) {
            assert!((a - b).abs() < 1e-8);
        }

        // at the voxel center the feature is the mean of the 8 corners
        let lhat = field.interpolate_feature(Vec3::new(0.025, 0.025, 0.025)).unwrap();
        let l = 32;
        for j in 0..l {
            let mut mean = 0.0;
            for bits in 0..8 {
                mean += field.corner_feats.at(field.corner_rows[0][bits] as usize, j) / 8.0;
            }
            assert!((lhat[j] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn decode_zero_weights_is_zero_and_output_clamped() {
        let dec = DecoderWeights {
            w1: Tensor::zeros(&[35, 64]),
            b1: Tensor::zeros(&[64]),
            w2: Tensor::zeros(&[64, 64]),
            b2: Tensor::zeros(&[64]),
            w3: Tensor::zeros(&[64, 1]),
            b3: Tensor::zeros(&[1]),
            slope: 0.01,
        };
        let lhat = vec![0.3; 32];
        assert_eq!(dec.decode([0.2, 0.5, 0.9], &lhat), 0.0);

        let field = field_from_random_grid(9, vec![[0, 0, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = Vec3::new(
                rng.gen_range(0.0..0.05),
                rng.gen_range(0.0..0.05),
                rng.gen_range(0.0..0.05),
            );
            let s = field.query_sdf(p).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
        assert!(matches!(field.query_sdf(Vec3::new(0.3, 0.0, 0.0)), Err(Error::OutsideGrid)));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let field = field_from_random_grid(11, vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fd_at = |p: Vec3, h: f64| {
            Vec3::new(
                (field.query_world_sdf(p + Vec3::new(h, 0.0, 0.0)).unwrap()
                    - field.query_world_sdf(p - Vec3::new(h, 0.0, 0.0)).unwrap())
                    / (2.0 * h),
                (field.query_world_sdf(p + Vec3::new(0.0, h, 0.0)).unwrap()
                    - field.query_world_sdf(p - Vec3::new(0.0, h, 0.0)).unwrap())
                    / (2.0 * h),
                (field.query_world_sdf(p + Vec3::new(0.0, 0.0, h)).unwrap()
                    - field.query_world_sdf(p - Vec3::new(0.0, 0.0, h)).unwrap())
                    / (2.0 * h),
            )
        };
        let mut checked = 0;
        while checked < 60 {
            let p = Vec3::new(
                rng.gen_range(0.005..0.045),
                rng.gen_range(0.005..0.045),
                rng.gen_range(0.005..0.045),
            );
            let fd = fd_at(p, 1e-6);
            // a leaky-relu kink inside the stencil makes the two step sizes
            // disagree; such points are not valid FD probes
            if (fd - fd_at(p, 5e-7)).norm() > 5e-6 {
                continue;
            }
            checked += 1;
            let g = field.query_sdf_gradient(p).unwrap();
            assert!((g - fd).norm() < 1e-5, "grad {g} vs fd {fd}");
        }
    }

    #[test]
    fn field_is_continuous_across_shared_faces() {
        let field = field_from_random_grid(13, vec![[0, 0, 0], [1, 0, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let y = rng.gen_range(0.002..0.048);
            let z = rng.gen_range(0.002..0.048);
            // world-unit values: a discontinuity would show up at the scale of
            // tau, far above the smooth change across the 2e-6 m gap
            let left = field.query_world_sdf(Vec3::new(0.05 - 1e-6, y, z)).unwrap();
            let right = field.query_world_sdf(Vec3::new(0.05 + 1e-6, y, z)).unwrap();
            assert!((left - right).abs() < 1e-5, "face jump {}", (left - right).abs());
        }
    }

    fn toy_teacher(levels: usize) -> SparsityPyramid {
        SparsityPyramid::from_finest(
            vec![[0, 0, 0], [1, 0, 0], [2, 1, 0], [0, 3, 2], [5, 5, 5]],
            levels,
        )
    }

    fn toy_bins() -> VoxelBinning {
        let pts: Vec<(Vec3, Vec3)> = vec![
            (Vec3::new(0.01, 0.01, 0.01), Vec3::new(0.0, 0.0, 1.0)),
            (Vec3::new(0.06, 0.02, 0.01), Vec3::new(0.0, 1.0, 0.0)),
            (Vec3::new(0.11, 0.06, 0.02), Vec3::new(1.0, 0.0, 0.0)),
        ];
        bins_from_points(&pts, 0.05)
    }

    #[test]
    fn teacher_forcing_reproduces_teacher_finest_set() {
        let net = tiny_net(21);
        let teacher = toy_teacher(net.cfg.unet_levels);
        let mut tape = Tape::new();
        let (keys, feats) = net.encode_points(&mut tape, &toy_bins()).unwrap();
        let run = net.unet_forward(&mut tape, keys, feats, Some(&teacher)).unwrap();
        let mut want = teacher.levels[0].keys.clone();
        want.sort_unstable();
        assert_eq!(run.keys.keys(), want.as_slice());
        assert!(run.pyramid.is_parent_closed());
        assert_eq!(run.struct_terms.len(), net.cfg.unet_levels - 1);
    }

    #[test]
    fn pruned_pyramid_is_parent_closed_and_heads_can_prune_everything() {
        let net = tiny_net(23);
        let mut tape = Tape::new();
        let (keys, feats) = net.encode_points(&mut tape, &toy_bins()).unwrap();
        let run = net.unet_forward(&mut tape, keys.clone(), feats, None);
        if let Ok(run) = run {
            assert!(run.pyramid.is_parent_closed());
        }

        // forcing the head bias very negative prunes everything
        let mut net = tiny_net(23);
        for lev in 0..net.cfg.unet_levels - 1 {
            let b2 = net.params.id(&format!("unet.head{lev}.b2")).unwrap();
            net.params.value_mut(b2).fill(-100.0);
        }
        let mut tape = Tape::new();
        let (keys, feats) = net.encode_points(&mut tape, &toy_bins()).unwrap();
        assert!(matches!(
            net.unet_forward(&mut tape, keys, feats, None),
            Err(Error::AllPruned)
        ));
    }

    #[test]
    fn unet_is_equivariant_to_octree_aligned_shifts() {
        // shifts by multiples of 2^(levels-1) relabel every pyramid level
        let net = tiny_net(29);
        let shift = 16i32;

        let run_keys = |bins: &VoxelBinning| -> (Vec<VoxelKey>, Vec<f64>) {
            let mut tape = Tape::new();
            let (keys, feats) = net.encode_points(&mut tape, bins).unwrap();
            match net.unet_forward(&mut tape, keys, feats, None) {
                Ok(run) => (
                    run.keys.keys().to_vec(),
                    tape.value(run.latents).data().to_vec(),
                ),
                Err(_) => (Vec::new(), Vec::new()),
            }
        };

        let pts: Vec<(Vec3, Vec3)> = vec![
            (Vec3::new(0.012, 0.018, 0.022), Vec3::new(0.0, 0.0, 1.0)),
            (Vec3::new(0.062, 0.021, 0.013), Vec3::new(0.0, 1.0, 0.0)),
            (Vec3::new(0.113, 0.064, 0.027), Vec3::new(1.0, 0.0, 0.0)),
            (Vec3::new(0.031, 0.092, 0.071), Vec3::new(0.5, 0.5, 0.0)),
        ];
        let bins = bins_from_points(&pts, 0.05);
        let shifted: Vec<(Vec3, Vec3)> = pts
            .iter()
            .map(|&(p, n)| (p + Vec3::new(shift as f64 * 0.05, 0.0, 0.0), n))
            .collect();
        let bins_shifted = bins_from_points(&shifted, 0.05);

        let (keys_a, lat_a) = run_keys(&bins);
        let (keys_b, lat_b) = run_keys(&bins_shifted);
        let moved: Vec<VoxelKey> = keys_a.iter().map(|&k| [k[0] + shift, k[1], k[2]]).collect();
        assert_eq!(moved, keys_b);
        for (a, b) in lat_a.iter().zip(&lat_b) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let keys = vec![[-3, 0, 2], [0, 0, 0], [5, -1, 7]];
        let latents =
            Tensor::new(vec![3, 8], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let grid = SparseFeatureGrid {
            voxel_size: 0.05,
            keys: KeyIndex::from_keys(keys),
            latents,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.grid");
        grid.save(&path).unwrap();
        let back = SparseFeatureGrid::load(&path).unwrap();
        assert_eq!(back.voxel_size, grid.voxel_size);
        assert_eq!(back.keys.keys(), grid.keys.keys());
        assert_eq!(back.latents, grid.latents);
    }

    #[test]
    fn batched_tape_decode_matches_plain_queries() {
        let field = field_from_random_grid(31, vec![[0, 0, 0], [1, 0, 0], [0, 0, 1]]);
        let net = tiny_net(31);
        let mut tape = Tape::new();
        let dec = DecoderIds::leaves(&mut tape, &field.dec);
        let corner_node = tape.leaf(field.corner_feats.clone());
        let queries = vec![
            (0usize, [0.3, 0.4, 0.5]),
            (1usize, [0.9, 0.2, 0.7]),
            (2usize, [0.05, 0.95, 0.5]),
        ];
        let (s, g) = decode_batch_on_tape(
            &mut tape,
            &dec,
            net.cfg.leaky_slope,
            1.0,
            corner_node,
            &field.corner_rows,
            &queries,
        )
        .unwrap();
        let b = field.grid.voxel_size;
        for (row, &(vi, u)) in queries.iter().enumerate() {
            let key = field.grid.keys.keys()[vi];
            let p = Vec3::new(
                (key[0] as f64 + u[0]) * b,
                (key[1] as f64 + u[1]) * b,
                (key[2] as f64 + u[2]) * b,
            );
            let want_s = field.query_sdf(p).unwrap();
            assert!((tape.value(s).at(row, 0) - want_s).abs() < 1e-9);
            let want_g = field.query_sdf_gradient(p).unwrap();
            let got = Vec3::new(tape.value(g).at(row, 0), tape.value(g).at(row, 1), tape.value(g).at(row, 2));
            assert!((got - want_g).norm() < 1e-9, "{got} vs {want_g}");
        }
    }
}
