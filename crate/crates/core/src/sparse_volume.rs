//! Sparse voxel field near observed surfaces. Each allocated voxel owns 8
//! corner vertices (shared with neighbors); a vertex carries an 8-dim
//! trainable embedding (stored in a [`ParamStore`] group) plus a fusion
//! weight. New depth frames are encoded into a local voxel set and merged
//! into the global field by weighted running mean.

use std::io::Read;
use std::path::Path;

use crate::diffcore::{GroupId, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::frame_io::{backproject, project, Frame, Intrinsics};
use crate::geom::V3;
use crate::hash::FastMap;
use crate::pose::Pose;
use crate::real::Real;

/// Integer lattice coordinates; identifies a voxel by its lower corner or a
/// vertex by its own lattice position.
pub type VoxelKey = [i32; 3];

pub const EMBED_DIM: usize = 8;

/// floor(p / voxel_size) componentwise.
#[inline]
pub fn voxel_key<T: Real>(p: V3<T>, voxel_size: T) -> VoxelKey {
    [
        (p[0] / voxel_size).floor().to_f64() as i32,
        (p[1] / voxel_size).floor().to_f64() as i32,
        (p[2] / voxel_size).floor().to_f64() as i32,
    ]
}

#[inline]
fn corner_key(base: VoxelKey, c: usize) -> VoxelKey {
    [
        base[0] + (c & 1) as i32,
        base[1] + ((c >> 1) & 1) as i32,
        base[2] + ((c >> 2) & 1) as i32,
    ]
}

/// Per-frame encoding result: voxels the frame's points occupy, and prior
/// (embedding, weight) per corner vertex that survived projection checks.
/// Both lists are sorted by key, so downstream iteration is deterministic.
#[derive(Debug, Clone)]
pub struct LocalVoxelSet<T> {
    pub voxel_size: T,
    pub voxels: Vec<VoxelKey>,
    pub vertices: Vec<(VoxelKey, [T; EMBED_DIM], T)>,
}

/// Optional learned prior encoder: 3 -> 64 -> 64 -> (8+1) MLP with ReLU
/// hidden activations; the 9th output passes through softplus to give a
/// non-negative fusion weight. Input is (clamped_projective_tsdf / tr,
/// observed_pixel_depth, vertex_camera_depth).
#[derive(Debug, Clone)]
pub struct EncoderNet<T> {
    w1: Vec<T>, // 64 x 3
    b1: Vec<T>,
    w2: Vec<T>, // 64 x 64
    b2: Vec<T>,
    w3: Vec<T>, // 9 x 64
    b3: Vec<T>,
}

pub const ENCODER_MAGIC: &[u8; 6] = b"SPENC1";

impl<T: Real> EncoderNet<T> {
    /// Flat binary: magic, then per layer row-major f32 weights then biases.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut magic = [0u8; 6];
        f.read_exact(&mut magic)?;
        if &magic != ENCODER_MAGIC {
            return Err(Error::Config(format!(
                "{}: bad encoder magic {magic:?}",
                path.display()
            )));
        }
        let mut rest = Vec::new();
        f.read_to_end(&mut rest)?;
        let expect = (64 * 3 + 64 + 64 * 64 + 64 + 9 * 64 + 9) * 4;
        if rest.len() != expect {
            return Err(Error::Config(format!(
                "{}: encoder payload {} bytes, want {expect}",
                path.display(),
                rest.len()
            )));
        }
        let floats: Vec<T> = rest
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let mut off = 0;
        let mut take = |n: usize| {
            let s = floats[off..off + n].to_vec();
            off += n;
            s
        };
        Ok(Self {
            w1: take(64 * 3),
            b1: take(64),
            w2: take(64 * 64),
            b2: take(64),
            w3: take(9 * 64),
            b3: take(9),
        })
    }

    fn forward(&self, x: [T; 3]) -> ([T; EMBED_DIM], T) {
        let mut h1 = [T::zero(); 64];
        for (i, h) in h1.iter_mut().enumerate() {
            let mut a = self.b1[i];
            for (k, xv) in x.iter().enumerate() {
                a = a + self.w1[i * 3 + k] * *xv;
            }
            *h = a.max(T::zero());
        }
        let mut h2 = [T::zero(); 64];
        for (i, h) in h2.iter_mut().enumerate() {
            let mut a = self.b2[i];
            for k in 0..64 {
                a = a + self.w2[i * 64 + k] * h1[k];
            }
            *h = a.max(T::zero());
        }
        let mut out = [T::zero(); 9];
        for (i, o) in out.iter_mut().enumerate() {
            let mut a = self.b3[i];
            for k in 0..64 {
                a = a + self.w3[i * 64 + k] * h2[k];
            }
            *o = a;
        }
        let mut emb = [T::zero(); EMBED_DIM];
        emb.copy_from_slice(&out[..EMBED_DIM]);
        // softplus keeps the fusion weight positive
        let w = (T::one() + out[8].exp()).ln();
        (emb, w)
    }
}

/// How corner-vertex priors are produced.
#[derive(Debug, Clone, Default)]
pub enum PriorMode<T> {
    /// Analytic projective TSDF: channel 0 = clamp(d_pix - z_v, ±tr)/tr,
    /// channels 1-7 = 0, weight = nearby back-projected point count.
    #[default]
    Analytic,
    /// All-zero embeddings with the analytic point-count weights (ablation).
    None,
    Learned(EncoderNet<T>),
}

struct VoxelEntry {
    key: VoxelKey,
    corners: [u32; 8],
}

pub struct SparseVolume<T> {
    pub voxel_size: T,
    /// Embeddings group in the shared store: slot s occupies [s*8, s*8+8).
    pub emb_group: GroupId,
    weights: Vec<T>,
    vertex_slots: FastMap<VoxelKey, u32>,
    vertex_keys: Vec<VoxelKey>,
    voxel_index: FastMap<VoxelKey, u32>,
    voxels: Vec<VoxelEntry>,
}

impl<T: Real> SparseVolume<T> {
    pub fn new(store: &mut ParamStore<T>, voxel_size: T, lr: T) -> Self {
        assert!(voxel_size > T::zero());
        let emb_group = store.add_group("voxel_embeddings", Vec::new(), lr, true);
        Self {
            voxel_size,
            emb_group,
            weights: Vec::new(),
            vertex_slots: FastMap::default(),
            vertex_keys: Vec::new(),
            voxel_index: FastMap::default(),
            voxels: Vec::new(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_keys.len()
    }

    pub fn vertex_weight(&self, slot: u32) -> T {
        self.weights[slot as usize]
    }

    pub fn vertex_slot(&self, key: VoxelKey) -> Option<u32> {
        self.vertex_slots.get(&key).copied()
    }

    pub fn vertex_keys(&self) -> &[VoxelKey] {
        &self.vertex_keys
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Allocated voxel keys in allocation order.
    pub fn voxel_keys(&self) -> impl Iterator<Item = VoxelKey> + '_ {
        self.voxels.iter().map(|v| v.key)
    }

    pub fn contains_key(&self, key: VoxelKey) -> bool {
        self.voxel_index.contains_key(&key)
    }

    pub fn contains(&self, p: V3<T>) -> bool {
        self.contains_key(voxel_key(p, self.voxel_size))
    }

    fn vertex_slot_or_insert(
        &mut self,
        store: &mut ParamStore<T>,
        key: VoxelKey,
        emb: &[T; EMBED_DIM],
        weight: T,
    ) -> u32 {
        if let Some(&s) = self.vertex_slots.get(&key) {
            return s;
        }
        let s = self.vertex_keys.len() as u32;
        self.vertex_keys.push(key);
        self.vertex_slots.insert(key, s);
        self.weights.push(weight);
        store.grow(self.emb_group, emb);
        s
    }

    fn allocate_voxel(&mut self, store: &mut ParamStore<T>, key: VoxelKey) {
        if self.voxel_index.contains_key(&key) {
            return;
        }
        let zero = [T::zero(); EMBED_DIM];
        let mut corners = [0u32; 8];
        for (c, slot) in corners.iter_mut().enumerate() {
            // missing corners come in as zero-weight placeholders so the
            // "all 8 corners exist" invariant holds
            *slot = self.vertex_slot_or_insert(store, corner_key(key, c), &zero, T::zero());
        }
        let vi = self.voxels.len() as u32;
        self.voxels.push(VoxelEntry { key, corners });
        self.voxel_index.insert(key, vi);
    }

    /// Merge a frame's local voxel set: weighted running mean per shared
    /// vertex, plain insert for new vertices, voxel allocation for new keys.
    pub fn fuse(&mut self, store: &mut ParamStore<T>, local: &LocalVoxelSet<T>) {
        assert!(
            (local.voxel_size - self.voxel_size).abs() <= T::epsilon(),
            "voxel size mismatch"
        );
        for (key, emb, w_m) in &local.vertices {
            if let Some(&slot) = self.vertex_slots.get(key) {
                let w_g = self.weights[slot as usize];
                let denom = w_g + *w_m;
                if denom <= T::zero() {
                    // degenerate zero-mass vertex; cannot happen with the
                    // analytic weight rule, rejected if it ever does
                    continue;
                }
                let base = slot as usize * EMBED_DIM;
                let vals = store.values_mut(self.emb_group);
                for (d, e_m) in emb.iter().enumerate() {
                    let v_g = vals[base + d];
                    vals[base + d] = (v_g * w_g + *e_m * *w_m) / denom;
                }
                self.weights[slot as usize] = denom;
            } else {
                self.vertex_slot_or_insert(store, *key, emb, *w_m);
            }
        }
        for key in &local.voxels {
            self.allocate_voxel(store, *key);
        }
    }

    /// Voxel lookup giving the 8 corner slots (order: x fastest, then y, z)
    /// and the in-voxel fraction of `p`, or None outside the volume.
    #[inline]
    pub fn lookup(&self, p: V3<T>) -> Option<([u32; 8], V3<T>)> {
        let key = voxel_key(p, self.voxel_size);
        let &vi = self.voxel_index.get(&key)?;
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            frac[a] = p[a] / self.voxel_size - T::from_f64(key[a] as f64);
        }
        Some((self.voxels[vi as usize].corners, frac))
    }

    /// Trilinear blend of the 8 corner embeddings at `p`; None outside.
    pub fn trilerp(&self, store: &ParamStore<T>, p: V3<T>) -> Option<[T; EMBED_DIM]> {
        let (slots, f) = self.lookup(p)?;
        let vals = store.values(self.emb_group);
        let one = T::one();
        let mut out = [T::zero(); EMBED_DIM];
        for (c, &slot) in slots.iter().enumerate() {
            let wx = if c & 1 != 0 { f[0] } else { one - f[0] };
            let wy = if c & 2 != 0 { f[1] } else { one - f[1] };
            let wz = if c & 4 != 0 { f[2] } else { one - f[2] };
            let w = wx * wy * wz;
            let base = slot as usize * EMBED_DIM;
            for d in 0..EMBED_DIM {
                out[d] = out[d] + w * vals[base + d];
            }
        }
        Some(out)
    }

    /// Differentiable trilerp over a batch of points. `p_node` is [3 x n]
    /// with values `p_vals`; returns the [8 x n] embedding node and the
    /// per-sample in-volume mask. Masked columns gather from slot 0 with the
    /// weights of sample fraction 0 and must be zeroed by the caller (their
    /// gradient contribution vanishes with the mask).
    pub fn trilerp_graph(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p_node: NodeId,
        p_vals: &[V3<T>],
    ) -> (NodeId, Vec<bool>) {
        let n = p_vals.len();
        assert_eq!(tape.len(p_node), 3 * n);
        let inv_h = T::one() / self.voxel_size;
        let mut mask = vec![false; n];
        let mut floors = vec![T::zero(); 3 * n];
        let mut gates = vec![T::zero(); 3 * n];
        let mut idx = vec![0u32; 8 * n];
        for (j, p) in p_vals.iter().enumerate() {
            match self.lookup(*p) {
                Some((slots, _)) => {
                    mask[j] = true;
                    let key = voxel_key(*p, self.voxel_size);
                    for a in 0..3 {
                        floors[j * 3 + a] = T::from_f64(key[a] as f64);
                        gates[j * 3 + a] = T::one();
                    }
                    for (c, &s) in slots.iter().enumerate() {
                        idx[j * 8 + c] = s * EMBED_DIM as u32;
                    }
                }
                None => {
                    // dummy gather at slot 0, frac pinned to 0 with no
                    // gradient into p
                }
            }
        }
        // frac = gate * (p / h) - floor; gate 0 pins masked samples at 0
        let scaled = tape.scale(p_node, inv_h);
        let gate = tape.constant(gates);
        let gated = tape.mul(scaled, gate);
        let fl = tape.constant(floors);
        let frac = tape.sub(gated, fl);
        let w = tape.trilerp_weights(frac);
        let emb = tape.gather_weighted(store, self.emb_group, idx, w, EMBED_DIM, 8);
        (emb, mask)
    }

    /// Rebuild from checkpoint parts; embeddings must already be in `store`.
    pub fn restore(
        store: &ParamStore<T>,
        emb_group: GroupId,
        voxel_size: T,
        vertex_keys: Vec<VoxelKey>,
        weights: Vec<T>,
        voxel_keys: Vec<VoxelKey>,
    ) -> Result<Self> {
        if store.len(emb_group) != vertex_keys.len() * EMBED_DIM
            || weights.len() != vertex_keys.len()
        {
            return Err(Error::Checkpoint(
                "volume sizes disagree with embedding group".into(),
            ));
        }
        let mut vertex_slots = FastMap::default();
        for (i, k) in vertex_keys.iter().enumerate() {
            vertex_slots.insert(*k, i as u32);
        }
        let mut voxels = Vec::with_capacity(voxel_keys.len());
        let mut voxel_index = FastMap::default();
        for key in voxel_keys {
            let mut corners = [0u32; 8];
            for (c, slot) in corners.iter_mut().enumerate() {
                *slot = *vertex_slots.get(&corner_key(key, c)).ok_or_else(|| {
                    Error::Checkpoint(format!("voxel {key:?} missing corner {c}"))
                })?;
            }
            voxel_index.insert(key, voxels.len() as u32);
            voxels.push(VoxelEntry { key, corners });
        }
        Ok(Self {
            voxel_size,
            emb_group,
            weights,
            vertex_slots,
            vertex_keys,
            voxel_index,
            voxels,
        })
    }
}

/// Encode a frame's depth into per-vertex priors (see [`PriorMode`]).
///
/// Points allocate voxels; every corner vertex of an allocated voxel is
/// projected into the frame, and vertices landing outside the image or on
/// invalid depth are omitted. The fusion weight is the number of
/// back-projected points within one voxel (Chebyshev) of the vertex.
pub fn encode_prior<T: Real>(
    frame: &Frame<T>,
    k: &Intrinsics,
    pose: &Pose<T>,
    voxel_size: T,
    tr: T,
    mode: &PriorMode<T>,
) -> LocalVoxelSet<T> {
    let points = backproject(frame, k, pose);
    let mut counts: FastMap<VoxelKey, u32> = FastMap::default();
    let mut voxels: FastMap<VoxelKey, ()> = FastMap::default();
    let h = voxel_size.to_f64();
    for p in &points {
        voxels.insert(voxel_key(*p, voxel_size), ());
        // lattice vertices within Chebyshev distance 1 voxel: per axis the
        // integers in [p/h - 1, p/h + 1]
        let mut lo = [0i32; 3];
        let mut hi = [0i32; 3];
        for a in 0..3 {
            let g = p[a].to_f64() / h;
            lo[a] = (g - 1.0).ceil() as i32;
            hi[a] = (g + 1.0).floor() as i32;
        }
        for vx in lo[0]..=hi[0] {
            for vy in lo[1]..=hi[1] {
                for vz in lo[2]..=hi[2] {
                    *counts.entry([vx, vy, vz]).or_insert(0) += 1;
                }
            }
        }
    }

    let mut vertex_set: FastMap<VoxelKey, ()> = FastMap::default();
    let mut voxel_list: Vec<VoxelKey> = voxels.keys().copied().collect();
    voxel_list.sort_unstable();
    let mut vertices = Vec::new();
    for &vox in &voxel_list {
        for c in 0..8 {
            let vk = corner_key(vox, c);
            if vertex_set.contains_key(&vk) {
                continue;
            }
            vertex_set.insert(vk, ());
            let vpos = [
                T::from_f64(vk[0] as f64 * h),
                T::from_f64(vk[1] as f64 * h),
                T::from_f64(vk[2] as f64 * h),
            ];
            let Some((u, v, z_v)) = project(vpos, k, pose) else {
                continue;
            };
            let (ui, vi) = (u.round(), v.round());
            if ui < 0.0 || vi < 0.0 || ui >= frame.width as f64 || vi >= frame.height as f64 {
                continue;
            }
            let d_pix = frame.depth_at(ui as u32, vi as u32);
            if d_pix <= T::zero() {
                continue;
            }
            let t = (d_pix - z_v).max(-tr).min(tr);
            let count = T::from_usize(counts.get(&vk).copied().unwrap_or(0) as usize);
            let (emb, weight) = match mode {
                PriorMode::Analytic => {
                    let mut e = [T::zero(); EMBED_DIM];
                    e[0] = t / tr;
                    (e, count)
                }
                PriorMode::None => ([T::zero(); EMBED_DIM], count),
                PriorMode::Learned(net) => net.forward([t / tr, d_pix, z_v]),
            };
            vertices.push((vk, emb, weight));
        }
    }
    vertices.sort_unstable_by_key(|(k, _, _)| *k);
    LocalVoxelSet {
        voxel_size,
        voxels: voxel_list,
        vertices,
    }
}
