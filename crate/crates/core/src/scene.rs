//! The scene aggregate: sparse voxel field + appearance planes + decoders,
//! plus checkpoint serialization.
//!
//! A checkpoint stores every parameter group as a flat little-endian f32
//! array behind a manifest entry (name, rows, cols, count, learning rate,
//! trainable flag), followed by the volume's vertex/voxel keys and fusion
//! weights and the plane grid metadata, so a run can be resumed or meshed
//! offline.

use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::decoders::{normalize_point, ColorDecoder, GeometryDecoder, COLOR_IN, GEO_IN, HIDDEN};
use crate::diffcore::{GroupId, ParamStore};
use crate::error::{Error, Result};
use crate::geom::{Aabb, V3};
use crate::real::Real;
use crate::sparse_volume::{SparseVolume, VoxelKey, EMBED_DIM};
use crate::triplane::{TriPlanes, FEATURE_DIM, PLANE_NAMES};

const MAGIC: &[u8; 8] = b"VXSCKPT1";

#[derive(Debug, Clone)]
pub struct SceneParams<T> {
    pub voxel_size: T,
    pub tr: T,
    pub plane_cell: T,
    pub bounds: Aabb<T>,
    pub lr_embeddings: T,
    pub lr_planes: T,
    pub lr_decoders: T,
}

/// Everything the map consists of; parameters live in the shared store.
pub struct Scene<T: Real> {
    pub volume: SparseVolume<T>,
    pub planes: TriPlanes<T>,
    pub geometry: GeometryDecoder,
    pub color: ColorDecoder,
    pub bounds: Aabb<T>,
    pub tr: T,
}

impl<T: Real> Scene<T> {
    pub fn new(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, p: &SceneParams<T>) -> Self {
        let volume = SparseVolume::new(store, p.voxel_size, p.lr_embeddings);
        let planes = TriPlanes::new(store, p.bounds, p.plane_cell, p.lr_planes);
        let geometry = GeometryDecoder::new(store, rng, p.lr_decoders);
        let color = ColorDecoder::new(store, rng, p.lr_decoders);
        Scene {
            volume,
            planes,
            geometry,
            color,
            bounds: p.bounds,
            tr: p.tr,
        }
    }

    /// All map parameter groups (embeddings, planes, both decoders) in a
    /// stable order — the set mapping optimizes and tracking freezes.
    pub fn scene_groups(&self) -> Vec<GroupId> {
        let mut g = vec![self.volume.emb_group];
        g.extend(self.planes.groups);
        g.extend(self.geometry.groups());
        g.extend(self.color.groups());
        g
    }

    /// Decoded signed distance (truncation units) at a world point, None
    /// outside the allocated volume.
    pub fn sdf_at(&self, store: &ParamStore<T>, p: V3<T>) -> Option<T> {
        let e = self.volume.trilerp(store, p)?;
        let pn = normalize_point(&self.bounds, p);
        Some(self.geometry.decode_sdf(store, pn, e))
    }

    /// Decoded color at a world point (plane features are defined
    /// everywhere; out-of-bounds clamps).
    pub fn color_at(&self, store: &ParamStore<T>, p: V3<T>) -> [T; 3] {
        let f = self.planes.project_features(store, p);
        self.color.decode_color(store, f)
    }
}

fn group_shape<T: Real>(name: &str, len: usize) -> (u32, u32) {
    let (r, c) = match name {
        "geo_w1" => (HIDDEN, GEO_IN),
        "color_w1" => (HIDDEN, COLOR_IN),
        "geo_w2" => (1, HIDDEN),
        "color_w2" => (3, HIDDEN),
        "voxel_embeddings" => (EMBED_DIM, len / EMBED_DIM),
        n if n.starts_with("plane_") => (FEATURE_DIM, len / FEATURE_DIM),
        _ => (len, 1),
    };
    debug_assert_eq!(r * c, len, "shape mismatch for {name}");
    (r as u32, c as u32)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 group name".into()))
    }
}

/// Serialize the full store plus scene structure to bytes.
pub fn checkpoint_bytes<T: Real>(store: &ParamStore<T>, scene: &Scene<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(store.n_groups() as u32);
    for (_, g) in store.iter() {
        w.str(&g.name);
        let (r, c) = group_shape::<T>(&g.name, g.values.len());
        w.u32(r);
        w.u32(c);
        w.u64(g.values.len() as u64);
        w.f64(g.lr.to_f64());
        w.u8(g.trainable as u8);
        for v in &g.values {
            w.f32((*v).to_f64() as f32);
        }
    }
    // volume structure: vertices in slot order so embedding offsets line up
    w.f64(scene.volume.voxel_size.to_f64());
    let verts = scene.volume.vertex_keys();
    let weights = scene.volume.weights();
    w.u64(verts.len() as u64);
    for (k, wt) in verts.iter().zip(weights) {
        for a in k {
            w.i32(*a);
        }
        w.f64((*wt).to_f64());
    }
    let voxels: Vec<VoxelKey> = scene.volume.voxel_keys().collect();
    w.u64(voxels.len() as u64);
    for k in &voxels {
        for a in k {
            w.i32(*a);
        }
    }
    // plane grid + scene metadata
    for a in 0..3 {
        w.f64(scene.bounds.min[a].to_f64());
    }
    for a in 0..3 {
        w.f64(scene.bounds.max[a].to_f64());
    }
    w.f64(scene.planes.cell.to_f64());
    w.f64(scene.tr.to_f64());
    w.0
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    scene: &Scene<T>,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store, scene))?;
    Ok(())
}

/// Rebuild the parameter store and scene from checkpoint bytes.
pub fn checkpoint_from_bytes<T: Real>(buf: &[u8]) -> Result<(ParamStore<T>, Scene<T>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let n_groups = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_groups {
        let name = r.str()?;
        let rows = r.u32()? as u64;
        let cols = r.u32()? as u64;
        let count = r.u64()?;
        if rows * cols != count {
            return Err(Error::Checkpoint(format!(
                "group {name}: shape {rows}x{cols} does not match count {count}"
            )));
        }
        let lr = r.f64()?;
        let trainable = r.u8()? != 0;
        let mut values = Vec::with_capacity(count as usize);
        for _ in 0..count {
            values.push(T::from_f64(r.f32()? as f64));
        }
        store.add_group(&name, values, T::from_f64(lr), trainable);
    }

    let voxel_size = T::from_f64(r.f64()?);
    let n_verts = r.u64()? as usize;
    let mut vertex_keys = Vec::with_capacity(n_verts);
    let mut weights = Vec::with_capacity(n_verts);
    for _ in 0..n_verts {
        let mut k = [0i32; 3];
        for a in &mut k {
            *a = r.i32()?;
        }
        vertex_keys.push(k);
        weights.push(T::from_f64(r.f64()?));
    }
    let n_voxels = r.u64()? as usize;
    let mut voxel_keys = Vec::with_capacity(n_voxels);
    for _ in 0..n_voxels {
        let mut k = [0i32; 3];
        for a in &mut k {
            *a = r.i32()?;
        }
        voxel_keys.push(k);
    }
    let mut mn = [T::zero(); 3];
    let mut mx = [T::zero(); 3];
    for a in &mut mn {
        *a = T::from_f64(r.f64()?);
    }
    for a in &mut mx {
        *a = T::from_f64(r.f64()?);
    }
    let bounds = Aabb::new(mn, mx);
    let cell = T::from_f64(r.f64()?);
    let tr = T::from_f64(r.f64()?);

    let need = |name: &str| {
        store
            .by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing group {name}")))
    };
    let emb = need("voxel_embeddings")?;
    let volume = SparseVolume::restore(&store, emb, voxel_size, vertex_keys, weights, voxel_keys)?;
    let pg = [need(PLANE_NAMES[0])?, need(PLANE_NAMES[1])?, need(PLANE_NAMES[2])?];
    let planes = TriPlanes::restore(&store, pg, bounds, cell)?;
    let geometry = GeometryDecoder::from_groups(
        need("geo_w1")?,
        need("geo_b1")?,
        need("geo_w2")?,
        need("geo_b2")?,
    );
    let color = ColorDecoder::from_groups(
        need("color_w1")?,
        need("color_b1")?,
        need("color_w2")?,
        need("color_b2")?,
    );
    Ok((
        store,
        Scene {
            volume,
            planes,
            geometry,
            color,
            bounds,
            tr,
        },
    ))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamStore<T>, Scene<T>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}
