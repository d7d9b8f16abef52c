//! Keyframe-free mapping: a runtime pixel database over all past frames,
//! covisibility-based frame selection, and joint optimization of the scene
//! representation together with the selected frames' poses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adam_step, AdamState, GradientBuffer, GroupId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::frame_io::{project, sample_pixels, Frame, Intrinsics, PixelSample};
use crate::geom::V3;
use crate::hash::FastMap;
use crate::objective::{build_loss_graph, LossTerms, ObjectiveWeights};
use crate::pose::{quat_normalize, Pose};
use crate::real::{r, Real};
use crate::renderer::{build_render_graph, frame_rays, FrameRays, SamplingConfig};
use crate::scene::Scene;

/// Number of back-projected points kept per frame for covisibility tests.
pub const COVIS_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingStrategy {
    /// Optimize the poses of every selected frame (frame 0 stays fixed).
    AllFrames,
    /// Optimize only every-4th-frame poses among the selected frames.
    Keyframe,
}

#[derive(Debug, Clone, Copy)]
pub struct MappingConfig<T> {
    /// Run mapping every this many frames.
    pub interval: usize,
    pub iters: usize,
    /// Total pixels per iteration, split across the selected frames.
    pub pixels: usize,
    /// Pixels stored in the database per frame.
    pub db_pixels_per_frame: usize,
    /// Selection budget: most recent + covisible draw + uniform draw.
    pub recent: usize,
    pub covisible: usize,
    pub random: usize,
    pub covisibility_threshold: f64,
    pub lr_embeddings: T,
    pub lr_planes: T,
    pub lr_decoders: T,
    pub lr_poses: T,
    pub strategy: MappingStrategy,
    /// Pose-id stride defining keyframes under [`MappingStrategy::Keyframe`].
    pub keyframe_stride: usize,
}

impl<T: Real> Default for MappingConfig<T> {
    fn default() -> Self {
        Self {
            interval: 5,
            iters: 20,
            pixels: 2048,
            db_pixels_per_frame: 15000,
            recent: 20,
            covisible: 90,
            random: 90,
            covisibility_threshold: 0.10,
            lr_embeddings: r(0.004),
            lr_planes: r(0.004),
            lr_decoders: r(0.001),
            lr_poses: r(0.001),
            strategy: MappingStrategy::AllFrames,
            keyframe_stride: 4,
        }
    }
}

impl<T: Real> MappingConfig<T> {
    pub fn frame_budget(&self) -> usize {
        self.recent + self.covisible + self.random
    }
}

/// Sparse geometry of one tracked frame used by the covisibility rule:
/// camera-frame points, transformed by the *current* pose estimates at query
/// time.
#[derive(Debug, Clone)]
pub struct FrameMeta<T> {
    pub frame_id: usize,
    pub cam_points: Vec<V3<T>>,
}

/// Append-only per-frame store of sampled valid-depth pixels.
#[derive(Debug, Default)]
pub struct PixelDatabase<T> {
    frames: Vec<(usize, Vec<PixelSample<T>>)>,
    by_id: FastMap<usize, usize>,
}

impl<T: Real> PixelDatabase<T> {
    pub fn new() -> Self {
        Self {
            frames: Vec::new(),
            by_id: FastMap::default(),
        }
    }

    pub fn pixels(&self, frame_id: usize) -> Option<&[PixelSample<T>]> {
        self.by_id
            .get(&frame_id)
            .map(|&i| self.frames[i].1.as_slice())
    }

    pub fn total_pixels(&self) -> usize {
        self.frames.iter().map(|(_, p)| p.len()).sum()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Store min(db_pixels_per_frame, valid) distinct pixels of `frame` and build
/// its covisibility sample. A frame id can only be added once.
pub fn add_frame<T: Real>(
    db: &mut PixelDatabase<T>,
    frame: &Frame<T>,
    k: &Intrinsics,
    cfg: &MappingConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Result<FrameMeta<T>> {
    if db.by_id.contains_key(&frame.index) {
        return Err(Error::Dataset(format!(
            "pixel database already holds frame {}",
            frame.index
        )));
    }
    let stored = sample_pixels(frame, cfg.db_pixels_per_frame, rng);
    let cam_points = sample_pixels(frame, COVIS_POINTS, rng)
        .iter()
        .map(|s| {
            let d = k.pixel_dir(s.u as f64, s.v as f64);
            [
                T::from_f64(d[0]) * s.depth,
                T::from_f64(d[1]) * s.depth,
                s.depth,
            ]
        })
        .collect();
    db.by_id.insert(frame.index, db.frames.len());
    db.frames.push((frame.index, stored));
    Ok(FrameMeta {
        frame_id: frame.index,
        cam_points,
    })
}

/// Fraction of `a`'s sampled points that fall inside `b`'s image bounds with
/// positive depth, under the given current pose estimates.
pub fn covisibility<T: Real>(
    a: &FrameMeta<T>,
    pose_a: &Pose<T>,
    pose_b: &Pose<T>,
    k: &Intrinsics,
) -> f64 {
    if a.cam_points.is_empty() {
        return 0.0;
    }
    let inside = a
        .cam_points
        .iter()
        .filter(|p| {
            let world = pose_a.transform(**p);
            match project(world, k, pose_b) {
                Some((u, v, _)) => {
                    u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64
                }
                None => false,
            }
        })
        .count();
    inside as f64 / a.cam_points.len() as f64
}

fn draw(pool: &[usize], amount: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= amount {
        return pool.to_vec();
    }
    rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Frame ids to optimize in one mapping step: the most recent `cfg.recent`,
/// `cfg.covisible` drawn from frames whose covisibility with the current
/// frame exceeds the threshold, and `cfg.random` drawn from the remainder.
/// Everything if the history fits the budget.
pub fn select_frames<T: Real>(
    current: usize,
    metas: &[FrameMeta<T>],
    poses: &FastMap<usize, Pose<T>>,
    k: &Intrinsics,
    cfg: &MappingConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut ids: Vec<usize> = metas.iter().map(|m| m.frame_id).collect();
    ids.sort_unstable();
    if ids.len() <= cfg.frame_budget() {
        return ids;
    }
    let recent: Vec<usize> = ids[ids.len() - cfg.recent..].to_vec();
    let chosen: FastMap<usize, ()> = recent.iter().map(|&i| (i, ())).collect();

    let current_meta = metas
        .iter()
        .find(|m| m.frame_id == current)
        .expect("current frame has metadata");
    let cur_pose = poses[&current];
    let mut covis_pool = Vec::new();
    let mut rest_pool = Vec::new();
    for m in metas {
        if chosen.contains_key(&m.frame_id) {
            continue;
        }
        // fraction of the current frame's geometry visible from the candidate
        let c = covisibility(current_meta, &cur_pose, &poses[&m.frame_id], k);
        if c > cfg.covisibility_threshold {
            covis_pool.push(m.frame_id);
        } else {
            rest_pool.push(m.frame_id);
        }
    }
    covis_pool.sort_unstable();
    rest_pool.sort_unstable();

    let mut out = recent;
    let picked = draw(&covis_pool, cfg.covisible, rng);
    rest_pool.extend(covis_pool.iter().filter(|i| !picked.contains(i)));
    rest_pool.sort_unstable();
    out.extend(picked);
    out.extend(draw(&rest_pool, cfg.random, rng));
    out
}

/// Split `total` pixels over `ids`: floor(total/|ids|) each, with the
/// remainder going one-per-frame to the most recent (highest) ids.
pub fn pixel_allocation(total: usize, ids: &[usize]) -> Vec<(usize, usize)> {
    assert!(!ids.is_empty());
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let base = total / sorted.len();
    let remainder = total - base * sorted.len();
    let n = sorted.len();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, base + usize::from(i >= n - remainder)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MapStats<T> {
    /// Loss terms recorded per iteration.
    pub losses: Vec<LossTerms<T>>,
    /// Selected frames skipped because the database holds no pixels for them.
    pub dropped_frames: usize,
    /// Frames whose pixels entered the batch.
    pub used_frames: usize,
}

/// One mapping episode: `cfg.iters` joint Adam steps over the scene groups
/// and the selected frames' pose groups. Frame 0 never moves (gauge anchor);
/// under the keyframe strategy only stride-aligned frame poses move.
#[allow(clippy::too_many_arguments)]
pub fn map_step<T: Real>(
    store: &mut ParamStore<T>,
    scene: &Scene<T>,
    selected: &[usize],
    db: &PixelDatabase<T>,
    pose_groups: &FastMap<usize, (GroupId, GroupId)>,
    k: &Intrinsics,
    cfg: &MappingConfig<T>,
    sampling: &SamplingConfig<T>,
    weights: &ObjectiveWeights<T>,
    rng: &mut ChaCha8Rng,
) -> Result<MapStats<T>> {
    assert!(!selected.is_empty(), "map_step with no selected frames");
    let mut usable: Vec<usize> = Vec::with_capacity(selected.len());
    let mut dropped = 0usize;
    for &id in selected {
        match db.pixels(id) {
            Some(px) if !px.is_empty() => usable.push(id),
            _ => dropped += 1,
        }
    }
    if usable.is_empty() {
        return Err(Error::Dataset(
            "mapping: no selected frame has database pixels".into(),
        ));
    }
    usable.sort_unstable();
    usable.dedup();
    let allocation = pixel_allocation(cfg.pixels, &usable);

    let mut active: Vec<(GroupId, T)> = vec![
        (scene.volume.emb_group, cfg.lr_embeddings),
        (scene.planes.groups[0], cfg.lr_planes),
        (scene.planes.groups[1], cfg.lr_planes),
        (scene.planes.groups[2], cfg.lr_planes),
    ];
    for g in scene.geometry.groups().into_iter().chain(scene.color.groups()) {
        active.push((g, cfg.lr_decoders));
    }
    let mut moving_poses: Vec<(GroupId, GroupId)> = Vec::new();
    for &id in &usable {
        let kf = cfg.keyframe_stride.max(1);
        let movable = id != 0
            && (cfg.strategy == MappingStrategy::AllFrames || id % kf == 0);
        if movable {
            let (qg, tg) = pose_groups[&id];
            active.push((qg, cfg.lr_poses));
            active.push((tg, cfg.lr_poses));
            moving_poses.push((qg, tg));
        }
    }

    let mut adam = AdamState::new(store);
    let mut losses = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let mut tape = Tape::new();
        let mut frames: Vec<FrameRays<T>> = Vec::with_capacity(usable.len());
        for &(id, count) in &allocation {
            if count == 0 {
                continue;
            }
            let stored = db.pixels(id).expect("usable frame");
            // uniform retrieval with replacement
            let pixels: Vec<(f64, f64, [T; 3], T)> = (0..count)
                .map(|_| {
                    let s = &stored[rng.gen_range(0..stored.len())];
                    (s.u as f64, s.v as f64, s.color, s.depth)
                })
                .collect();
            let (qg, tg) = pose_groups[&id];
            let qn = tape.param_all(store, qg);
            let tn = tape.param_all(store, tg);
            frames.push(frame_rays(qn, tn, &pixels, k, sampling, rng));
        }
        let rg = build_render_graph(
            &mut tape,
            store,
            &scene.volume,
            &scene.planes,
            &scene.geometry,
            &scene.color,
            &frames,
            sampling,
        );
        let Some(lg) = build_loss_graph(&mut tape, &rg, weights, scene.tr) else {
            continue;
        };
        let terms = lg.values(&tape);
        if !terms.total.is_finite() {
            return Err(Error::NonFinite("mapping loss".into()));
        }
        losses.push(terms);

        let mut grads = GradientBuffer::new(store);
        tape.backward(lg.total, store, &mut grads);
        adam_step(store, &grads, &mut adam, &active).map_err(Error::NonFinite)?;
        for (qg, _) in &moving_poses {
            let qv = store.values_mut(*qg);
            let qn = quat_normalize([qv[0], qv[1], qv[2], qv[3]]);
            qv.copy_from_slice(&qn);
        }
    }
    Ok(MapStats {
        losses,
        dropped_frames: dropped,
        used_frames: usable.len(),
    })
}
