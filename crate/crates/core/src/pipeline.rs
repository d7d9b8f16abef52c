//! Orchestration of the track → fuse → map loop and artifact emission:
//! trajectory.txt, mesh.ply, checkpoint.bin, metrics.txt, and per-phase logs.

use std::fmt::Write as _;
use std::io::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SystemConfig;
use crate::diffcore::{GroupId, ParamStore};
use crate::error::{Error, Result};
use crate::evaluator::{ate_rmse, mesh_metrics, ReconMetrics, Trajectory};
use crate::frame_io::{
    backproject, detect_format, load_dataset, save_trajectory_file, Dataset, Frame, Intrinsics,
};
use crate::geom::Aabb;
use crate::hash::FastMap;
use crate::mapper::{add_frame, map_step, select_frames, FrameMeta, PixelDatabase};
use crate::mesher::{extract_mesh, load_ply, save_ply};
use crate::pose::Pose;
use crate::scene::{checkpoint_bytes, save_checkpoint, Scene, SceneParams};
use crate::sparse_volume::encode_prior;
use crate::tracker::{motion_model_init, track_frame};

/// Padding added around the first frame's back-projection when no explicit
/// scene bounds are configured.
const BOUNDS_MARGIN: f64 = 0.5;
/// Surface samples per mesh and distance threshold for reconstruction metrics.
const METRIC_SAMPLES: usize = 100_000;
const METRIC_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub frames: usize,
    pub mapping_episodes: usize,
    /// Present when the dataset ships a ground-truth trajectory.
    pub ate_rmse_cm: Option<f64>,
    /// Present when the dataset ships gt_mesh.ply.
    pub recon: Option<ReconMetrics>,
    pub trajectory: Trajectory,
}

fn stream(seed: u64, idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}

fn stored_pose(store: &ParamStore<f64>, (qg, tg): (GroupId, GroupId)) -> Pose<f64> {
    let q: [f64; 4] = store.values(qg).try_into().expect("quaternion group");
    let t: [f64; 3] = store.values(tg).try_into().expect("translation group");
    Pose::new(q, t)
}

fn pose_fields(p: &Pose<f64>) -> String {
    let c = p.canonicalized();
    format!(
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        c.t[0], c.t[1], c.t[2], c.q[1], c.q[2], c.q[3], c.q[0]
    )
}

/// Map-frame → ground-truth-frame transform read off the anchor (first)
/// frame: gt_pose ∘ est_pose⁻¹, with the gt pose matched by timestamp.
fn anchor_gauge(est: &Trajectory, gt: &Trajectory) -> Result<Pose<f64>> {
    let (ts, est0) = est.first().ok_or_else(|| Error::Eval("empty trajectory".into()))?;
    let gt0 = gt
        .iter()
        .min_by(|a, b| (a.0 - ts).abs().total_cmp(&(b.0 - ts).abs()))
        .filter(|(tg, _)| (tg - ts).abs() <= 0.02)
        .ok_or_else(|| Error::Eval("no ground-truth pose near the first frame".into()))?
        .1;
    Ok(gt0.compose(&est0.inverse()))
}

/// Axis-aligned bounds covering the first frame's back-projected points and
/// the camera origin, padded by [`BOUNDS_MARGIN`].
fn bounds_from_frame(frame: &Frame<f64>, k: &Intrinsics) -> Result<Aabb<f64>> {
    if frame.valid_count() == 0 {
        return Err(Error::Dataset(
            "first frame has no valid depth; set scene.bounds explicitly".into(),
        ));
    }
    let mut min = [0.0f64; 3];
    let mut max = [0.0f64; 3];
    for p in backproject(frame, k, &Pose::identity()) {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    for a in 0..3 {
        min[a] -= BOUNDS_MARGIN;
        max[a] += BOUNDS_MARGIN;
    }
    Ok(Aabb::new(min, max))
}

/// Track every frame, fuse its depth at the tracked pose, and run a joint
/// mapping step every `mapping.interval` frames; then write all artifacts to
/// the output directory. A non-finite loss aborts the run after saving the
/// checkpoint taken before the diverging episode.
pub fn run(cfg: &SystemConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dataset_path = cfg
        .dataset_path
        .as_deref()
        .ok_or_else(|| Error::Config("dataset.path is required".into()))?;
    let format = match cfg.dataset_format {
        Some(f) => f,
        None => detect_format(dataset_path).ok_or_else(|| {
            Error::Dataset(format!(
                "{}: no dataset found (expected rgb.txt or intrinsics.txt)",
                dataset_path.display()
            ))
        })?,
    };
    let dataset: Dataset<f64> = load_dataset(dataset_path, format)?;
    if dataset.frames.is_empty() {
        return Err(Error::Dataset("dataset has no frames".into()));
    }
    let k = dataset.intrinsics;

    std::fs::create_dir_all(&cfg.output)?;
    let resolved = cfg.resolved();
    for line in resolved.lines() {
        log::info!("config: {line}");
    }
    std::fs::write(cfg.output.join("config.txt"), &resolved)?;
    let mut track_log = std::io::BufWriter::new(std::fs::File::create(
        cfg.output.join("tracking.log"),
    )?);
    writeln!(track_log, "# frame iters loss tx ty tz qx qy qz qw")?;
    let mut map_log = std::io::BufWriter::new(std::fs::File::create(
        cfg.output.join("mapping.log"),
    )?);
    writeln!(map_log, "# episode iter frames dropped total rgb depth fs sdf")?;

    // independent rng per purpose so consumption in one phase cannot shift
    // the draws of another
    let mut rng_init = stream(cfg.seed, 1);
    let mut rng_track = stream(cfg.seed, 2);
    let mut rng_map = stream(cfg.seed, 3);
    let mut rng_select = stream(cfg.seed, 4);
    let mut rng_db = stream(cfg.seed, 5);

    let bounds = match cfg.bounds {
        Some(b) => b,
        None => bounds_from_frame(&dataset.frames[0], &k)?,
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut scene = Scene::new(
        &mut store,
        &mut rng_init,
        &SceneParams {
            voxel_size: cfg.voxel_size,
            tr: cfg.tr,
            plane_cell: cfg.plane_cell,
            bounds,
            lr_embeddings: cfg.mapping.lr_embeddings,
            lr_planes: cfg.mapping.lr_planes,
            lr_decoders: cfg.mapping.lr_decoders,
        },
    );
    let prior = cfg.prior.mode();

    let mut db = PixelDatabase::new();
    let mut metas: Vec<FrameMeta<f64>> = Vec::new();
    let mut pose_groups: FastMap<usize, (GroupId, GroupId)> = FastMap::default();
    let mut episodes = 0usize;
    // assigned immediately before every optimization episode; abort paths
    // are only reachable after that refresh
    let mut snapshot: Vec<u8>;
    let abort = |snapshot: &[u8], e: Error| -> Error {
        match std::fs::write(cfg.output.join("checkpoint.bin"), snapshot) {
            Ok(()) => e,
            Err(io) => Error::Checkpoint(format!("{e}; saving last-good checkpoint failed: {io}")),
        }
    };

    for (i, frame) in dataset.frames.iter().enumerate() {
        debug_assert_eq!(frame.index, i);
        let init = if i == 0 {
            Pose::identity()
        } else {
            let mut prev = Vec::with_capacity(2);
            if i >= 2 {
                prev.push(stored_pose(&store, pose_groups[&(i - 2)]));
            }
            prev.push(stored_pose(&store, pose_groups[&(i - 1)]));
            motion_model_init(&prev)
        };
        let qg = store.add_group(
            &format!("pose_q_{i}"),
            init.q.to_vec(),
            cfg.tracking.lr_rotation,
            true,
        );
        let tg = store.add_group(
            &format!("pose_t_{i}"),
            init.t.to_vec(),
            cfg.tracking.lr_translation,
            true,
        );
        pose_groups.insert(i, (qg, tg));

        let tracked = if i == 0 || frame.valid_count() == 0 {
            // frame 0 anchors the gauge; depthless frames keep the motion
            // model's extrapolation
            if i > 0 {
                log::warn!("frame {i}: no valid depth, keeping extrapolated pose");
            }
            writeln!(track_log, "{i} 0 - {}", pose_fields(&init))?;
            init
        } else {
            snapshot = checkpoint_bytes(&store, &scene);
            let res = track_frame(
                &mut store,
                &scene,
                frame,
                &k,
                qg,
                tg,
                &init,
                &cfg.tracking,
                &cfg.sampling,
                &cfg.weights,
                &mut rng_track,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => abort(&snapshot, e),
                other => other,
            })?;
            let pose = stored_pose(&store, (qg, tg));
            let loss = match res.loss {
                Some(l) => format!("{l:.9e}"),
                None => "-".into(),
            };
            writeln!(
                track_log,
                "{i} {} {loss} {}",
                res.losses.len(),
                pose_fields(&pose)
            )?;
            pose
        };

        if frame.valid_count() > 0 {
            let local = encode_prior(frame, &k, &tracked, cfg.voxel_size, cfg.tr, &prior);
            scene.volume.fuse(&mut store, &local);
            metas.push(add_frame(&mut db, frame, &k, &cfg.mapping, &mut rng_db)?);
        }

        let due = cfg.mapping.interval > 0
            && cfg.mapping.iters > 0
            && i % cfg.mapping.interval == 0
            && metas.iter().any(|m| m.frame_id == i);
        if due {
            let poses: FastMap<usize, Pose<f64>> = pose_groups
                .iter()
                .map(|(&id, &g)| (id, stored_pose(&store, g)))
                .collect();
            let selected = select_frames(i, &metas, &poses, &k, &cfg.mapping, &mut rng_select);
            snapshot = checkpoint_bytes(&store, &scene);
            let stats = map_step(
                &mut store,
                &scene,
                &selected,
                &db,
                &pose_groups,
                &k,
                &cfg.mapping,
                &cfg.sampling,
                &cfg.weights,
                &mut rng_map,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => abort(&snapshot, e),
                other => other,
            })?;
            episodes += 1;
            for (it, l) in stats.losses.iter().enumerate() {
                writeln!(
                    map_log,
                    "{episodes} {it} {} {} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
                    stats.used_frames, stats.dropped_frames, l.total, l.rgb, l.depth, l.fs, l.sdf
                )?;
            }
            map_log.flush()?;
        }
        track_log.flush()?;
    }

    // final artifacts: poses reflect every mapping-time refinement
    let trajectory: Trajectory = dataset
        .frames
        .iter()
        .map(|f| (f.timestamp, stored_pose(&store, pose_groups[&f.index])))
        .collect();
    save_trajectory_file(&cfg.output.join("trajectory.txt"), &trajectory)?;
    let mesh = extract_mesh(&store, &scene, cfg.voxel_size * 0.5);
    save_ply(&mesh, &cfg.output.join("mesh.ply"))?;
    save_checkpoint(&cfg.output.join("checkpoint.bin"), &store, &scene)?;

    let ate = match &dataset.groundtruth {
        Some(gt) => match ate_rmse(&trajectory, gt) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("trajectory evaluation skipped: {e}");
                None
            }
        },
        None => None,
    };
    // The map lives in the anchor frame's camera coordinates (its pose never
    // moves), so the exact map→world transform is the anchor's ground-truth
    // pose composed with its estimate's inverse. Estimating the gauge from
    // camera centers instead (Umeyama) is ill-conditioned for short arcs.
    let gt_mesh_path = dataset_path.join("gt_mesh.ply");
    let recon = match &dataset.groundtruth {
        Some(gt) if gt_mesh_path.is_file() && !mesh.triangles.is_empty() => {
            let result = anchor_gauge(&trajectory, gt).and_then(|gauge| {
                let mut aligned = mesh.clone();
                for v in &mut aligned.vertices {
                    *v = gauge.transform(*v);
                }
                let gt_mesh = load_ply(&gt_mesh_path)?;
                mesh_metrics(&aligned, &gt_mesh, METRIC_SAMPLES, METRIC_THRESHOLD, cfg.seed)
            });
            match result {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!("reconstruction evaluation skipped: {e}");
                    None
                }
            }
        }
        _ => None,
    };

    let mut report = String::new();
    writeln!(report, "frames = {}", dataset.frames.len()).unwrap();
    writeln!(report, "mapping_episodes = {episodes}").unwrap();
    writeln!(report, "mesh_vertices = {}", mesh.vertices.len()).unwrap();
    writeln!(report, "mesh_triangles = {}", mesh.triangles.len()).unwrap();
    if let Some(a) = ate {
        writeln!(report, "ate_rmse_cm = {a:.4}").unwrap();
    }
    if let Some(r) = &recon {
        writeln!(report, "accuracy_pct = {:.2}", r.accuracy_pct).unwrap();
        writeln!(report, "completeness_pct = {:.2}", r.completeness_pct).unwrap();
        writeln!(report, "f1_pct = {:.2}", r.f1_pct).unwrap();
    }
    std::fs::write(cfg.output.join("metrics.txt"), &report)?;
    for line in report.lines() {
        log::info!("{line}");
    }

    Ok(RunSummary {
        frames: dataset.frames.len(),
        mapping_episodes: episodes,
        ate_rmse_cm: ate,
        recon,
        trajectory,
    })
}
