//! Acceptance suite. Each test covers one numbered criterion and prints a
//! single PASS/FAIL line with the measured values next to the pinned
//! tolerances. Criteria 1-9 gate; criterion 10 is informational and only
//! reports.
//!
//! The end-to-end criteria (4, 5, 6, 9) share a process-wide lock so their
//! wall-clock budgets are measured on an otherwise idle machine, and the
//! 50-frame dataset is generated once per process.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra as na;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxslam_core::config::{PriorSelect, SystemConfig};
use voxslam_core::diffcore::{
    finite_difference_check, GradientBuffer, GroupId, NodeId, ParamStore, Tape,
};
use voxslam_core::evaluator::{ate_rmse, mesh_metrics, sample_surface, Trajectory};
use voxslam_core::frame_io::Intrinsics;
use voxslam_core::geom::Aabb;
use voxslam_core::mapper::MappingStrategy;
use voxslam_core::mesher::{extract_mesh, mesh_from_sdf, TriangleMesh};
use voxslam_core::objective::{build_loss_graph, classify_samples, ObjectiveWeights, SampleClass};
use voxslam_core::pipeline;
use voxslam_core::pose::{quat_to_rot, Pose};
use voxslam_core::renderer::{
    build_render_graph, frame_rays, render_from_nodes, RenderGraph, SamplingConfig,
};
use voxslam_core::scene::{Scene, SceneParams};
use voxslam_core::sparse_volume::{LocalVoxelSet, SparseVolume, VoxelKey, EMBED_DIM};
use voxslam_core::synth::{arc_trajectory, generate_sequence, AnalyticScene};
use voxslam_core::triplane::TriPlanes;

const FD_TOL: f64 = 1e-4;
const FD_TRIALS: usize = 100;

fn heavy_lock() -> MutexGuard<'static, ()> {
    static M: Mutex<()> = Mutex::new(());
    M.lock().unwrap_or_else(|p| p.into_inner())
}

fn small_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 125.0,
        fy: 125.0,
        cx: 79.5,
        cy: 59.5,
        width: 160,
        height: 120,
        depth_scale: 5000.0,
    }
}

/// The shared 50-frame sequence: slow circular arc inside the 2 m box room
/// with the centered sphere, depth noise 0.005 m.
fn room50() -> &'static Path {
    static D: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, p) = D.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("room50");
        let scene = AnalyticScene::named("room").unwrap();
        let traj = arc_trajectory(50, 0.5, 0.1, 0.25);
        generate_sequence(&scene, &traj, &small_intrinsics(), 0.005, 7, &path).unwrap();
        (dir, path)
    });
    p
}

fn base_cfg(data: &Path, out: &Path) -> SystemConfig {
    let mut cfg = SystemConfig::default();
    cfg.dataset_path = Some(data.to_path_buf());
    cfg.output = out.to_path_buf();
    cfg.seed = 5;
    cfg
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    // Box-Muller; two uniform draws per normal keeps the stream simple.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn randomize_group(store: &mut ParamStore<f64>, g: GroupId, rng: &mut ChaCha8Rng, sigma: f64) {
    for v in store.values_mut(g) {
        *v = normal(rng, sigma);
    }
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference gradient suite
// ---------------------------------------------------------------------------

/// Dot a vector node with seeded constants and sum, giving a scalar loss that
/// mixes every output coordinate.
fn dot_loss(tape: &mut Tape<f64>, x: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let n = tape.len(x);
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = tape.constant(r);
    let m = tape.mul(x, c);
    tape.sum_all(m)
}

fn pick_coords(
    rng: &mut ChaCha8Rng,
    store: &ParamStore<f64>,
    g: GroupId,
    n: usize,
) -> Vec<(GroupId, usize)> {
    let len = store.len(g);
    (0..n.min(len))
        .map(|_| (g, rng.gen_range(0..len)))
        .collect()
}

/// trilerp: embeddings and query points of a fused 2x2x2 voxel block. Points
/// keep 10% margin from cell faces where the interpolant's derivative jumps.
fn fd_trilerp(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA000 + trial);
    let h = 0.04;
    let mut store = ParamStore::new();
    let mut vol = SparseVolume::new(&mut store, h, 0.01);
    let mut vertices = Vec::new();
    for x in 0..3i32 {
        for y in 0..3i32 {
            for z in 0..3i32 {
                let mut e = [0.0; EMBED_DIM];
                for v in &mut e {
                    *v = normal(&mut rng, 0.5);
                }
                vertices.push(([x, y, z], e, 1.0));
            }
        }
    }
    let mut voxels = Vec::new();
    for x in 0..2i32 {
        for y in 0..2i32 {
            for z in 0..2i32 {
                voxels.push([x, y, z]);
            }
        }
    }
    vol.fuse(
        &mut store,
        &LocalVoxelSet {
            voxel_size: h,
            voxels,
            vertices,
        },
    );
    let mut pts = Vec::new();
    for _ in 0..4 {
        for _ in 0..3 {
            let cell = rng.gen_range(0..2) as f64;
            pts.push(h * (cell + rng.gen_range(0.1..0.9)));
        }
    }
    let pg = store.add_group("query_points", pts, 0.0, true);
    let dot_seed = rng.gen::<u64>();
    let mut coords = pick_coords(&mut rng, &store, vol.emb_group, 10);
    coords.extend((0..12).map(|i| (pg, i)));
    finite_difference_check(&mut store, &coords, 1e-6, |s| {
        let mut tape = Tape::new();
        let p = tape.param_all(s, pg);
        let p_vals: Vec<[f64; 3]> = s
            .values(pg)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let (emb, in_vol) = vol.trilerp_graph(&mut tape, s, p, &p_vals);
        assert!(in_vol.iter().all(|b| *b));
        let loss = dot_loss(&mut tape, emb, &mut ChaCha8Rng::seed_from_u64(dot_seed));
        (tape, loss)
    })
}

/// project_features: plane grids and query points, points kept off the
/// bilinear cell boundaries.
fn fd_project_features(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB000 + trial);
    let mut store = ParamStore::new();
    let bounds = Aabb::new([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]);
    let cell = 0.25;
    let planes = TriPlanes::new(&mut store, bounds, cell, 0.01);
    for g in planes.groups {
        randomize_group(&mut store, g, &mut rng, 0.5);
    }
    let mut pts = Vec::new();
    for _ in 0..4 {
        for _ in 0..3 {
            let k = rng.gen_range(0..4) as f64;
            pts.push(-0.5 + cell * (k + rng.gen_range(0.1..0.9)));
        }
    }
    let pg = store.add_group("query_points", pts, 0.0, true);
    let dot_seed = rng.gen::<u64>();
    let mut coords: Vec<(GroupId, usize)> = Vec::new();
    for g in planes.groups {
        coords.extend(pick_coords(&mut rng, &store, g, 4));
    }
    coords.extend((0..12).map(|i| (pg, i)));
    finite_difference_check(&mut store, &coords, 1e-6, |s| {
        let mut tape = Tape::new();
        let p = tape.param_all(s, pg);
        let p_vals: Vec<[f64; 3]> = s
            .values(pg)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let f = planes.features_graph(&mut tape, s, p, &p_vals);
        let loss = dot_loss(&mut tape, f, &mut ChaCha8Rng::seed_from_u64(dot_seed));
        (tape, loss)
    })
}

/// Redraw decoder inputs until every hidden pre-activation sits at least
/// `margin` from the relu kink, so central differences stay one-sided.
fn screened_inputs(
    rng: &mut ChaCha8Rng,
    store: &ParamStore<f64>,
    w1: GroupId,
    b1: GroupId,
    n_in: usize,
    cols: usize,
) -> Vec<f64> {
    let margin = 1e-4;
    'redraw: for _ in 0..200 {
        let x: Vec<f64> = (0..n_in * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = store.values(w1);
        let b = store.values(b1);
        let hidden = b.len();
        for col in 0..cols {
            for row in 0..hidden {
                let mut a = b[row];
                for k in 0..n_in {
                    a += w[row * n_in + k] * x[col * n_in + k];
                }
                if a.abs() < margin {
                    continue 'redraw;
                }
            }
        }
        return x;
    }
    panic!("could not find kink-free decoder inputs");
}

fn fd_geometry_decoder(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC000 + trial);
    let mut store = ParamStore::new();
    let geo =
        voxslam_core::decoders::GeometryDecoder::new(&mut store, &mut rng.clone(), 0.01);
    for g in geo.groups() {
        randomize_group(&mut store, g, &mut rng, 0.3);
    }
    let n_in = voxslam_core::decoders::GEO_IN;
    let cols = 4;
    let x = screened_inputs(&mut rng, &store, geo.groups()[0], geo.groups()[1], n_in, cols);
    let xg = store.add_group("decoder_inputs", x, 0.0, true);
    let dot_seed = rng.gen::<u64>();
    let mut coords: Vec<(GroupId, usize)> = Vec::new();
    for g in geo.groups() {
        coords.extend(pick_coords(&mut rng, &store, g, 5));
    }
    coords.extend(pick_coords(&mut rng, &store, xg, 8));
    finite_difference_check(&mut store, &coords, 1e-6, |s| {
        let mut tape = Tape::new();
        let xn = tape.param_all(s, xg);
        let out = geo.sdf_graph(&mut tape, s, xn);
        let loss = dot_loss(&mut tape, out, &mut ChaCha8Rng::seed_from_u64(dot_seed));
        (tape, loss)
    })
}

fn fd_color_decoder(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD000 + trial);
    let mut store = ParamStore::new();
    let dec = voxslam_core::decoders::ColorDecoder::new(&mut store, &mut rng.clone(), 0.01);
    for g in dec.groups() {
        randomize_group(&mut store, g, &mut rng, 0.3);
    }
    let n_in = voxslam_core::decoders::COLOR_IN;
    let cols = 4;
    let x = screened_inputs(&mut rng, &store, dec.groups()[0], dec.groups()[1], n_in, cols);
    let xg = store.add_group("decoder_inputs", x, 0.0, true);
    let dot_seed = rng.gen::<u64>();
    let mut coords: Vec<(GroupId, usize)> = Vec::new();
    for g in dec.groups() {
        coords.extend(pick_coords(&mut rng, &store, g, 5));
    }
    coords.extend(pick_coords(&mut rng, &store, xg, 8));
    finite_difference_check(&mut store, &coords, 1e-6, |s| {
        let mut tape = Tape::new();
        let xn = tape.param_all(s, xg);
        let out = dec.color_graph(&mut tape, s, xn);
        let loss = dot_loss(&mut tape, out, &mut ChaCha8Rng::seed_from_u64(dot_seed));
        (tape, loss)
    })
}

/// bell weights + rendering: the per-sample weights node checks the bell
/// curve's gradient directly; depth/color check the normalized aggregation.
fn fd_render(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE000 + trial);
    let (n_rays, samples) = (3usize, 9usize);
    let ts = n_rays * samples;
    let tr = 0.08;
    let mut store = ParamStore::new();
    let s: Vec<f64> = (0..ts).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let c: Vec<f64> = (0..3 * ts).map(|_| rng.gen::<f64>()).collect();
    let sg = store.add_group("sdf_samples", s, 0.0, true);
    let cg = store.add_group("color_samples", c, 0.0, true);
    let mut z = Vec::with_capacity(ts);
    for _ in 0..n_rays {
        let mut ray: Vec<f64> = (0..samples).map(|_| rng.gen_range(0.5..2.0)).collect();
        ray.sort_by(f64::total_cmp);
        z.extend(ray);
    }
    let in_volume = vec![true; ts];
    let seeds: [u64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut coords = pick_coords(&mut rng, &store, sg, 10);
    coords.extend(pick_coords(&mut rng, &store, cg, 9));
    finite_difference_check(&mut store, &coords, 1e-6, |st| {
        let mut tape = Tape::new();
        let sn = tape.param_all(st, sg);
        let cn = tape.param_all(st, cg);
        let zn = tape.constant(z.clone());
        let (nodes, active) = render_from_nodes(&mut tape, sn, cn, zn, samples, tr, &in_volume);
        assert!(active.iter().all(|a| *a));
        let lw = dot_loss(&mut tape, nodes.weights, &mut ChaCha8Rng::seed_from_u64(seeds[0]));
        let ld = dot_loss(&mut tape, nodes.depth, &mut ChaCha8Rng::seed_from_u64(seeds[1]));
        let lc = dot_loss(&mut tape, nodes.color, &mut ChaCha8Rng::seed_from_u64(seeds[2]));
        let a = tape.add(lw, ld);
        let loss = tape.add(a, lc);
        (tape, loss)
    })
}

/// All four losses, each differentiated through its own head on a hand-built
/// rendered batch. Classification depends only on constant depths, so the
/// coefficient masks cannot move during the perturbations.
fn fd_losses(trial: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF000 + trial);
    let (n_rays, samples) = (4usize, 8usize);
    let ts = n_rays * samples;
    let tr = 0.08;
    let mut store = ParamStore::new();
    let s: Vec<f64> = (0..ts).map(|_| rng.gen_range(-1.2..1.2)).collect();
    let c: Vec<f64> = (0..3 * n_rays).map(|_| rng.gen::<f64>()).collect();
    let d: Vec<f64> = (0..n_rays).map(|_| rng.gen_range(0.8..1.2)).collect();
    let sg = store.add_group("sdf_samples", s, 0.0, true);
    let cg = store.add_group("ray_colors", c, 0.0, true);
    let dg = store.add_group("ray_depths", d, 0.0, true);
    let mut z = Vec::with_capacity(ts);
    let mut obs_depth: Vec<f64> = Vec::with_capacity(n_rays);
    for _ in 0..n_rays {
        let od: f64 = rng.gen_range(0.9..1.1);
        obs_depth.push(od);
        // spread samples across free space, the truncation band, and behind,
        // keeping 1e-3 clearance from the class boundaries at od +- tr
        let mut ray = Vec::with_capacity(samples);
        for _ in 0..samples {
            loop {
                let zv = rng.gen_range(od - 3.0 * tr..od + 2.0 * tr);
                if (zv - (od - tr)).abs() > 1e-3 && (zv - (od + tr)).abs() > 1e-3 {
                    ray.push(zv);
                    break;
                }
            }
        }
        ray.sort_by(f64::total_cmp);
        z.extend(ray);
    }
    let mut in_volume = vec![true; ts];
    in_volume[rng.gen_range(0..ts)] = false;
    let obs_color: Vec<f64> = (0..3 * n_rays).map(|_| rng.gen::<f64>()).collect();
    let weights = ObjectiveWeights {
        rgb: 10.0,
        depth: 0.1,
        fs: 20.0,
        sdf: 1000.0,
    };
    // pick sample coordinates that actually carry each sdf-band loss
    let mut fs_idx = Vec::new();
    let mut tr_idx = Vec::new();
    for ray in 0..n_rays {
        let base = ray * samples;
        for (k, class) in classify_samples(&z[base..base + samples], obs_depth[ray], tr)
            .iter()
            .enumerate()
        {
            if !in_volume[base + k] {
                continue;
            }
            match class {
                SampleClass::FreeSpace => fs_idx.push(base + k),
                SampleClass::Truncation => tr_idx.push(base + k),
                SampleClass::Behind => {}
            }
        }
    }
    assert!(!fs_idx.is_empty() && !tr_idx.is_empty());
    let build = |st: &ParamStore<f64>, pick: usize| -> (Tape<f64>, NodeId) {
        let mut tape = Tape::new();
        let sn = tape.param_all(st, sg);
        let cn = tape.param_all(st, cg);
        let dn = tape.param_all(st, dg);
        let wsum = tape.constant(vec![1.0; n_rays]);
        let rg = RenderGraph {
            sdf: sn,
            color: cn,
            depth: dn,
            weight_sum: wsum,
            z: z.clone(),
            obs_color: obs_color.clone(),
            obs_depth: obs_depth.clone(),
            in_volume: in_volume.clone(),
            ray_active: vec![true; n_rays],
            samples,
            n_rays,
        };
        let lg = build_loss_graph(&mut tape, &rg, &weights, tr).unwrap();
        let node = [lg.rgb, lg.depth, lg.fs, lg.sdf][pick];
        (tape, node)
    };
    let rgb_coords: Vec<_> = (0..3 * n_rays).map(|i| (cg, i)).collect();
    let depth_coords: Vec<_> = (0..n_rays).map(|i| (dg, i)).collect();
    let fs_coords: Vec<_> = fs_idx.iter().map(|&i| (sg, i)).collect();
    let sdf_coords: Vec<_> = tr_idx.iter().map(|&i| (sg, i)).collect();
    [
        finite_difference_check(&mut store, &rgb_coords, 1e-6, |st| build(st, 0)),
        finite_difference_check(&mut store, &depth_coords, 1e-6, |st| build(st, 1)),
        finite_difference_check(&mut store, &fs_coords, 1e-6, |st| build(st, 2)),
        finite_difference_check(&mut store, &sdf_coords, 1e-6, |st| build(st, 3)),
    ]
}

fn fd_quaternion(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1A000 + trial);
    let mut store = ParamStore::new();
    let q: Vec<f64> = loop {
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.4 {
            break q;
        }
    };
    let qg = store.add_group("quat", q, 0.0, true);
    let dirs: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dot_seed = rng.gen::<u64>();
    let coords: Vec<_> = (0..4).map(|i| (qg, i)).collect();
    finite_difference_check(&mut store, &coords, 1e-6, |s| {
        let mut tape = Tape::new();
        let qn = tape.param_all(s, qg);
        let dn = tape.constant(dirs.clone());
        let out = tape.rotate_points(qn, dn);
        let loss = dot_loss(&mut tape, out, &mut ChaCha8Rng::seed_from_u64(dot_seed));
        (tape, loss)
    })
}

/// End-to-end composite: full ray building, volume query, decoding, rendering
/// and the weighted objective, differentiated against every parameter family
/// at once. A trial straddling a trilinear cell face or a relu kink measures
/// the average of two one-sided derivatives, so an isolated failure is
/// retried once on an independent draw; a wrong gradient fails every draw.
fn fd_composite(trial: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2A000 + trial);
    let mut store = ParamStore::new();
    let mut scene_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let scene = Scene::new(
        &mut store,
        &mut scene_rng,
        &SceneParams {
            voxel_size: 0.1,
            tr: 0.08,
            plane_cell: 0.5,
            bounds: Aabb::new([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]),
            lr_embeddings: 0.01,
            lr_planes: 0.01,
            lr_decoders: 0.01,
        },
    );
    let mut vol = scene.volume;
    let mut vertices = Vec::new();
    let mut voxels = Vec::new();
    for x in -3..3i32 {
        for y in -3..3i32 {
            for z in -3..3i32 {
                voxels.push([x, y, z]);
            }
        }
    }
    for x in -3..4i32 {
        for y in -3..4i32 {
            for z in -3..4i32 {
                vertices.push(([x, y, z], [0.0; EMBED_DIM], 1.0));
            }
        }
    }
    vol.fuse(
        &mut store,
        &LocalVoxelSet {
            voxel_size: 0.1,
            voxels,
            vertices,
        },
    );
    // every family live: random embeddings, plane features, decoder weights.
    // Embeddings are kept small so some decoded surface crossings land near
    // the rays and the bell-weight sums stay well away from zero (division by
    // a near-vanishing weight sum is too ill-conditioned for an eps=1e-6
    // central difference, and production rays never render there either).
    let mut groups = vec![vol.emb_group];
    groups.extend(scene.planes.groups);
    groups.extend(scene.geometry.groups());
    groups.extend(scene.color.groups());
    for &g in &groups {
        let sigma = if g == vol.emb_group { 0.1 } else { 0.3 };
        randomize_group(&mut store, g, &mut rng, sigma);
    }
    let qg = store.add_group(
        "pose_q",
        vec![
            1.0 + normal(&mut rng, 0.05),
            normal(&mut rng, 0.05),
            normal(&mut rng, 0.05),
            normal(&mut rng, 0.05),
        ],
        0.0,
        true,
    );
    let tg = store.add_group(
        "pose_t",
        (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        0.0,
        true,
    );
    let k = Intrinsics {
        fx: 40.0,
        fy: 40.0,
        cx: 31.5,
        cy: 23.5,
        width: 64,
        height: 48,
        depth_scale: 5000.0,
    };
    let cfg = SamplingConfig {
        n_coarse: 8,
        n_fine: 4,
        ..SamplingConfig::default()
    };
    let pixels: Vec<(f64, f64, [f64; 3], f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..63.0),
                rng.gen_range(0.0..47.0),
                [rng.gen(), rng.gen(), rng.gen()],
                rng.gen_range(0.15..0.3),
            )
        })
        .collect();
    let jitter_seed: u64 = rng.gen();
    // Balanced term weights: the production weighting is a constant linear
    // combination (checked per term by the loss suite), while a 1000x term
    // scale here would push small-gradient coordinates below FD roundoff.
    let weights = ObjectiveWeights {
        rgb: 1.0,
        depth: 1.0,
        fs: 1.0,
        sdf: 1.0,
    };
    let build = |st: &ParamStore<f64>| -> (Tape<f64>, NodeId) {
        let mut tape = Tape::new();
        let qn = tape.param_all(st, qg);
        let tn = tape.param_all(st, tg);
        let mut jrng = ChaCha8Rng::seed_from_u64(jitter_seed);
        let fr = frame_rays(qn, tn, &pixels, &k, &cfg, &mut jrng);
        let rg = build_render_graph(
            &mut tape,
            st,
            &vol,
            &scene.planes,
            &scene.geometry,
            &scene.color,
            &[fr],
            &cfg,
        );
        let lg = build_loss_graph(&mut tape, &rg, &weights, 0.08).expect("no active rays");
        (tape, lg.total)
    };
    // require a few in-volume samples so the volume path is actually on
    {
        let mut tape = Tape::new();
        let qn = tape.param_all(&store, qg);
        let tn = tape.param_all(&store, tg);
        let mut jrng = ChaCha8Rng::seed_from_u64(jitter_seed);
        let fr = frame_rays(qn, tn, &pixels, &k, &cfg, &mut jrng);
        let rg = build_render_graph(
            &mut tape,
            &store,
            &vol,
            &scene.planes,
            &scene.geometry,
            &scene.color,
            &[fr],
            &cfg,
        );
        let conditioned = rg.in_volume.iter().filter(|b| **b).count() >= 8
            && tape.val(rg.weight_sum).iter().all(|w| *w >= 0.05);
        if !conditioned || build_loss_graph(&mut tape, &rg, &weights, 0.08).is_none() {
            return None; // degenerate or ill-conditioned draw, caller resamples
        }
    }
    let mut coords: Vec<(GroupId, usize)> = Vec::new();
    for &g in &groups {
        coords.extend(pick_coords(&mut rng, &store, g, 2));
    }
    coords.extend((0..4).map(|i| (qg, i)));
    coords.extend((0..3).map(|i| (tg, i)));
    // skip coordinates whose analytic gradient sits below FD roundoff noise
    {
        let (tape0, loss0) = build(&store);
        let mut grads = GradientBuffer::new(&store);
        tape0.backward(loss0, &store, &mut grads);
        coords.retain(|&(g, i)| grads.grad(g)[i].abs() >= 1e-4);
        if coords.len() < 10 {
            return None;
        }
    }
    Some(finite_difference_check(&mut store, &coords, 1e-6, build))
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn(u64) -> f64| {
        let mut max = 0.0f64;
        for t in 0..FD_TRIALS as u64 {
            max = max.max(f(t));
        }
        assert!(max < FD_TOL, "{name}: max relative error {max:.3e} >= {FD_TOL:e}");
        worst.push((name, max));
    };
    run("trilerp", &fd_trilerp);
    run("project_features", &fd_project_features);
    run("geometry_decoder", &fd_geometry_decoder);
    run("color_decoder", &fd_color_decoder);
    run("bell_weight+render", &fd_render);
    run("quaternion_to_rotation", &fd_quaternion);
    let mut loss_max = [0.0f64; 4];
    for t in 0..FD_TRIALS as u64 {
        let errs = fd_losses(t);
        for (m, e) in loss_max.iter_mut().zip(errs) {
            *m = m.max(e);
        }
    }
    for (name, m) in ["loss_rgb", "loss_depth", "loss_fs", "loss_sdf"]
        .iter()
        .zip(loss_max)
    {
        assert!(m < FD_TOL, "{name}: max relative error {m:.3e} >= {FD_TOL:e}");
        worst.push((name, m));
    }
    // composite pass with the single-retry policy for measure-zero straddles
    let mut retried = 0usize;
    let mut comp_max = 0.0f64;
    let mut t = 0u64;
    let mut done = 0usize;
    while done < FD_TRIALS {
        let Some(err) = fd_composite(t) else {
            t += 1;
            continue;
        };
        if err >= FD_TOL {
            retried += 1;
            let second = loop {
                t += 1;
                if let Some(e) = fd_composite(1_000_000 + t) {
                    break e;
                }
            };
            assert!(
                second < FD_TOL,
                "composite: trial failed twice on independent draws ({err:.3e}, {second:.3e})"
            );
            comp_max = comp_max.max(second);
        } else {
            comp_max = comp_max.max(err);
        }
        done += 1;
        t += 1;
    }
    assert!(retried <= 5, "composite: {retried} retried trials out of {FD_TRIALS}");
    worst.push(("composite", comp_max));
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient suite took {secs:.0}s (budget 120s)");
    let detail: Vec<String> = worst
        .iter()
        .map(|(n, m)| format!("{n} {m:.1e}"))
        .collect();
    println!(
        "criterion 1 (gradient suite): PASS — {FD_TRIALS} trials/op, max rel err < 1e-4 [{}], {secs:.0}s (< 120s)",
        detail.join(", ")
    );
}

// ---------------------------------------------------------------------------
// criterion 2: fusion suite
// ---------------------------------------------------------------------------

fn snapshot(
    store: &ParamStore<f64>,
    vol: &SparseVolume<f64>,
) -> std::collections::BTreeMap<VoxelKey, ([f64; EMBED_DIM], f64)> {
    let vals = store.values(vol.emb_group);
    vol.vertex_keys()
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let mut e = [0.0; EMBED_DIM];
            e.copy_from_slice(&vals[i * EMBED_DIM..(i + 1) * EMBED_DIM]);
            (*k, (e, vol.weights()[i]))
        })
        .collect()
}

#[test]
fn criterion_02_fusion_suite() {
    let h = 0.04;
    // worked examples
    {
        let mut store = ParamStore::new();
        let mut vol = SparseVolume::new(&mut store, h, 0.01);
        let e: [f64; EMBED_DIM] = [0.3, -1.2, 0.07, 2.5, -0.4, 0.9, -0.05, 1.1];
        vol.fuse(
            &mut store,
            &LocalVoxelSet {
                voxel_size: h,
                voxels: vec![[0, 0, 0]],
                vertices: vec![([0, 0, 0], e, 3.0)],
            },
        );
        let s = snapshot(&store, &vol)[&[0, 0, 0]];
        assert_eq!(s.0, e, "new vertex must adopt the local embedding exactly");
        assert_eq!(s.1, 3.0);
    }
    {
        let mut store = ParamStore::new();
        let mut vol = SparseVolume::new(&mut store, h, 0.01);
        for v in [1.0, 3.0] {
            vol.fuse(
                &mut store,
                &LocalVoxelSet {
                    voxel_size: h,
                    voxels: vec![],
                    vertices: vec![([0, 0, 0], [v; EMBED_DIM], 1.0)],
                },
            );
        }
        let s = snapshot(&store, &vol)[&[0, 0, 0]];
        assert_eq!(s.0, [2.0; EMBED_DIM], "equal-weight fuse must average");
        assert_eq!(s.1, 2.0);
    }
    {
        let mut store = ParamStore::new();
        let mut vol = SparseVolume::new(&mut store, h, 0.01);
        for (v, w) in [(0.2, 2.0), (0.8, 6.0)] {
            vol.fuse(
                &mut store,
                &LocalVoxelSet {
                    voxel_size: h,
                    voxels: vec![],
                    vertices: vec![([0, 0, 0], [v; EMBED_DIM], w)],
                },
            );
        }
        let s = snapshot(&store, &vol)[&[0, 0, 0]];
        let oracle = (0.2 * 2.0 + 0.8 * 6.0) / 8.0;
        assert_eq!(s.0, [oracle; EMBED_DIM]);
        assert!((s.0[0] - 0.65).abs() < 1e-12);
        assert_eq!(s.1, 8.0);
    }

    // order invariance over 10 random local sets with integer (point-count)
    // weights, plus per-fuse weight monotonicity
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut sets = Vec::new();
    for _ in 0..10 {
        let mut voxels = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..4 {
            let k = [
                rng.gen_range(0..3),
                rng.gen_range(0..3),
                rng.gen_range(0..3),
            ];
            if seen.insert(k) {
                voxels.push(k);
            }
        }
        let mut corner_set = std::collections::BTreeSet::new();
        for v in &voxels {
            for c in 0..8 {
                corner_set.insert([
                    v[0] + (c & 1),
                    v[1] + ((c >> 1) & 1),
                    v[2] + ((c >> 2) & 1),
                ]);
            }
        }
        let vertices: Vec<_> = corner_set
            .into_iter()
            .map(|k| {
                let mut e = [0.0; EMBED_DIM];
                for v in &mut e {
                    *v = normal(&mut rng, 1.0);
                }
                (k, e, rng.gen_range(1..5) as f64)
            })
            .collect();
        voxels.sort_unstable();
        sets.push(LocalVoxelSet {
            voxel_size: h,
            voxels,
            vertices,
        });
    }

    let fuse_in_order = |order: &[usize]| {
        let mut store = ParamStore::new();
        let mut vol = SparseVolume::new(&mut store, h, 0.01);
        for &i in order {
            let before = snapshot(&store, &vol);
            vol.fuse(&mut store, &sets[i]);
            let after = snapshot(&store, &vol);
            for (k, (_, w0)) in &before {
                assert!(after[k].1 >= *w0, "weight decreased at {k:?}");
            }
        }
        snapshot(&store, &vol)
    };

    let baseline = fuse_in_order(&(0..10).collect::<Vec<_>>());
    let mut orders: Vec<Vec<usize>> = vec![(0..10).rev().collect()];
    for _ in 0..5 {
        let mut o: Vec<usize> = (0..10).collect();
        for i in (1..o.len()).rev() {
            o.swap(i, rng.gen_range(0..=i));
        }
        orders.push(o);
    }
    for order in &orders {
        let got = fuse_in_order(order);
        assert_eq!(got.len(), baseline.len());
        for (k, (e0, w0)) in &baseline {
            let (e, w) = &got[k];
            assert_eq!(w, w0, "weights must be exactly order-independent at {k:?}");
            for d in 0..EMBED_DIM {
                let rel = (e[d] - e0[d]).abs() / e0[d].abs().max(1.0);
                assert!(rel <= 1e-6, "embedding relative drift {rel:.2e} at {k:?}[{d}]");
            }
        }
    }
    println!(
        "criterion 2 (fusion suite): PASS — 3 worked examples exact, {} permutations of 10 sets within 1e-6 (weights exact), weights monotone",
        orders.len()
    );
}

// ---------------------------------------------------------------------------
// criterion 3: rendering oracle on an analytic plane
// ---------------------------------------------------------------------------

/// Scene with passthrough decoders and a truncated-distance field for
/// `signed` injected at every vertex of the listed voxels (atanh-encoded so
/// the decoded vertex values are exact).
fn injected_scene(
    voxels: Vec<VoxelKey>,
    signed: impl Fn([f64; 3]) -> f64,
    h: f64,
    tr: f64,
) -> (ParamStore<f64>, Scene<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut scene = Scene::new(
        &mut store,
        &mut rng,
        &SceneParams {
            voxel_size: h,
            tr,
            plane_cell: 0.24,
            bounds: Aabb::new([-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]),
            lr_embeddings: 0.01,
            lr_planes: 0.01,
            lr_decoders: 0.01,
        },
    );
    let mut corner_set = std::collections::BTreeSet::new();
    for v in &voxels {
        for c in 0..8 {
            corner_set.insert([
                v[0] + (c & 1),
                v[1] + ((c >> 1) & 1),
                v[2] + ((c >> 2) & 1),
            ]);
        }
    }
    let vertices: Vec<_> = corner_set
        .into_iter()
        .map(|k| {
            let p = [k[0] as f64 * h, k[1] as f64 * h, k[2] as f64 * h];
            let s = (signed(p) / tr).clamp(-0.999, 0.999);
            let mut e = [0.0; EMBED_DIM];
            e[0] = s.atanh();
            (k, e, 1.0)
        })
        .collect();
    let mut sorted = voxels;
    sorted.sort_unstable();
    scene.volume.fuse(
        &mut store,
        &LocalVoxelSet {
            voxel_size: h,
            voxels: sorted,
            vertices,
        },
    );
    (store, scene)
}

#[test]
fn criterion_03_rendering_oracle() {
    let (h, tr) = (0.04, 0.08);
    let plane_z = 0.8;
    let mut voxels = Vec::new();
    for x in -16..16i32 {
        for y in -12..12i32 {
            for z in 17..23i32 {
                voxels.push([x, y, z]);
            }
        }
    }
    let (store, scene) = injected_scene(voxels, |p| plane_z - p[2], h, tr);

    let k = small_intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pixels: Vec<(f64, f64, [f64; 3], f64)> = (0..1000)
        .map(|_| {
            (
                rng.gen_range(0.0..(k.width - 1) as f64),
                rng.gen_range(0.0..(k.height - 1) as f64),
                [0.5, 0.5, 0.5],
                plane_z,
            )
        })
        .collect();
    let cfg = SamplingConfig::default();
    let mut tape = Tape::new();
    let qn = tape.constant(vec![1.0, 0.0, 0.0, 0.0]);
    let tn = tape.constant(vec![0.0, 0.0, 0.0]);
    let fr = frame_rays(qn, tn, &pixels, &k, &cfg, &mut rng);
    let obs = fr.obs_depth.clone();
    let rg = build_render_graph(
        &mut tape,
        &store,
        &scene.volume,
        &scene.planes,
        &scene.geometry,
        &scene.color,
        &[fr],
        &cfg,
    );
    assert_eq!(rg.excluded_rays(), 0, "every ray must render");
    let rendered = tape.val(rg.depth);
    let mut max_err = 0.0f64;
    let mut mean = 0.0;
    for (d_hat, d) in rendered.iter().zip(&obs) {
        let err = (d_hat - d).abs();
        max_err = max_err.max(err);
        mean += err;
    }
    mean /= obs.len() as f64;
    assert!(
        max_err < 0.02,
        "rendered depth error {max_err:.4} m exceeds 0.02 m"
    );
    println!(
        "criterion 3 (rendering oracle): PASS — 1000 rays, max |D̂-D| {max_err:.4} m (< 0.02), mean {mean:.4} m"
    );
}

// ---------------------------------------------------------------------------
// criterion 4: prior convergence on the synthetic room
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_prior_convergence() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("room16");
    let scene = AnalyticScene::named("room").unwrap();
    let traj = arc_trajectory(16, 0.5, 0.1, 0.08);
    generate_sequence(&scene, &traj, &small_intrinsics(), 0.0, 7, &data).unwrap();

    let f1 = |prior: PriorSelect, iters: usize, tag: &str| {
        let mut cfg = base_cfg(&data, &dir.path().join(tag));
        cfg.prior = prior;
        cfg.mapping.iters = iters;
        cfg.mapping.interval = 4;
        let summary = pipeline::run(&cfg).unwrap();
        summary.recon.map(|r| r.f1_pct).unwrap_or(0.0)
    };
    let prior5 = f1(PriorSelect::Analytic, 5, "prior5");
    let none5 = f1(PriorSelect::None, 5, "none5");
    let prior20 = f1(PriorSelect::Analytic, 20, "prior20");
    let secs = start.elapsed().as_secs_f64();

    let pass = prior5 >= none5 && prior5 >= prior20 - 2.0 && secs < 600.0;
    println!(
        "criterion 4 (prior convergence): {} — F1 prior@5it {prior5:.2}% >= zero-init@5it {none5:.2}%, within 2pt of prior@20it {prior20:.2}%, {secs:.0}s (< 600s)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(prior5 >= none5, "prior start must not lose to zero init ({prior5:.2} < {none5:.2})");
    assert!(
        prior5 >= prior20 - 2.0,
        "5-iteration score {prior5:.2} more than 2pt below 20-iteration {prior20:.2}"
    );
    assert!(secs < 600.0, "prior-convergence runs took {secs:.0}s (budget 600s)");
}

// ---------------------------------------------------------------------------
// criterion 5: end-to-end synthetic sequence
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_end_to_end_synthetic() {
    let _guard = heavy_lock();
    let data = room50();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let summary = pipeline::run(&base_cfg(data, &dir.path().join("out"))).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ate = summary.ate_rmse_cm.expect("ground truth present");
    let f1 = summary.recon.expect("ground-truth mesh present").f1_pct;
    let pass = ate < 1.0 && f1 > 90.0 && secs < 900.0;
    println!(
        "criterion 5 (end-to-end synthetic): {} — 50 frames, ATE {ate:.3} cm (< 1.0), F1@5cm {f1:.2}% (> 90), {secs:.0}s (< 900s)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(ate < 1.0, "ATE {ate:.3} cm over budget");
    assert!(f1 > 90.0, "F1 {f1:.2}% under budget");
    assert!(secs < 900.0, "run took {secs:.0}s (budget 900s)");
}

// ---------------------------------------------------------------------------
// criterion 6: mapping-strategy ablation
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_mapping_strategy_ablation() {
    let _guard = heavy_lock();
    let data = room50();
    let dir = tempfile::tempdir().unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0u64..5 {
        let ate = |strategy: MappingStrategy, tag: &str| {
            let mut cfg = base_cfg(data, &dir.path().join(format!("s{seed}_{tag}")));
            cfg.tracking.iters = 2;
            cfg.mapping.strategy = strategy;
            cfg.seed = seed;
            pipeline::run(&cfg).unwrap().ate_rmse_cm.unwrap()
        };
        let all = ate(MappingStrategy::AllFrames, "all");
        let key = ate(MappingStrategy::Keyframe, "key");
        if all <= key {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {all:.3} vs {key:.3}"));
    }
    let pass = wins >= 4;
    println!(
        "criterion 6 (mapping-strategy ablation): {} — all-frames ATE <= keyframe ATE in {wins}/5 runs [{}]",
        if pass { "PASS" } else { "FAIL" },
        rows.join("; ")
    );
    assert!(wins >= 4, "all-frames won only {wins}/5 seeded runs");
}

// ---------------------------------------------------------------------------
// criterion 7: evaluator vs brute-force oracles
// ---------------------------------------------------------------------------

/// Closed-form absolute trajectory error via the quaternion formulation of
/// the orthogonal Procrustes problem (eigenvector of the 4x4 correlation
/// form), independent of the SVD route the evaluator uses.
fn horn_rmse_cm(est: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let n = est.len() as f64;
    let mut ce = [0.0; 3];
    let mut cg = [0.0; 3];
    for (e, g) in est.iter().zip(gt) {
        for a in 0..3 {
            ce[a] += e[a] / n;
            cg[a] += g[a] / n;
        }
    }
    let mut s = [[0.0f64; 3]; 3];
    for (e, g) in est.iter().zip(gt) {
        for a in 0..3 {
            for b in 0..3 {
                s[a][b] += (e[a] - ce[a]) * (g[b] - cg[b]);
            }
        }
    }
    let m = na::Matrix4::new(
        s[0][0] + s[1][1] + s[2][2],
        s[1][2] - s[2][1],
        s[2][0] - s[0][2],
        s[0][1] - s[1][0],
        s[1][2] - s[2][1],
        s[0][0] - s[1][1] - s[2][2],
        s[0][1] + s[1][0],
        s[2][0] + s[0][2],
        s[2][0] - s[0][2],
        s[0][1] + s[1][0],
        -s[0][0] + s[1][1] - s[2][2],
        s[1][2] + s[2][1],
        s[0][1] - s[1][0],
        s[2][0] + s[0][2],
        s[1][2] + s[2][1],
        -s[0][0] - s[1][1] + s[2][2],
    );
    let eig = na::SymmetricEigen::new(m);
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let q = eig.eigenvectors.column(best);
    let r = quat_to_rot([q[0], q[1], q[2], q[3]]);
    let mut sq = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = [e[0] - ce[0], e[1] - ce[1], e[2] - ce[2]];
        let mut res = 0.0;
        for a in 0..3 {
            let rot = r[a][0] * de[0] + r[a][1] * de[1] + r[a][2] * de[2];
            let d = rot + cg[a] - g[a];
            res += d * d;
        }
        sq += res;
    }
    (sq / n).sqrt() * 100.0
}

fn sphere_mesh(center: [f64; 3], radius: f64, spacing: f64) -> TriangleMesh {
    let n = ((radius + 0.1) / spacing).ceil() as i64;
    let base = [
        (center[0] / spacing).floor() as i64,
        (center[1] / spacing).floor() as i64,
        (center[2] / spacing).floor() as i64,
    ];
    let mut cells = Vec::new();
    for x in -n..n {
        for y in -n..n {
            for z in -n..n {
                cells.push([base[0] + x, base[1] + y, base[2] + z]);
            }
        }
    }
    mesh_from_sdf(
        |p| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            Some((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius)
        },
        &cells,
        spacing,
    )
}

#[test]
fn criterion_07_evaluator_oracles() {
    // trajectory alignment against the quaternion-method oracle
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut max_ate_diff = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(3..=10);
        let e_pos: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let q = voxslam_core::pose::quat_normalize([
            rng.gen_range(0.2..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]);
        let r = quat_to_rot(q);
        let t = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        let g_pos: Vec<[f64; 3]> = e_pos
            .iter()
            .map(|p| {
                let mut out = [0.0; 3];
                for a in 0..3 {
                    out[a] = r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2]
                        + t[a]
                        + normal(&mut rng, 0.05);
                }
                out
            })
            .collect();
        let to_traj = |pos: &[[f64; 3]]| -> Trajectory {
            pos.iter()
                .enumerate()
                .map(|(i, p)| (i as f64, Pose::new([1.0, 0.0, 0.0, 0.0], *p)))
                .collect()
        };
        let got = ate_rmse(&to_traj(&e_pos), &to_traj(&g_pos)).unwrap();
        let oracle = horn_rmse_cm(&e_pos, &g_pos);
        max_ate_diff = max_ate_diff.max((got - oracle).abs());
    }
    assert!(
        max_ate_diff <= 1e-9,
        "ATE differs from the alignment oracle by {max_ate_diff:.2e} cm"
    );

    // surface metrics against exhaustive pairwise search on the same samples
    let mut max_pp_diff = 0.0f64;
    for (i, offset) in [0.0, 0.01, 0.03, 0.049, 0.051, 0.08, 0.2].iter().enumerate() {
        let rec = sphere_mesh([0.0, 0.0, 0.0], 0.3, 0.05);
        let gt = sphere_mesh([*offset, 0.0, 0.0], 0.3, 0.05);
        let n = 1000;
        let threshold = 0.05;
        let seed = 100 + i as u64;
        let got = mesh_metrics(&rec, &gt, n, threshold, seed).unwrap();
        let rec_pts = sample_surface(&rec, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let gt_pts = sample_surface(&gt, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let frac = |from: &[[f64; 3]], to: &[[f64; 3]]| {
            let hit = from
                .iter()
                .filter(|p| {
                    to.iter().any(|q| {
                        let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= threshold * threshold
                    })
                })
                .count();
            100.0 * hit as f64 / from.len() as f64
        };
        let acc = frac(&rec_pts, &gt_pts);
        let comp = frac(&gt_pts, &rec_pts);
        let f1 = if acc + comp > 0.0 {
            2.0 * acc * comp / (acc + comp)
        } else {
            0.0
        };
        for (a, b) in [
            (got.accuracy_pct, acc),
            (got.completeness_pct, comp),
            (got.f1_pct, f1),
        ] {
            max_pp_diff = max_pp_diff.max((a - b).abs());
        }
    }
    assert!(
        max_pp_diff <= 0.5,
        "surface metrics differ from brute force by {max_pp_diff:.3} pp"
    );
    println!(
        "criterion 7 (evaluator oracles): PASS — ATE within {max_ate_diff:.1e} cm of oracle over 50 instances (<= 1e-9), metrics within {max_pp_diff:.3} pp over 7 instances (<= 0.5)"
    );
}

// ---------------------------------------------------------------------------
// criterion 8: injected-sphere mesh
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_injected_sphere_mesh() {
    let (h, tr): (f64, f64) = (0.04, 0.08);
    let radius: f64 = 0.5;
    let mut voxels = Vec::new();
    let reach = ((radius + tr + h) / h).ceil() as i32;
    for x in -reach..reach {
        for y in -reach..reach {
            for z in -reach..reach {
                let c = [
                    (x as f64 + 0.5) * h,
                    (y as f64 + 0.5) * h,
                    (z as f64 + 0.5) * h,
                ];
                let d = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() - radius;
                if d.abs() <= tr + h {
                    voxels.push([x, y, z]);
                }
            }
        }
    }
    let (store, scene) = injected_scene(
        voxels,
        |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius,
        h,
        tr,
    );

    let mesh = extract_mesh(&store, &scene, h * 0.5);
    assert!(!mesh.is_empty(), "sphere mesh came out empty");

    let mut max_dev = 0.0f64;
    for v in &mesh.vertices {
        let d = ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - radius).abs();
        max_dev = max_dev.max(d);
    }
    assert!(
        max_dev <= h * 0.5,
        "mesh vertex {max_dev:.4} m off the sphere (allowed {})",
        h * 0.5
    );

    let allocated: std::collections::HashSet<VoxelKey> = scene.volume.voxel_keys().collect();
    let in_allocated = |p: [f64; 3]| -> bool {
        // a point on a voxel face belongs to any adjacent allocated voxel
        let slack = 1e-7;
        let lo = p.map(|v| ((v - slack) / h).floor() as i32);
        let hi = p.map(|v| ((v + slack) / h).floor() as i32);
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if allocated.contains(&[x, y, z]) {
                        return true;
                    }
                }
            }
        }
        false
    };
    let mut violations = 0usize;
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        let centroid = [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ];
        for p in [a, b, c, centroid] {
            if !in_allocated(p) {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0, "{violations} face points in unallocated cells");
    println!(
        "criterion 8 (injected-sphere mesh): PASS — {} vertices all within {:.3} m of the sphere (max dev {max_dev:.4}), 0 face points outside allocated cells",
        mesh.vertices.len(),
        h * 0.5
    );
}

// ---------------------------------------------------------------------------
// criterion 9: determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_determinism() {
    let _guard = heavy_lock();
    let data = room50();
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<u8> {
        let out = dir.path().join(tag);
        pipeline::run(&base_cfg(data, &out)).unwrap();
        std::fs::read(out.join("trajectory.txt")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert!(a == b, "trajectory.txt differs between identical runs");
    println!(
        "criterion 9 (determinism): PASS — two identical-seed runs produced byte-identical trajectory.txt ({} bytes)",
        a.len()
    );
}

// ---------------------------------------------------------------------------
// criterion 10: real-dataset smoke run (informational, non-gating)
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_tum_informational() {
    let root = match std::env::var_os("TUM_FR1_DESK_DIR") {
        Some(v) => PathBuf::from(v),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tum_fr1_desk"),
    };
    if !root.join("rgb.txt").is_file() {
        println!(
            "criterion 10 (tum fr1/desk): SKIP — dataset not present (set TUM_FR1_DESK_DIR or place it under data/tum_fr1_desk)"
        );
        return;
    }
    // reduced settings: first 120 frames via a trimmed index over symlinked
    // image directories
    let dir = tempfile::tempdir().unwrap();
    let trimmed = dir.path().join("trimmed");
    std::fs::create_dir_all(&trimmed).unwrap();
    for sub in ["rgb", "depth"] {
        if root.join(sub).is_dir() {
            std::os::unix::fs::symlink(root.join(sub).canonicalize().unwrap(), trimmed.join(sub))
                .unwrap();
        }
    }
    for (name, keep) in [("rgb.txt", 120), ("depth.txt", 140), ("groundtruth.txt", usize::MAX)] {
        let src = root.join(name);
        if !src.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&src).unwrap();
        let mut kept = 0usize;
        let mut out = String::new();
        for line in text.lines() {
            if !line.trim_start().starts_with('#') {
                if kept >= keep {
                    break;
                }
                kept += 1;
            }
            out.push_str(line);
            out.push('\n');
        }
        std::fs::write(trimmed.join(name), out).unwrap();
    }
    let mut cfg = base_cfg(&trimmed, &dir.path().join("out"));
    cfg.tracking.pixels = 512;
    cfg.mapping.interval = 10;
    cfg.mapping.iters = 10;
    cfg.mapping.pixels = 1024;
    cfg.mapping.db_pixels_per_frame = 1000;
    match pipeline::run(&cfg) {
        Ok(summary) => {
            let ate = summary
                .ate_rmse_cm
                .map(|a| format!("{a:.2} cm"))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "criterion 10 (tum fr1/desk): INFO — {} frames completed, ATE {ate} (reference result at full scale: 2.41 cm)",
                summary.frames
            );
        }
        Err(e) => {
            println!("criterion 10 (tum fr1/desk): INFO — run failed: {e}");
        }
    }
}
