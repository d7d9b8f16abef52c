//! Synthetic RGB-D sequences rendered from analytic signed-distance scenes
//! by sphere tracing. Output is the exact on-disk directory layout frame_io
//! reads (intrinsics.txt, color/, depth/, groundtruth.txt) plus a
//! ground-truth surface mesh restricted to the observed region.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::frame_io::{format_trajectory, Frame, Intrinsics};
use crate::geom::{add3, cross3, dot3, norm3, normalize3, scale3, sub3, V3};
use crate::hash::FastSet;
use crate::mesher::{mesh_from_sdf, save_ply};
use crate::pose::Pose;

const TRACE_TOL: f64 = 1e-6;
const MAX_RANGE: f64 = 10.0;
const MAX_STEPS: usize = 1024;

/// Exact signed distance fields composed from primitives. All primitives are
/// Lipschitz-1, so sphere tracing never oversteps a surface.
#[derive(Debug, Clone)]
pub enum Sdf {
    /// dot(normal, p) - offset, positive on the normal side.
    Plane { normal: V3<f64>, offset: f64 },
    Sphere { center: V3<f64>, radius: f64 },
    Box { center: V3<f64>, half: V3<f64> },
    Union(Vec<Sdf>),
}

impl Sdf {
    pub fn eval(&self, p: V3<f64>) -> f64 {
        match self {
            Sdf::Plane { normal, offset } => dot3(*normal, p) - offset,
            Sdf::Sphere { center, radius } => norm3(sub3(p, *center)) - radius,
            Sdf::Box { center, half } => {
                let d = sub3(p, *center);
                let q = [
                    d[0].abs() - half[0],
                    d[1].abs() - half[1],
                    d[2].abs() - half[2],
                ];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                norm3(outside) + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Sdf::Union(parts) => parts
                .iter()
                .map(|s| s.eval(p))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Interior of an axis-aligned cube room of the given half-extent:
    /// union of the six walls seen from inside (positive inside the room).
    pub fn room(half: f64) -> Sdf {
        let mut walls = Vec::new();
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut n = [0.0; 3];
                n[axis] = -sign;
                walls.push(Sdf::Plane {
                    normal: n,
                    offset: -half,
                });
            }
        }
        Sdf::Union(walls)
    }
}

#[derive(Debug, Clone)]
pub enum Albedo {
    Uniform([f64; 3]),
    /// 3-D checkerboard over world position.
    Checker {
        scale: f64,
        a: [f64; 3],
        b: [f64; 3],
    },
}

impl Albedo {
    pub fn eval(&self, p: V3<f64>) -> [f64; 3] {
        match self {
            Albedo::Uniform(c) => *c,
            Albedo::Checker { scale, a, b } => {
                let parity = (p[0] / scale).floor() + (p[1] / scale).floor()
                    + (p[2] / scale).floor();
                if (parity as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyticScene {
    pub sdf: Sdf,
    pub albedo: Albedo,
}

impl AnalyticScene {
    /// Built-in scenes for the CLI and acceptance harness.
    ///
    /// - "room": 2 m cube room with a 0.25 m sphere at the center
    /// - "plane": single wall 2 m in front of the origin, facing -z
    /// - "sphere": lone 0.5 m sphere 1.5 m ahead
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "room" => Some(Self {
                sdf: Sdf::Union(vec![
                    Sdf::room(1.0),
                    Sdf::Sphere {
                        center: [0.0, 0.0, 0.0],
                        radius: 0.25,
                    },
                ]),
                albedo: Albedo::Checker {
                    scale: 0.25,
                    a: [0.82, 0.38, 0.25],
                    b: [0.20, 0.42, 0.78],
                },
            }),
            "plane" => Some(Self {
                sdf: Sdf::Plane {
                    normal: [0.0, 0.0, -1.0],
                    offset: -2.0,
                },
                albedo: Albedo::Checker {
                    scale: 0.25,
                    a: [0.9, 0.9, 0.85],
                    b: [0.15, 0.2, 0.3],
                },
            }),
            "sphere" => Some(Self {
                sdf: Sdf::Sphere {
                    center: [0.0, 0.0, 1.5],
                    radius: 0.5,
                },
                albedo: Albedo::Uniform([0.7, 0.5, 0.3]),
            }),
            _ => None,
        }
    }

    /// Sphere-trace a ray; returns the hit distance along the unit `dir`.
    pub fn trace(&self, origin: V3<f64>, dir: V3<f64>) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..MAX_STEPS {
            let p = add3(origin, scale3(dir, t));
            let d = self.sdf.eval(p);
            if d < TRACE_TOL {
                return Some(t);
            }
            t += d;
            if t > MAX_RANGE {
                return None;
            }
        }
        None
    }
}

/// Render one frame in memory at full precision: no quantization, no noise.
/// Misses get depth 0 (invalid) and black color.
pub fn render_frame(
    scene: &AnalyticScene,
    pose: &Pose<f64>,
    k: &Intrinsics,
    index: usize,
) -> Frame<f64> {
    let rot = pose.rotation();
    let n_px = (k.width as usize) * (k.height as usize);
    let mut color = vec![[0.0f64; 3]; n_px];
    let mut depth = vec![0.0f64; n_px];
    for py in 0..k.height {
        for px in 0..k.width {
            let dir_cam = k.pixel_dir(px as f64, py as f64);
            let n = norm3(dir_cam);
            let unit_cam = scale3(dir_cam, 1.0 / n);
            let dir_world = crate::geom::mat3_mul_v3(&rot, unit_cam);
            if let Some(t) = scene.trace(pose.t, dir_world) {
                let i = (py * k.width + px) as usize;
                let p = add3(pose.t, scale3(dir_world, t));
                color[i] = scene.albedo.eval(p);
                depth[i] = t * unit_cam[2];
            }
        }
    }
    Frame::new(index, index as f64, k.width, k.height, color, depth).expect("synthetic frame")
}

/// Camera-to-world pose at `eye` with +z toward `target` and image-y
/// pointing down with respect to world `up`.
pub fn look_at(eye: V3<f64>, target: V3<f64>, up: V3<f64>) -> Pose<f64> {
    let z = normalize3(sub3(target, eye));
    let x = normalize3(cross3(z, up));
    let y = cross3(z, x);
    let r = [
        [x[0], y[0], z[0]],
        [x[1], y[1], z[1]],
        [x[2], y[2], z[2]],
    ];
    Pose::from_matrix(&r, eye)
}

/// `frames` poses sweeping `arc` radians of a horizontal circle of `radius`
/// around the origin, always looking at the center, with a gentle vertical
/// bob. Keep the per-frame step (`arc/frames`) small for trackable motion.
pub fn arc_trajectory(frames: usize, radius: f64, bob: f64, arc: f64) -> Vec<Pose<f64>> {
    (0..frames)
        .map(|i| {
            let th = arc * i as f64 / frames as f64;
            let eye = [radius * th.cos(), radius * th.sin(), bob * th.sin()];
            look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        })
        .collect()
}

/// Full orbit around the origin; see [`arc_trajectory`].
pub fn circular_trajectory(frames: usize, radius: f64, bob: f64) -> Vec<Pose<f64>> {
    arc_trajectory(frames, radius, bob, 2.0 * std::f64::consts::PI)
}

pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 250.0,
        fy: 250.0,
        cx: 159.5,
        cy: 119.5,
        width: 320,
        height: 240,
        depth_scale: 5000.0,
    }
}

/// Spacing of the ground-truth surface mesh and of the observed-cell culling.
const GT_MESH_RES: f64 = 0.02;

/// Render the trajectory through the scene and write a directory dataset:
/// quantized 16-bit depth (invalid = 0), 8-bit color, groundtruth.txt echoing
/// the input poses, and gt_mesh.ply — the analytic surface meshed only where
/// some frame observed it, so reconstruction metrics compare like with like.
pub fn generate_sequence(
    scene: &AnalyticScene,
    trajectory: &[Pose<f64>],
    k: &Intrinsics,
    noise_sigma: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    assert!(!trajectory.is_empty(), "empty trajectory");
    k.validate()?;
    std::fs::create_dir_all(out.join("color"))?;
    std::fs::create_dir_all(out.join("depth"))?;
    std::fs::write(
        out.join("intrinsics.txt"),
        format!(
            "{} {} {} {} {} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale
        ),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut observed: FastSet<[i64; 3]> = FastSet::default();

    for (i, pose) in trajectory.iter().enumerate() {
        let rot = pose.rotation();
        let mut color = image::RgbImage::new(k.width, k.height);
        let mut depth =
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(k.width, k.height);
        for py in 0..k.height {
            for px in 0..k.width {
                let dir_cam = k.pixel_dir(px as f64, py as f64);
                let n = norm3(dir_cam);
                let unit_cam = scale3(dir_cam, 1.0 / n);
                let dir_world = crate::geom::mat3_mul_v3(&rot, unit_cam);
                let hit = scene.trace(pose.t, dir_world);
                let (rgb, z) = match hit {
                    Some(t) => {
                        let p = add3(pose.t, scale3(dir_world, t));
                        // camera-frame depth of the hit, not ray length
                        let z = t * unit_cam[2];
                        if i == 0 || px % 2 == 0 && py % 2 == 0 {
                            let c = [
                                (p[0] / GT_MESH_RES).floor() as i64,
                                (p[1] / GT_MESH_RES).floor() as i64,
                                (p[2] / GT_MESH_RES).floor() as i64,
                            ];
                            for dx in -1..=1 {
                                for dy in -1..=1 {
                                    for dz in -1..=1 {
                                        observed.insert([c[0] + dx, c[1] + dy, c[2] + dz]);
                                    }
                                }
                            }
                        }
                        (scene.albedo.eval(p), z)
                    }
                    None => ([0.0; 3], 0.0),
                };
                let z = if z > 0.0 && noise_sigma > 0.0 {
                    (z + noise_sigma * normal.sample(&mut rng)).max(0.0)
                } else {
                    z
                };
                let raw = (z * k.depth_scale).round().clamp(0.0, 65535.0) as u16;
                depth.put_pixel(px, py, image::Luma([raw]));
                color.put_pixel(
                    px,
                    py,
                    image::Rgb(rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)),
                );
            }
        }
        color
            .save(out.join(format!("color/{i:06}.png")))
            .map_err(crate::error::Error::Image)?;
        depth
            .save(out.join(format!("depth/{i:06}.png")))
            .map_err(crate::error::Error::Image)?;
    }

    let traj: Vec<(f64, Pose<f64>)> = trajectory
        .iter()
        .enumerate()
        .map(|(i, p)| (i as f64, *p))
        .collect();
    std::fs::write(out.join("groundtruth.txt"), format_trajectory(&traj))?;

    let mut cells: Vec<[i64; 3]> = observed.into_iter().collect();
    cells.sort_unstable();
    let gt_mesh = mesh_from_sdf(|p| Some(scene.sdf.eval(p)), &cells, GT_MESH_RES);
    save_ply(&gt_mesh, &out.join("gt_mesh.ply"))?;
    Ok(())
}
