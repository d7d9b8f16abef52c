//! Trajectory and reconstruction metrics: rigidly aligned ATE RMSE, and
//! accuracy/completeness/F1 between surface-sampled meshes.

use nalgebra as na;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::V3;
use crate::hash::FastMap;
use crate::mesher::TriangleMesh;
use crate::pose::Pose;

/// Timestamped poses, ascending.
pub type Trajectory = Vec<(f64, Pose<f64>)>;

/// Greedy unique nearest-timestamp association within `tol` seconds.
/// Candidate pairs are ranked by |dt| so each side is matched at most once.
pub fn associate(est: &Trajectory, gt: &Trajectory, tol: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (te, _)) in est.iter().enumerate() {
        let p = gt.partition_point(|(tg, _)| tg < te);
        for j in [p.wrapping_sub(1), p] {
            if let Some((tg, _)) = gt.get(j) {
                let dt = (te - tg).abs();
                if dt <= tol {
                    candidates.push((dt, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Closed-form rigid (no-scale) least-squares alignment `R e + t ~ g`.
fn umeyama_rigid(e: &[V3<f64>], g: &[V3<f64>]) -> (na::Matrix3<f64>, na::Vector3<f64>) {
    let n = e.len() as f64;
    let mean = |pts: &[V3<f64>]| {
        let mut m = na::Vector3::zeros();
        for p in pts {
            m += na::Vector3::new(p[0], p[1], p[2]);
        }
        m / n
    };
    let me = mean(e);
    let mg = mean(g);
    let mut h = na::Matrix3::zeros();
    for (pe, pg) in e.iter().zip(g) {
        let de = na::Vector3::new(pe[0], pe[1], pe[2]) - me;
        let dg = na::Vector3::new(pg[0], pg[1], pg[2]) - mg;
        h += de * dg.transpose();
    }
    let svd = na::SVD::new(h, true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = na::Matrix3::identity();
    d[(2, 2)] = (vt.transpose() * u.transpose()).determinant().signum();
    let r = vt.transpose() * d * u.transpose();
    let t = mg - r * me;
    (r, t)
}

fn associated_positions(
    est: &Trajectory,
    gt: &Trajectory,
) -> Result<(Vec<V3<f64>>, Vec<V3<f64>>)> {
    let pairs = associate(est, gt, 0.02);
    if pairs.len() < 3 {
        return Err(Error::Eval(format!(
            "only {} associated poses, need at least 3",
            pairs.len()
        )));
    }
    let e = pairs.iter().map(|&(i, _)| est[i].1.t).collect();
    let g = pairs.iter().map(|&(_, j)| gt[j].1.t).collect();
    Ok((e, g))
}

/// Rigid transform (row-major R, t) mapping estimated positions onto ground
/// truth in the least-squares sense — the same alignment [`ate_rmse`] uses.
/// Lets callers carry map geometry into ground-truth coordinates.
pub fn rigid_alignment(est: &Trajectory, gt: &Trajectory) -> Result<([[f64; 3]; 3], V3<f64>)> {
    let (e, g) = associated_positions(est, gt)?;
    let (r, t) = umeyama_rigid(&e, &g);
    let rows = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    Ok((rows, [t[0], t[1], t[2]]))
}

/// Absolute trajectory error after rigid alignment, in centimeters.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let (e, g) = associated_positions(est, gt)?;
    let (r, t) = umeyama_rigid(&e, &g);
    let mut sq = 0.0;
    for (pe, pg) in e.iter().zip(&g) {
        let aligned = r * na::Vector3::new(pe[0], pe[1], pe[2]) + t;
        let res = aligned - na::Vector3::new(pg[0], pg[1], pg[2]);
        sq += res.norm_squared();
    }
    Ok((sq / e.len() as f64).sqrt() * 100.0)
}

#[derive(Debug, Clone, Copy)]
pub struct ReconMetrics {
    pub accuracy_pct: f64,
    pub completeness_pct: f64,
    pub f1_pct: f64,
}

/// Area-weighted uniform surface sampling; the rng draws two barycentric
/// coordinates and one triangle pick per point.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, rng: &mut ChaCha8Rng) -> Vec<V3<f64>> {
    assert!(!mesh.is_empty() && !mesh.triangles.is_empty(), "empty mesh");
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += mesh.triangle_area(*t);
        cum.push(total);
    }
    assert!(total > 0.0, "degenerate mesh");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(0.0..total);
        let ti = cum.partition_point(|&c| c <= x).min(cum.len() - 1);
        let [a, b, c] = mesh.triangles[ti].map(|i| mesh.vertices[i as usize]);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let su = r1.sqrt();
        let (wa, wb, wc) = (1.0 - su, su * (1.0 - r2), su * r2);
        out.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
    }
    out
}

/// Uniform-grid point set supporting exact "any point within r" queries for
/// r <= cell size.
struct GridIndex {
    cell: f64,
    map: FastMap<[i64; 3], Vec<u32>>,
    points: Vec<V3<f64>>,
}

impl GridIndex {
    fn new(points: Vec<V3<f64>>, cell: f64) -> Self {
        let mut map: FastMap<[i64; 3], Vec<u32>> = FastMap::default();
        for (i, p) in points.iter().enumerate() {
            let key = [
                (p[0] / cell).floor() as i64,
                (p[1] / cell).floor() as i64,
                (p[2] / cell).floor() as i64,
            ];
            map.entry(key).or_default().push(i as u32);
        }
        Self { cell, map, points }
    }

    fn any_within(&self, p: V3<f64>, r: f64) -> bool {
        debug_assert!(r <= self.cell + 1e-12);
        let r2 = r * r;
        let base = [
            (p[0] / self.cell).floor() as i64,
            (p[1] / self.cell).floor() as i64,
            (p[2] / self.cell).floor() as i64,
        ];
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.map.get(&[base[0] + dx, base[1] + dy, base[2] + dz])
                    else {
                        continue;
                    };
                    for &i in ids {
                        let q = self.points[i as usize];
                        let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2 {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Sample both meshes and report the fraction of each side's samples that
/// have a neighbor on the other side within `threshold` meters. Each mesh is
/// sampled with its own rng seeded identically, so swapping the arguments
/// swaps accuracy and completeness exactly.
pub fn mesh_metrics(
    rec: &TriangleMesh,
    gt: &TriangleMesh,
    n: usize,
    threshold: f64,
    seed: u64,
) -> Result<ReconMetrics> {
    if rec.triangles.is_empty() || gt.triangles.is_empty() {
        return Err(Error::Eval("mesh metrics on an empty mesh".into()));
    }
    let rec_pts = sample_surface(rec, n, &mut ChaCha8Rng::seed_from_u64(seed));
    let gt_pts = sample_surface(gt, n, &mut ChaCha8Rng::seed_from_u64(seed));
    let rec_idx = GridIndex::new(rec_pts.clone(), threshold);
    let gt_idx = GridIndex::new(gt_pts.clone(), threshold);
    let frac = |pts: &[V3<f64>], idx: &GridIndex| {
        let hit = pts.iter().filter(|p| idx.any_within(**p, threshold)).count();
        100.0 * hit as f64 / pts.len() as f64
    };
    let accuracy_pct = frac(&rec_pts, &gt_idx);
    let completeness_pct = frac(&gt_pts, &rec_idx);
    let f1_pct = if accuracy_pct + completeness_pct > 0.0 {
        2.0 * accuracy_pct * completeness_pct / (accuracy_pct + completeness_pct)
    } else {
        0.0
    };
    Ok(ReconMetrics {
        accuracy_pct,
        completeness_pct,
        f1_pct,
    })
}
