//! Ray generation, depth-guided sampling, bell-shaped SDF weighting, and
//! weight-normalized rendering of color and depth.
//!
//! Observed depths are z-values (distance along the optical axis); rays use
//! unit directions, so the observation is converted to distance-along-ray at
//! ray construction and everything downstream works in one unit.

use rand::Rng;

use crate::decoders::{normalize_points_graph, ColorDecoder, GeometryDecoder};
use crate::diffcore::{NodeId, ParamStore, Tape};
use crate::frame_io::Intrinsics;
use crate::geom::{mat3_mul_v3, norm3, scale3, V3};
use crate::pose::Pose;
use crate::real::{r, Real};
use crate::sparse_volume::SparseVolume;
use crate::triplane::TriPlanes;

/// A ray whose weight sum falls below this is excluded from losses.
pub const MIN_WEIGHT_SUM: f64 = 1e-12;
/// SDF stand-in for samples outside the allocated volume: the saturated
/// free-space value in truncation units (one full truncation distance), so
/// their bell weights are vanishing (~4e-6).
pub const OUT_OF_VOLUME_SDF: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct SamplingConfig<T> {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub n1: T,
    pub n2: T,
    pub tr: T,
}

impl<T: Real> Default for SamplingConfig<T> {
    fn default() -> Self {
        Self {
            n_coarse: 32,
            n_fine: 11,
            n1: r(0.2),
            n2: r(1.02),
            tr: r(0.08),
        }
    }
}

impl<T: Real> SamplingConfig<T> {
    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_fine
    }
}

#[derive(Debug, Clone)]
pub struct Ray<T> {
    pub origin: V3<T>,
    pub dir: V3<T>,
    pub frame_id: usize,
    pub u: f64,
    pub v: f64,
    /// Observed depth converted to distance along the (unit) ray.
    pub depth: T,
    pub color: [T; 3],
}

/// Build a ray through pixel (u, v) with observed z-depth `depth` and pixel
/// color attached for supervision.
pub fn generate_ray<T: Real>(
    u: f64,
    v: f64,
    color: [T; 3],
    depth: T,
    k: &Intrinsics,
    pose: &Pose<T>,
    frame_id: usize,
) -> Ray<T> {
    let d_cam = pixel_dir_cam::<T>(u, v, k);
    let n = norm3(d_cam);
    let dir = mat3_mul_v3(&pose.rotation(), scale3(d_cam, T::one() / n));
    Ray {
        origin: pose.t,
        dir,
        frame_id,
        u,
        v,
        depth: depth * n,
        color,
    }
}

/// Unnormalized camera-frame direction ((u-cx)/fx, (v-cy)/fy, 1).
#[inline]
pub fn pixel_dir_cam<T: Real>(u: f64, v: f64, k: &Intrinsics) -> V3<T> {
    [
        T::from_f64((u - k.cx) / k.fx),
        T::from_f64((v - k.cy) / k.fy),
        T::one(),
    ]
}

/// w = sigmoid(s/tr) * sigmoid(-s/tr), peaked at the surface. With s in
/// truncation units the division by tr acts as a sharpening constant,
/// concentrating weight within a few centimeters of the zero crossing.
#[inline]
pub fn bell_weight<T: Real>(s: T, tr: T) -> T {
    let a = s / tr;
    let sig = |v: T| T::one() / (T::one() + (-v).exp());
    sig(a) * sig(-a)
}

/// N_c stratified depths across [n1*D, n2*D] plus N_f uniform depths within
/// the truncation band around D, merged ascending. All depths positive.
pub fn sample_ray<T: Real>(depth: T, cfg: &SamplingConfig<T>, rng: &mut impl Rng) -> Vec<T> {
    assert!(depth > T::zero());
    let mut z = Vec::with_capacity(cfg.samples_per_ray());
    let lo = cfg.n1 * depth;
    let hi = cfg.n2 * depth;
    let step = (hi - lo) / T::from_usize(cfg.n_coarse);
    for i in 0..cfg.n_coarse {
        let u: T = r(rng.gen::<f64>());
        z.push(lo + step * (T::from_usize(i) + u));
    }
    let eps = r::<T>(1e-4);
    let blo = (depth - cfg.tr).max(eps);
    let bhi = depth + cfg.tr;
    for _ in 0..cfg.n_fine {
        let u: T = r(rng.gen::<f64>());
        z.push(blo + (bhi - blo) * u);
    }
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    z
}

/// Weight-normalized color/depth from per-sample values; None when the raw
/// weight sum is below [`MIN_WEIGHT_SUM`].
pub fn render_samples<T: Real>(s: &[T], c: &[[T; 3]], z: &[T], tr: T) -> Option<([T; 3], T)> {
    let mut wsum = T::zero();
    let mut col = [T::zero(); 3];
    let mut dep = T::zero();
    for i in 0..s.len() {
        let w = bell_weight(s[i], tr);
        wsum = wsum + w;
        for d in 0..3 {
            col[d] = col[d] + w * c[i][d];
        }
        dep = dep + w * z[i];
    }
    if wsum.to_f64() < MIN_WEIGHT_SUM {
        return None;
    }
    Some((
        [col[0] / wsum, col[1] / wsum, col[2] / wsum],
        dep / wsum,
    ))
}

/// Graph-route rendering from sdf [1 x ts], color [3 x ts], depth [1 x ts]
/// nodes (ts = n_rays * samples). Rays below the weight threshold or with no
/// in-volume sample are gated to benign constants and reported inactive.
pub struct RenderedNodes {
    pub weights: NodeId,
    pub weight_sum: NodeId,
    pub color: NodeId,
    pub depth: NodeId,
}

pub fn render_from_nodes<T: Real>(
    tape: &mut Tape<T>,
    s: NodeId,
    c: NodeId,
    z: NodeId,
    samples: usize,
    tr: T,
    in_volume: &[bool],
) -> (RenderedNodes, Vec<bool>) {
    let ts = tape.len(s);
    assert_eq!(ts % samples, 0);
    let n_rays = ts / samples;
    assert_eq!(in_volume.len(), ts);
    let a = tape.scale(s, T::one() / tr);
    let sp = tape.sigmoid(a);
    let an = tape.scale(a, -T::one());
    let sn = tape.sigmoid(an);
    let w = tape.mul(sp, sn);
    let ones = tape.constant(vec![T::one(); ts]);
    let wsum = tape.segment_dot(ones, w, 1, samples);

    let mut active = vec![false; n_rays];
    for (j, act) in active.iter_mut().enumerate() {
        let any_in = in_volume[j * samples..(j + 1) * samples].iter().any(|b| *b);
        *act = any_in && tape.val(wsum)[j].to_f64() >= MIN_WEIGHT_SUM;
    }
    // inactive rays get weight sum pinned to 1 so recip stays finite; their
    // rendered values are meaningless and must be masked out of losses
    let gate: Vec<T> = active
        .iter()
        .map(|a| if *a { T::one() } else { T::zero() })
        .collect();
    let offset: Vec<T> = active
        .iter()
        .map(|a| if *a { T::zero() } else { T::one() })
        .collect();
    let gn = tape.constant(gate);
    let on = tape.constant(offset);
    let gated = tape.mul(wsum, gn);
    let wsafe = tape.add(gated, on);
    let inv = tape.recip(wsafe);
    let csum = tape.segment_dot(c, w, 3, samples);
    let color = tape.broadcast_col_mul(csum, inv, 3);
    let zsum = tape.segment_dot(z, w, 1, samples);
    let depth = tape.mul(zsum, inv);
    (
        RenderedNodes {
            weights: w,
            weight_sum: wsum,
            color,
            depth,
        },
        active,
    )
}

/// Rays of a single frame, wired to that frame's pose nodes.
pub struct FrameRays<T> {
    /// [4] quaternion node and [3] translation node (param or constant).
    pub q: NodeId,
    pub t: NodeId,
    /// [3 x n_rays] unnormalized camera-frame directions.
    pub dirs_cam: Vec<T>,
    /// Observed distance-along-ray depth per ray.
    pub obs_depth: Vec<T>,
    /// [3 x n_rays] observed colors.
    pub obs_color: Vec<T>,
    /// n_rays * samples sample depths, ascending within each ray.
    pub z: Vec<T>,
}

/// Full differentiable pipeline for a batch of rays across frames: sample
/// points from pose nodes, query volume + planes, decode, render.
pub struct RenderGraph<T> {
    pub sdf: NodeId,
    pub color: NodeId,
    pub depth: NodeId,
    pub weight_sum: NodeId,
    pub z: Vec<T>,
    pub obs_color: Vec<T>,
    pub obs_depth: Vec<T>,
    pub in_volume: Vec<bool>,
    pub ray_active: Vec<bool>,
    pub samples: usize,
    pub n_rays: usize,
}

impl<T> RenderGraph<T> {
    pub fn excluded_rays(&self) -> usize {
        self.ray_active.iter().filter(|a| !**a).count()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_render_graph<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    vol: &SparseVolume<T>,
    planes: &TriPlanes<T>,
    geo: &GeometryDecoder,
    coldec: &ColorDecoder,
    frames: &[FrameRays<T>],
    cfg: &SamplingConfig<T>,
) -> RenderGraph<T> {
    let samples = cfg.samples_per_ray();
    let mut point_nodes = Vec::with_capacity(frames.len());
    let mut z = Vec::new();
    let mut obs_color = Vec::new();
    let mut obs_depth = Vec::new();
    for fr in frames {
        let n_rays = fr.dirs_cam.len() / 3;
        assert_eq!(fr.z.len(), n_rays * samples);
        let dirs = tape.constant(fr.dirs_cam.clone());
        let rotated = tape.rotate_points(fr.q, dirs);
        let unit = tape.normalize_cols3(rotated);
        let pts = tape.ray_points(fr.t, unit, fr.z.clone(), samples);
        point_nodes.push(pts);
        z.extend_from_slice(&fr.z);
        obs_color.extend_from_slice(&fr.obs_color);
        obs_depth.extend_from_slice(&fr.obs_depth);
    }
    let p = if point_nodes.len() == 1 {
        point_nodes[0]
    } else {
        tape.concat_cols(&point_nodes)
    };
    let ts = z.len();
    let n_rays = ts / samples;
    let p_vals: Vec<V3<T>> = tape
        .val(p)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    let (emb, in_volume) = vol.trilerp_graph(tape, store, p, &p_vals);
    let pn = normalize_points_graph(tape, &planes.bounds, p);
    let x = tape.stack_rows(pn, 3, emb, 8);
    let s_raw = geo.sdf_graph(tape, store, x);
    // out-of-volume samples: sdf pinned to the saturation constant with no
    // gradient into the scene
    let m: Vec<T> = in_volume
        .iter()
        .map(|b| if *b { T::one() } else { T::zero() })
        .collect();
    let off: Vec<T> = in_volume
        .iter()
        .map(|b| if *b { T::zero() } else { r(OUT_OF_VOLUME_SDF) })
        .collect();
    let mn = tape.constant(m);
    let offn = tape.constant(off);
    let s_gated = tape.mul(s_raw, mn);
    let sdf = tape.add(s_gated, offn);

    let feats = planes.features_graph(tape, store, p, &p_vals);
    let c_raw = coldec.color_graph(tape, store, feats);
    let color_s = tape.broadcast_col_mul(c_raw, mn, 3);

    let zn = tape.constant(z.clone());
    let (rendered, ray_active) =
        render_from_nodes(tape, sdf, color_s, zn, samples, cfg.tr, &in_volume);
    RenderGraph {
        sdf,
        color: rendered.color,
        depth: rendered.depth,
        weight_sum: rendered.weight_sum,
        z,
        obs_color,
        obs_depth,
        in_volume,
        ray_active,
        samples,
        n_rays,
    }
}

/// Assemble [`FrameRays`] for a set of pixel observations of one frame.
#[allow(clippy::too_many_arguments)]
pub fn frame_rays<T: Real>(
    q: NodeId,
    t: NodeId,
    pixels: &[(f64, f64, [T; 3], T)],
    k: &Intrinsics,
    cfg: &SamplingConfig<T>,
    rng: &mut impl Rng,
) -> FrameRays<T> {
    let mut dirs_cam = Vec::with_capacity(pixels.len() * 3);
    let mut obs_depth = Vec::with_capacity(pixels.len());
    let mut obs_color = Vec::with_capacity(pixels.len() * 3);
    let mut z = Vec::with_capacity(pixels.len() * cfg.samples_per_ray());
    for (u, v, col, d) in pixels {
        let dc = pixel_dir_cam::<T>(*u, *v, k);
        let n = norm3(dc);
        dirs_cam.extend_from_slice(&dc);
        let d_ray = *d * n;
        obs_depth.push(d_ray);
        obs_color.extend_from_slice(col);
        z.extend(sample_ray(d_ray, cfg, rng));
    }
    FrameRays {
        q,
        t,
        dirs_cam,
        obs_depth,
        obs_color,
        z,
    }
}
