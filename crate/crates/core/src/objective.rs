//! The four loss terms and the weighted overall objective.
//!
//! Geometry supervision works in truncation units: within the band the SDF
//! target is (D - z)/tr, and free-space samples are pushed to 1 (one full
//! truncation distance). Inner means divide by the classified set size even
//! when out-of-volume samples drop out of the numerator.

use crate::diffcore::{NodeId, Tape};
use crate::real::{r, Real};
use crate::renderer::RenderGraph;

#[derive(Debug, Clone)]
pub struct ObjectiveWeights<T> {
    pub rgb: T,
    pub depth: T,
    pub fs: T,
    pub sdf: T,
}

impl<T: Real> Default for ObjectiveWeights<T> {
    fn default() -> Self {
        Self {
            rgb: r(10.0),
            depth: r(0.1),
            fs: r(20.0),
            sdf: r(1000.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleClass {
    /// Between camera and truncation band: z < D - tr.
    FreeSpace,
    /// Within the band: |D - z| <= tr.
    Truncation,
    /// Past the band: z > D + tr; excluded from geometric losses.
    Behind,
}

pub fn classify_samples<T: Real>(z: &[T], depth: T, tr: T) -> Vec<SampleClass> {
    z.iter()
        .map(|&zi| {
            if (depth - zi).abs() <= tr {
                SampleClass::Truncation
            } else if zi < depth - tr {
                SampleClass::FreeSpace
            } else {
                SampleClass::Behind
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms<T> {
    pub rgb: T,
    pub depth: T,
    pub fs: T,
    pub sdf: T,
    pub total: T,
}

pub struct LossGraph {
    pub rgb: NodeId,
    pub depth: NodeId,
    pub fs: NodeId,
    pub sdf: NodeId,
    pub total: NodeId,
    pub active_rays: usize,
}

impl LossGraph {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossTerms<T> {
        LossTerms {
            rgb: tape.val(self.rgb)[0],
            depth: tape.val(self.depth)[0],
            fs: tape.val(self.fs)[0],
            sdf: tape.val(self.sdf)[0],
            total: tape.val(self.total)[0],
        }
    }
}

/// Attach the four losses to a rendered batch. Returns None when every ray
/// was excluded by the renderer.
pub fn build_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    rg: &RenderGraph<T>,
    weights: &ObjectiveWeights<T>,
    tr: T,
) -> Option<LossGraph> {
    let n_active = rg.ray_active.iter().filter(|a| **a).count();
    if n_active == 0 {
        return None;
    }
    let inv_active = T::one() / T::from_usize(n_active);
    let ray_gate: Vec<T> = rg
        .ray_active
        .iter()
        .map(|a| if *a { inv_active } else { T::zero() })
        .collect();

    // color: per-ray channel-summed squared error, mean over active rays
    let obs_c = tape.constant(rg.obs_color.clone());
    let cdiff = tape.sub(rg.color, obs_c);
    let csq = tape.square(cdiff);
    let ones3 = tape.constant(vec![T::one(); 3]);
    let per_ray_c = tape.affine(ones3, csq, None, 1, 3);
    let gate = tape.constant(ray_gate.clone());
    let gated_c = tape.mul(per_ray_c, gate);
    let l_rgb = tape.sum_all(gated_c);

    // depth: squared error, mean over active rays
    let obs_d = tape.constant(rg.obs_depth.clone());
    let ddiff = tape.sub(rg.depth, obs_d);
    let dsq = tape.square(ddiff);
    let gate2 = tape.constant(ray_gate);
    let gated_d = tape.mul(dsq, gate2);
    let l_depth = tape.sum_all(gated_d);

    // per-sample coefficients fold the double mean (1/|P| then 1/M) and all
    // exclusions into one constant vector
    let ts = rg.z.len();
    let mut sdf_target = vec![T::zero(); ts];
    let mut sdf_coef = vec![T::zero(); ts];
    let mut fs_coef = vec![T::zero(); ts];
    for ray in 0..rg.n_rays {
        let base = ray * rg.samples;
        let d = rg.obs_depth[ray];
        let classes = classify_samples(&rg.z[base..base + rg.samples], d, tr);
        let n_tr = classes
            .iter()
            .filter(|c| **c == SampleClass::Truncation)
            .count();
        let n_fs = classes
            .iter()
            .filter(|c| **c == SampleClass::FreeSpace)
            .count();
        if !rg.ray_active[ray] {
            continue;
        }
        for (k, class) in classes.iter().enumerate() {
            let i = base + k;
            if !rg.in_volume[i] {
                continue;
            }
            match class {
                SampleClass::Truncation => {
                    sdf_target[i] = (d - rg.z[i]) / tr;
                    sdf_coef[i] = inv_active / T::from_usize(n_tr);
                }
                SampleClass::FreeSpace => {
                    fs_coef[i] = inv_active / T::from_usize(n_fs);
                }
                SampleClass::Behind => {}
            }
        }
    }
    let tgt = tape.constant(sdf_target);
    let sdiff = tape.sub(rg.sdf, tgt);
    let ssq = tape.square(sdiff);
    let scoef = tape.constant(sdf_coef);
    let sweighted = tape.mul(ssq, scoef);
    let l_sdf = tape.sum_all(sweighted);

    let fdiff = tape.affine_scalar(rg.sdf, T::one(), -T::one());
    let fsq = tape.square(fdiff);
    let fcoef = tape.constant(fs_coef);
    let fweighted = tape.mul(fsq, fcoef);
    let l_fs = tape.sum_all(fweighted);

    let wr = tape.scale(l_rgb, weights.rgb);
    let wd = tape.scale(l_depth, weights.depth);
    let wf = tape.scale(l_fs, weights.fs);
    let ws = tape.scale(l_sdf, weights.sdf);
    let t0 = tape.add(wr, wd);
    let t1 = tape.add(t0, wf);
    let total = tape.add(t1, ws);
    Some(LossGraph {
        rgb: l_rgb,
        depth: l_depth,
        fs: l_fs,
        sdf: l_sdf,
        total,
        active_rays: n_active,
    })
}
