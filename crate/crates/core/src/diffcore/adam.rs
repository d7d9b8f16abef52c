//! Adam with bias correction and lazy sparse moments: only entries whose
//! touched bit is set get moment decay and a parameter update, so untouched
//! parameters (unselected frames, unseen voxels) stay bit-identical.

use super::params::{GradientBuffer, GroupId, ParamStore};
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moments per group. Created fresh per optimization episode;
/// sized to the store at construction, so grow the store only between
/// episodes.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: Vec<u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m: Vec<Vec<T>> = store
            .iter()
            .map(|(_, g)| vec![T::zero(); g.values.len()])
            .collect();
        let v = m.clone();
        let step = vec![0; m.len()];
        Self { m, v, step }
    }

    pub fn moments(&self, id: GroupId, idx: usize) -> (T, T) {
        (self.m[id.index()][idx], self.v[id.index()][idx])
    }
}

/// One Adam step over `active` groups with the given learning rates; groups
/// not listed (and untouched entries of listed groups) are left untouched.
/// Errs instead of stepping if any touched gradient is non-finite.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &GradientBuffer<T>,
    state: &mut AdamState<T>,
    active: &[(GroupId, T)],
) -> Result<(), String> {
    grads.check_finite(store)?;
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPS);
    let one = T::one();
    for &(id, lr) in active {
        assert!(
            store.group(id).trainable,
            "adam_step on frozen group {:?}",
            store.group(id).name
        );
        let gi = id.index();
        state.step[gi] += 1;
        let t = state.step[gi] as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let g_all = grads.grad(id);
        let vals = store.values_mut(id);
        let (ms, vs) = (&mut state.m[gi], &mut state.v[gi]);
        for idx in grads.touched_indices(id) {
            let g = g_all[idx];
            let m = b1 * ms[idx] + (one - b1) * g;
            let v = b2 * vs[idx] + (one - b2) * g * g;
            ms[idx] = m;
            vs[idx] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            vals[idx] = vals[idx] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
