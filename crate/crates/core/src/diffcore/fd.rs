//! Central finite-difference verification of tape gradients. This is the
//! oracle the whole optimizer rests on, so it rebuilds the graph from scratch
//! for every perturbed evaluation rather than reusing any tape state.

use super::params::{GradientBuffer, GroupId, ParamStore};
use super::tape::{NodeId, Tape};
use crate::real::Real;

/// Every (group, index) coordinate of the listed groups.
pub fn all_coords<T: Real>(store: &ParamStore<T>, groups: &[GroupId]) -> Vec<(GroupId, usize)> {
    let mut out = Vec::new();
    for &g in groups {
        for i in 0..store.len(g) {
            out.push((g, i));
        }
    }
    out
}

/// Max over `coords` of |analytic - central_difference| / max(1e-8, |central_difference|),
/// where `build` constructs the scalar-loss graph on the current store.
pub fn finite_difference_check<T: Real, F>(
    store: &mut ParamStore<T>,
    coords: &[(GroupId, usize)],
    eps: T,
    mut build: F,
) -> T
where
    F: FnMut(&ParamStore<T>) -> (Tape<T>, NodeId),
{
    let (tape, loss) = build(store);
    let mut grads = GradientBuffer::new(store);
    tape.backward(loss, store, &mut grads);

    let floor = T::from_f64(1e-8);
    let two = T::from_f64(2.0);
    let mut max_rel = T::zero();
    for &(g, i) in coords {
        let orig = store.values(g)[i];
        store.values_mut(g)[i] = orig + eps;
        let (tp, lp) = build(store);
        let fp = tp.val(lp)[0];
        store.values_mut(g)[i] = orig - eps;
        let (tm, lm) = build(store);
        let fm = tm.val(lm)[0];
        store.values_mut(g)[i] = orig;
        let fd = (fp - fm) / (two * eps);
        let rel = (grads.grad(g)[i] - fd).abs() / floor.max(fd.abs());
        max_rel = max_rel.max(rel);
    }
    max_rel
}
