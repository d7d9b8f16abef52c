//! Appearance features on three axis-aligned planes (xy, xz, yz). A world
//! point is projected onto each plane, the plane's feature grid is sampled
//! bilinearly, and the three results are summed. Queries outside the scene
//! bounds clamp onto them (counted, warned once).

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::diffcore::{GroupId, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::geom::{Aabb, V3};
use crate::real::Real;

pub const FEATURE_DIM: usize = 8;

/// World axes spanned by each plane.
pub const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];
pub const PLANE_NAMES: [&str; 3] = ["plane_xy", "plane_xz", "plane_yz"];

pub struct TriPlanes<T> {
    pub bounds: Aabb<T>,
    pub cell: T,
    /// Node counts (n0, n1) per plane; node (i, j) stores FEATURE_DIM floats
    /// at offset (j * n0 + i) * FEATURE_DIM in the plane's group.
    dims: [[usize; 2]; 3],
    pub groups: [GroupId; 3],
    clamps: AtomicUsize,
}

fn axis_nodes(extent: f64, cell: f64) -> usize {
    // nodes at min + k*cell; small slack avoids an extra node when the
    // extent is an exact multiple of the cell size
    (extent / cell - 1e-9).ceil().max(1.0) as usize + 1
}

impl<T: Real> TriPlanes<T> {
    /// Zero-initialized feature grids covering `bounds`.
    pub fn new(store: &mut ParamStore<T>, bounds: Aabb<T>, cell: T, lr: T) -> Self {
        assert!(cell > T::zero());
        let ext = bounds.extent();
        let nodes: Vec<usize> = (0..3)
            .map(|a| axis_nodes(ext[a].to_f64(), cell.to_f64()))
            .collect();
        let mut dims = [[0usize; 2]; 3];
        let mut groups = Vec::with_capacity(3);
        for (pl, axes) in PLANE_AXES.iter().enumerate() {
            dims[pl] = [nodes[axes[0]], nodes[axes[1]]];
            let len = dims[pl][0] * dims[pl][1] * FEATURE_DIM;
            groups.push(store.add_group(PLANE_NAMES[pl], vec![T::zero(); len], lr, true));
        }
        Self {
            bounds,
            cell,
            dims,
            groups: [groups[0], groups[1], groups[2]],
            clamps: AtomicUsize::new(0),
        }
    }

    /// Rebuild from checkpointed groups already present in `store`.
    pub fn restore(
        store: &ParamStore<T>,
        groups: [GroupId; 3],
        bounds: Aabb<T>,
        cell: T,
    ) -> Result<Self> {
        let ext = bounds.extent();
        let nodes: Vec<usize> = (0..3)
            .map(|a| axis_nodes(ext[a].to_f64(), cell.to_f64()))
            .collect();
        let mut dims = [[0usize; 2]; 3];
        for (pl, axes) in PLANE_AXES.iter().enumerate() {
            dims[pl] = [nodes[axes[0]], nodes[axes[1]]];
            let want = dims[pl][0] * dims[pl][1] * FEATURE_DIM;
            if store.len(groups[pl]) != want {
                return Err(Error::Checkpoint(format!(
                    "{} has {} values, bounds imply {want}",
                    PLANE_NAMES[pl],
                    store.len(groups[pl])
                )));
            }
        }
        Ok(Self {
            bounds,
            cell,
            dims,
            groups,
            clamps: AtomicUsize::new(0),
        })
    }

    pub fn dims(&self, plane: usize) -> [usize; 2] {
        self.dims[plane]
    }

    pub fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    /// Clamp onto the bounds, counting (and once warning about) violations.
    pub fn clamp_point(&self, p: V3<T>) -> V3<T> {
        let mut q = p;
        let mut clamped = false;
        for a in 0..3 {
            let lo = self.bounds.min[a];
            let hi = self.bounds.max[a];
            if q[a] < lo {
                q[a] = lo;
                clamped = true;
            } else if q[a] > hi {
                q[a] = hi;
                clamped = true;
            }
        }
        if clamped && self.clamps.fetch_add(1, Ordering::Relaxed) == 0 {
            log::warn!("feature query outside scene bounds; clamping (further clamps counted silently)");
        }
        q
    }

    /// Cell index and in-cell fraction along one plane axis of the
    /// already-clamped coordinate.
    #[inline]
    fn locate(&self, nodes: usize, world_axis: usize, v: T) -> (usize, T) {
        let g = (v - self.bounds.min[world_axis]) / self.cell;
        let max_cell = nodes - 2;
        let i = (g.floor().to_f64() as usize).min(max_cell);
        (i, g - T::from_usize(i))
    }

    /// f(p) = sum over planes of the bilinear feature sample.
    pub fn project_features(&self, store: &ParamStore<T>, p: V3<T>) -> [T; FEATURE_DIM] {
        let q = self.clamp_point(p);
        let one = T::one();
        let mut out = [T::zero(); FEATURE_DIM];
        for (pl, axes) in PLANE_AXES.iter().enumerate() {
            let [n0, _n1] = self.dims[pl];
            let (i, fx) = self.locate(self.dims[pl][0], axes[0], q[axes[0]]);
            let (j, fy) = self.locate(self.dims[pl][1], axes[1], q[axes[1]]);
            let vals = store.values(self.groups[pl]);
            for c in 0..4usize {
                let wx = if c & 1 != 0 { fx } else { one - fx };
                let wy = if c & 2 != 0 { fy } else { one - fy };
                let w = wx * wy;
                let node = (j + (c >> 1)) * n0 + i + (c & 1);
                let base = node * FEATURE_DIM;
                for d in 0..FEATURE_DIM {
                    out[d] = out[d] + w * vals[base + d];
                }
            }
        }
        out
    }

    /// Differentiable batched query; `p_node` is [3 x n] with values
    /// `p_vals`. Clamped coordinates contribute no gradient to the point.
    pub fn features_graph(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p_node: NodeId,
        p_vals: &[V3<T>],
    ) -> NodeId {
        let n = p_vals.len();
        assert_eq!(tape.len(p_node), 3 * n);
        let inv_cell = T::one() / self.cell;
        let mut total: Option<NodeId> = None;
        for (pl, axes) in PLANE_AXES.iter().enumerate() {
            let [n0, _] = self.dims[pl];
            let mut gates = vec![T::zero(); 2 * n];
            let mut adjust = vec![T::zero(); 2 * n];
            let mut idx = vec![0u32; 4 * n];
            for (js, p) in p_vals.iter().enumerate() {
                let q = self.clamp_point(*p);
                let mut cell_ij = [0usize; 2];
                for t in 0..2 {
                    let a = axes[t];
                    let (i, frac) = self.locate(self.dims[pl][t], a, q[a]);
                    cell_ij[t] = i;
                    if q[a] == p[a] {
                        // frac = g - i with gradient flowing into p
                        gates[js * 2 + t] = T::one();
                        let g = (p[a] - self.bounds.min[a]) * inv_cell;
                        adjust[js * 2 + t] = g - frac;
                    } else {
                        // pinned: frac = -adjust, no gradient
                        adjust[js * 2 + t] = -frac;
                    }
                }
                for c in 0..4usize {
                    let node = (cell_ij[1] + (c >> 1)) * n0 + cell_ij[0] + (c & 1);
                    idx[js * 4 + c] = (node * FEATURE_DIM) as u32;
                }
            }
            let pq = tape.select_rows(p_node, 3, vec![axes[0] as u32, axes[1] as u32]);
            let shift: Vec<T> = (0..2)
                .map(|t| -self.bounds.min[axes[t]] * inv_cell)
                .collect();
            let g = tape.row_affine(pq, 2, vec![inv_cell; 2], shift);
            let gate = tape.constant(gates);
            let gated = tape.mul(g, gate);
            let adj = tape.constant(adjust);
            let frac = tape.sub(gated, adj);
            let w = tape.bilerp_weights(frac);
            let f = tape.gather_weighted(store, self.groups[pl], idx, w, FEATURE_DIM, 4);
            total = Some(match total {
                Some(acc) => tape.add(acc, f),
                None => f,
            });
        }
        total.unwrap()
    }
}
