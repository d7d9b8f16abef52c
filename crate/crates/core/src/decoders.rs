//! Two shallow MLP decoders: geometry (normalized point + 8-dim embedding
//! -> tanh-bounded signed distance in truncation units, i.e. metric distance
//! divided by tr) and color (8-dim feature -> sigmoid rgb). Both are 2-layer
//! with 32 ReLU hidden units.
//!
//! The geometry decoder is "passthrough"-initialized: two hidden units and
//! the final layer reproduce tanh(embedding_channel0) exactly — the prior
//! encoder stores the normalized truncated SDF in channel 0, so the prior
//! drives rendering before any optimization. The color final layer starts at
//! zero, so rgb begins at (0.5, 0.5, 0.5).

use rand::Rng;

use crate::diffcore::{GroupId, NodeId, ParamStore, Tape};
use crate::geom::{Aabb, V3};
use crate::real::{r, Real};

pub const HIDDEN: usize = 32;
pub const GEO_IN: usize = 3 + 8;
pub const COLOR_IN: usize = 8;

/// Map a world point into [-1,1]^3 relative to `bounds`.
pub fn normalize_point<T: Real>(bounds: &Aabb<T>, p: V3<T>) -> V3<T> {
    let ext = bounds.extent();
    let two = r::<T>(2.0);
    let mut out = [T::zero(); 3];
    for a in 0..3 {
        out[a] = two * (p[a] - bounds.min[a]) / ext[a] - T::one();
    }
    out
}

/// Graph version of [`normalize_point`] over a [3 x n] batch.
pub fn normalize_points_graph<T: Real>(
    tape: &mut Tape<T>,
    bounds: &Aabb<T>,
    p_node: NodeId,
) -> NodeId {
    let ext = bounds.extent();
    let two = r::<T>(2.0);
    let scale: Vec<T> = (0..3).map(|a| two / ext[a]).collect();
    let shift: Vec<T> = (0..3)
        .map(|a| -(two * bounds.min[a] / ext[a] + T::one()))
        .collect();
    tape.row_affine(p_node, 3, scale, shift)
}

fn mlp_forward<T: Real>(
    store: &ParamStore<T>,
    w1: GroupId,
    b1: GroupId,
    w2: GroupId,
    b2: GroupId,
    n_in: usize,
    n_out: usize,
    x: &[T],
) -> Vec<T> {
    debug_assert_eq!(x.len(), n_in);
    let (w1v, b1v) = (store.values(w1), store.values(b1));
    let (w2v, b2v) = (store.values(w2), store.values(b2));
    let mut h = [T::zero(); HIDDEN];
    for (i, hv) in h.iter_mut().enumerate() {
        let mut a = b1v[i];
        for (k, xv) in x.iter().enumerate() {
            a = a + w1v[i * n_in + k] * *xv;
        }
        *hv = a.max(T::zero());
    }
    let mut out = vec![T::zero(); n_out];
    for (i, ov) in out.iter_mut().enumerate() {
        let mut a = b2v[i];
        for (k, hv) in h.iter().enumerate() {
            a = a + w2v[i * HIDDEN + k] * *hv;
        }
        *ov = a;
    }
    out
}

fn mlp_graph<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w1: GroupId,
    b1: GroupId,
    w2: GroupId,
    b2: GroupId,
    n_in: usize,
    n_out: usize,
    x: NodeId,
) -> NodeId {
    let w1n = tape.param_all(store, w1);
    let b1n = tape.param_all(store, b1);
    let pre = tape.affine(w1n, x, Some(b1n), HIDDEN, n_in);
    let h = tape.relu(pre);
    let w2n = tape.param_all(store, w2);
    let b2n = tape.param_all(store, b2);
    tape.affine(w2n, h, Some(b2n), n_out, HIDDEN)
}

pub struct GeometryDecoder {
    pub w1: GroupId,
    pub b1: GroupId,
    pub w2: GroupId,
    pub b2: GroupId,
}

impl GeometryDecoder {
    /// Passthrough init: hidden rows 0/1 compute relu(+-e0); the final layer
    /// combines them back into e0 before tanh. Remaining hidden rows start
    /// as small seeded noise feeding a zero output weight.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, lr: T) -> Self {
        let mut w1 = vec![T::zero(); HIDDEN * GEO_IN];
        for row in 2..HIDDEN {
            for k in 0..GEO_IN {
                w1[row * GEO_IN + k] = r(rng.gen_range(-0.1..0.1));
            }
        }
        w1[3] = T::one(); // row 0, embedding channel 0
        w1[GEO_IN + 3] = -T::one(); // row 1
        let mut w2 = vec![T::zero(); HIDDEN];
        w2[0] = T::one();
        w2[1] = -T::one();
        Self {
            w1: store.add_group("geo_w1", w1, lr, true),
            b1: store.add_group("geo_b1", vec![T::zero(); HIDDEN], lr, true),
            w2: store.add_group("geo_w2", w2, lr, true),
            b2: store.add_group("geo_b2", vec![T::zero(); 1], lr, true),
        }
    }

    pub fn from_groups(w1: GroupId, b1: GroupId, w2: GroupId, b2: GroupId) -> Self {
        Self { w1, b1, w2, b2 }
    }

    /// Signed distance (truncation units, in (-1, 1)) at a bounds-normalized
    /// point.
    pub fn decode_sdf<T: Real>(&self, store: &ParamStore<T>, p_norm: V3<T>, e: [T; 8]) -> T {
        let mut x = [T::zero(); GEO_IN];
        x[..3].copy_from_slice(&p_norm);
        x[3..].copy_from_slice(&e);
        let out = mlp_forward(store, self.w1, self.b1, self.w2, self.b2, GEO_IN, 1, &x);
        out[0].tanh()
    }

    /// Graph over an [11 x n] input (3 normalized point rows + 8 embedding
    /// rows); returns the [1 x n] sdf node.
    pub fn sdf_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> NodeId {
        let pre = mlp_graph(tape, store, self.w1, self.b1, self.w2, self.b2, GEO_IN, 1, x);
        tape.tanh(pre)
    }

    pub fn groups(&self) -> [GroupId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

pub struct ColorDecoder {
    pub w1: GroupId,
    pub b1: GroupId,
    pub w2: GroupId,
    pub b2: GroupId,
}

impl ColorDecoder {
    /// Small seeded first layer (positive biases keep units live on zero
    /// features), zero final layer: rgb starts at exactly (0.5, 0.5, 0.5).
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, lr: T) -> Self {
        let w1: Vec<T> = (0..HIDDEN * COLOR_IN)
            .map(|_| r(rng.gen_range(-0.1..0.1)))
            .collect();
        let b1: Vec<T> = (0..HIDDEN).map(|_| r(rng.gen_range(0.0..0.1))).collect();
        Self {
            w1: store.add_group("color_w1", w1, lr, true),
            b1: store.add_group("color_b1", b1, lr, true),
            w2: store.add_group("color_w2", vec![T::zero(); 3 * HIDDEN], lr, true),
            b2: store.add_group("color_b2", vec![T::zero(); 3], lr, true),
        }
    }

    pub fn from_groups(w1: GroupId, b1: GroupId, w2: GroupId, b2: GroupId) -> Self {
        Self { w1, b1, w2, b2 }
    }

    pub fn decode_color<T: Real>(&self, store: &ParamStore<T>, f: [T; 8]) -> [T; 3] {
        let out = mlp_forward(store, self.w1, self.b1, self.w2, self.b2, COLOR_IN, 3, &f);
        let sig = |v: T| T::one() / (T::one() + (-v).exp());
        [sig(out[0]), sig(out[1]), sig(out[2])]
    }

    /// Graph over an [8 x n] feature input; returns the [3 x n] rgb node.
    pub fn color_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: NodeId,
    ) -> NodeId {
        let pre = mlp_graph(
            tape, store, self.w1, self.b1, self.w2, self.b2, COLOR_IN, 3, f,
        );
        tape.sigmoid(pre)
    }

    pub fn groups(&self) -> [GroupId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}
