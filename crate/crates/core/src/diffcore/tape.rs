//! Eager reverse-mode autodiff over vector-valued nodes.
//!
//! Values are flat buffers; matrix-shaped data is column-major with the row
//! count carried by the ops that care. Ops are the fixed inventory the
//! rendering/objective graphs need — this is not a general tensor library,
//! which is what keeps one optimization iteration (tens of thousands of ray
//! samples) cheap on a single core.
//!
//! Forward values are computed at construction ("define-by-run"), so builders
//! can branch on data (voxel lookups, ray masks) while the tape stays a
//! straight-line program. A graph is valid for one parameter snapshot: build,
//! read values, run [`Tape::backward`], step, rebuild.

use super::params::{GradientBuffer, GroupId, ParamStore};
use crate::pose::{quat_to_rot, quat_to_rot_deriv};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    fn i(self) -> usize {
        self.0 as usize
    }
}

enum Op<T> {
    Const,
    Param {
        group: GroupId,
        offset: usize,
    },
    /// y[m x n] = W[m x k, row-major] * x[k x n] (+ b[m]).
    Affine {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
        m: usize,
        k: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = a*x + b elementwise with scalar constants (b not needed after
    /// the forward pass).
    AffineScalar {
        x: NodeId,
        a: T,
    },
    /// y[r,c] = scale[r]*x[r,c] + shift[r] (shift not needed after the
    /// forward pass).
    RowAffine {
        x: NodeId,
        rows: usize,
        scale: Vec<T>,
    },
    /// y[i,c] = x[idx[i],c].
    SelectRows {
        x: NodeId,
        rows_in: usize,
        idx: Vec<u32>,
    },
    /// Column blocks side by side (flat concat of column-major buffers).
    ConcatCols {
        parts: Vec<NodeId>,
    },
    /// Per column: [a_col; b_col].
    StackRows {
        a: NodeId,
        b: NodeId,
        ra: usize,
        rb: usize,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Recip(NodeId),
    SumAll(NodeId),
    /// y[r,c] = x[r,c] * s[c], s is [1 x n].
    BroadcastColMul {
        x: NodeId,
        s: NodeId,
        rows: usize,
    },
    /// Equal segments of `seg` columns: y[., r] = sum_i w[i] * v[., i].
    SegmentDot {
        values: NodeId,
        weights: NodeId,
        d: usize,
        seg: usize,
    },
    /// frac [3 x n] -> 8 trilinear corner weights per column
    /// (corner bit 0 = x, 1 = y, 2 = z; bit set means weight t, else 1-t).
    TrilerpWeights {
        frac: NodeId,
    },
    /// frac [2 x n] -> 4 bilinear corner weights per column.
    BilerpWeights {
        frac: NodeId,
    },
    /// y[., j] = sum_c w[c, j] * P[idx[j*k + c] .. +d]; P is a parameter
    /// group read directly from the store (gradients scatter back into it).
    GatherWeighted {
        group: GroupId,
        idx: Vec<u32>,
        weights: NodeId,
        d: usize,
        k: usize,
    },
    /// y = R(q) * x, columns of x are points; polynomial quaternion map.
    RotatePoints {
        q: NodeId,
        x: NodeId,
    },
    NormalizeCols3(NodeId),
    /// col (r*s + i) = o + z[r*s + i] * dirs[., r].
    RayPoints {
        o: NodeId,
        dirs: NodeId,
        z: Vec<T>,
        samples: usize,
    },
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Param { .. } => "param",
        Op::Affine { .. } => "affine",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AffineScalar { .. } => "affine_scalar",
        Op::RowAffine { .. } => "row_affine",
        Op::SelectRows { .. } => "select_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::StackRows { .. } => "stack_rows",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Square(..) => "square",
        Op::Recip(..) => "recip",
        Op::SumAll(..) => "sum_all",
        Op::BroadcastColMul { .. } => "broadcast_col_mul",
        Op::SegmentDot { .. } => "segment_dot",
        Op::TrilerpWeights { .. } => "trilerp_weights",
        Op::BilerpWeights { .. } => "bilerp_weights",
        Op::GatherWeighted { .. } => "gather_weighted",
        Op::RotatePoints { .. } => "rotate_points",
        Op::NormalizeCols3(..) => "normalize_cols3",
        Op::RayPoints { .. } => "ray_points",
    }
}

#[inline]
fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub struct Tape<T> {
    ops: Vec<Op<T>>,
    vals: Vec<Vec<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    #[inline]
    pub fn val(&self, id: NodeId) -> &[T] {
        &self.vals[id.i()]
    }

    #[inline]
    pub fn len(&self, id: NodeId) -> usize {
        self.vals[id.i()].len()
    }

    pub fn n_nodes(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, op: Op<T>, vals: Vec<T>) -> NodeId {
        debug_assert!(!vals.is_empty(), "empty node from {}", op_name(&op));
        if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
            panic!("non-finite value {bad:?} produced by op {}", op_name(&op));
        }
        self.ops.push(op);
        self.vals.push(vals);
        NodeId(self.ops.len() as u32 - 1)
    }

    pub fn constant(&mut self, vals: Vec<T>) -> NodeId {
        self.push(Op::Const, vals)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(vec![v])
    }

    /// Leaf over `store[group][offset .. offset+len]`; values are snapshotted.
    pub fn param(
        &mut self,
        store: &ParamStore<T>,
        group: GroupId,
        offset: usize,
        len: usize,
    ) -> NodeId {
        let vals = store.values(group)[offset..offset + len].to_vec();
        self.push(Op::Param { group, offset }, vals)
    }

    pub fn param_all(&mut self, store: &ParamStore<T>, group: GroupId) -> NodeId {
        self.param(store, group, 0, store.len(group))
    }

    pub fn affine(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>, m: usize, k: usize) -> NodeId {
        assert_eq!(self.len(w), m * k);
        assert_eq!(self.len(x) % k, 0);
        let n = self.len(x) / k;
        if let Some(b) = b {
            assert_eq!(self.len(b), m);
        }
        let mut out = vec![T::zero(); m * n];
        {
            let wv = self.val(w);
            let xv = self.val(x);
            for j in 0..n {
                let xc = &xv[j * k..(j + 1) * k];
                let yc = &mut out[j * m..(j + 1) * m];
                for i in 0..m {
                    let wr = &wv[i * k..(i + 1) * k];
                    let mut acc = T::zero();
                    for kk in 0..k {
                        acc = acc + wr[kk] * xc[kk];
                    }
                    yc[i] = acc;
                }
            }
            if let Some(b) = b {
                let bv = self.val(b);
                for j in 0..n {
                    for i in 0..m {
                        out[j * m + i] = out[j * m + i] + bv[i];
                    }
                }
            }
        }
        self.push(Op::Affine { w, x, b, m, k }, out)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        assert_eq!(self.len(a), self.len(b), "{} length mismatch", op_name(&op));
        let out = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn affine_scalar(&mut self, x: NodeId, a: T, b: T) -> NodeId {
        let out = self.val(x).iter().map(|&v| a * v + b).collect();
        self.push(Op::AffineScalar { x, a }, out)
    }

    pub fn scale(&mut self, x: NodeId, a: T) -> NodeId {
        self.affine_scalar(x, a, T::zero())
    }

    pub fn row_affine(&mut self, x: NodeId, rows: usize, scale: Vec<T>, shift: Vec<T>) -> NodeId {
        assert_eq!(scale.len(), rows);
        assert_eq!(shift.len(), rows);
        assert_eq!(self.len(x) % rows, 0);
        let out = self
            .val(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| scale[i % rows] * v + shift[i % rows])
            .collect();
        self.push(
            Op::RowAffine { x, rows, scale },
            out,
        )
    }

    pub fn select_rows(&mut self, x: NodeId, rows_in: usize, idx: Vec<u32>) -> NodeId {
        assert_eq!(self.len(x) % rows_in, 0);
        let n = self.len(x) / rows_in;
        let rows_out = idx.len();
        let mut out = vec![T::zero(); rows_out * n];
        {
            let xv = self.val(x);
            for j in 0..n {
                for (i, &r) in idx.iter().enumerate() {
                    out[j * rows_out + i] = xv[j * rows_in + r as usize];
                }
            }
        }
        self.push(Op::SelectRows { x, rows_in, idx }, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut out = Vec::with_capacity(parts.iter().map(|&p| self.len(p)).sum());
        for &p in parts {
            out.extend_from_slice(self.val(p));
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        )
    }

    pub fn stack_rows(&mut self, a: NodeId, ra: usize, b: NodeId, rb: usize) -> NodeId {
        assert_eq!(self.len(a) % ra, 0);
        let n = self.len(a) / ra;
        assert_eq!(self.len(b), rb * n);
        let rows = ra + rb;
        let mut out = vec![T::zero(); rows * n];
        {
            let av = self.val(a);
            let bv = self.val(b);
            for j in 0..n {
                out[j * rows..j * rows + ra].copy_from_slice(&av[j * ra..(j + 1) * ra]);
                out[j * rows + ra..(j + 1) * rows].copy_from_slice(&bv[j * rb..(j + 1) * rb]);
            }
        }
        self.push(Op::StackRows { a, b, ra, rb }, out)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let out = self.val(x).iter().map(|&v| f(v)).collect();
        self.push(op, out)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid_stable, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| T::one() / v, Op::Recip(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).iter().copied().sum();
        self.push(Op::SumAll(x), vec![s])
    }

    pub fn broadcast_col_mul(&mut self, x: NodeId, s: NodeId, rows: usize) -> NodeId {
        let n = self.len(s);
        assert_eq!(self.len(x), rows * n);
        let mut out = vec![T::zero(); rows * n];
        {
            let xv = self.val(x);
            let sv = self.val(s);
            for j in 0..n {
                for r in 0..rows {
                    out[j * rows + r] = xv[j * rows + r] * sv[j];
                }
            }
        }
        self.push(Op::BroadcastColMul { x, s, rows }, out)
    }

    pub fn segment_dot(&mut self, values: NodeId, weights: NodeId, d: usize, seg: usize) -> NodeId {
        let l = self.len(weights);
        assert_eq!(l % seg, 0);
        assert_eq!(self.len(values), d * l);
        let r = l / seg;
        let mut out = vec![T::zero(); d * r];
        {
            let vv = self.val(values);
            let wv = self.val(weights);
            for s in 0..r {
                let yc = &mut out[s * d..(s + 1) * d];
                for i in s * seg..(s + 1) * seg {
                    let w = wv[i];
                    let vc = &vv[i * d..(i + 1) * d];
                    for dd in 0..d {
                        yc[dd] = yc[dd] + w * vc[dd];
                    }
                }
            }
        }
        self.push(
            Op::SegmentDot {
                values,
                weights,
                d,
                seg,
            },
            out,
        )
    }

    pub fn trilerp_weights(&mut self, frac: NodeId) -> NodeId {
        assert_eq!(self.len(frac) % 3, 0);
        let n = self.len(frac) / 3;
        let mut out = vec![T::zero(); 8 * n];
        {
            let fv = self.val(frac);
            let one = T::one();
            for j in 0..n {
                let (tx, ty, tz) = (fv[j * 3], fv[j * 3 + 1], fv[j * 3 + 2]);
                for c in 0..8usize {
                    let wx = if c & 1 != 0 { tx } else { one - tx };
                    let wy = if c & 2 != 0 { ty } else { one - ty };
                    let wz = if c & 4 != 0 { tz } else { one - tz };
                    out[j * 8 + c] = wx * wy * wz;
                }
            }
        }
        self.push(Op::TrilerpWeights { frac }, out)
    }

    pub fn bilerp_weights(&mut self, frac: NodeId) -> NodeId {
        assert_eq!(self.len(frac) % 2, 0);
        let n = self.len(frac) / 2;
        let mut out = vec![T::zero(); 4 * n];
        {
            let fv = self.val(frac);
            let one = T::one();
            for j in 0..n {
                let (tx, ty) = (fv[j * 2], fv[j * 2 + 1]);
                for c in 0..4usize {
                    let wx = if c & 1 != 0 { tx } else { one - tx };
                    let wy = if c & 2 != 0 { ty } else { one - ty };
                    out[j * 4 + c] = wx * wy;
                }
            }
        }
        self.push(Op::BilerpWeights { frac }, out)
    }

    /// `idx` holds k parameter offsets per output column, each the start of a
    /// d-long span in `group`.
    pub fn gather_weighted(
        &mut self,
        store: &ParamStore<T>,
        group: GroupId,
        idx: Vec<u32>,
        weights: NodeId,
        d: usize,
        k: usize,
    ) -> NodeId {
        assert_eq!(self.len(weights) % k, 0);
        let n = self.len(weights) / k;
        assert_eq!(idx.len(), n * k);
        let mut out = vec![T::zero(); d * n];
        {
            let pv = store.values(group);
            let wv = self.val(weights);
            for j in 0..n {
                let yc = &mut out[j * d..(j + 1) * d];
                for c in 0..k {
                    let w = wv[j * k + c];
                    let base = idx[j * k + c] as usize;
                    let span = &pv[base..base + d];
                    for dd in 0..d {
                        yc[dd] = yc[dd] + w * span[dd];
                    }
                }
            }
        }
        self.push(
            Op::GatherWeighted {
                group,
                idx,
                weights,
                d,
                k,
            },
            out,
        )
    }

    pub fn rotate_points(&mut self, q: NodeId, x: NodeId) -> NodeId {
        assert_eq!(self.len(q), 4);
        assert_eq!(self.len(x) % 3, 0);
        let n = self.len(x) / 3;
        let mut out = vec![T::zero(); 3 * n];
        {
            let qv = self.val(q);
            let r = quat_to_rot([qv[0], qv[1], qv[2], qv[3]]);
            let xv = self.val(x);
            for j in 0..n {
                let p = [xv[j * 3], xv[j * 3 + 1], xv[j * 3 + 2]];
                for i in 0..3 {
                    out[j * 3 + i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
                }
            }
        }
        self.push(Op::RotatePoints { q, x }, out)
    }

    pub fn normalize_cols3(&mut self, x: NodeId) -> NodeId {
        assert_eq!(self.len(x) % 3, 0);
        let n = self.len(x) / 3;
        let mut out = vec![T::zero(); 3 * n];
        {
            let xv = self.val(x);
            for j in 0..n {
                let c = &xv[j * 3..(j + 1) * 3];
                let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                for i in 0..3 {
                    out[j * 3 + i] = c[i] / norm;
                }
            }
        }
        self.push(Op::NormalizeCols3(x), out)
    }

    /// `z` holds `samples` depths per ray, flattened ray-major.
    pub fn ray_points(&mut self, o: NodeId, dirs: NodeId, z: Vec<T>, samples: usize) -> NodeId {
        assert_eq!(self.len(o), 3);
        assert_eq!(self.len(dirs) % 3, 0);
        let rays = self.len(dirs) / 3;
        assert_eq!(z.len(), rays * samples);
        let mut out = vec![T::zero(); 3 * rays * samples];
        {
            let ov = self.val(o);
            let dv = self.val(dirs);
            for r in 0..rays {
                let dc = &dv[r * 3..(r + 1) * 3];
                for s in 0..samples {
                    let zi = z[r * samples + s];
                    let col = (r * samples + s) * 3;
                    for i in 0..3 {
                        out[col + i] = ov[i] + zi * dc[i];
                    }
                }
            }
        }
        self.push(
            Op::RayPoints {
                o,
                dirs,
                z,
                samples,
            },
            out,
        )
    }

    /// Reverse pass from a scalar loss node; parameter gradients accumulate
    /// into `grads`. `store` must be the same snapshot the graph was built on.
    pub fn backward(&self, loss: NodeId, store: &ParamStore<T>, grads: &mut GradientBuffer<T>) {
        assert_eq!(self.len(loss), 1, "backward needs a scalar loss");
        let mut adj: Vec<Vec<T>> = vec![Vec::new(); self.ops.len()];
        adj[loss.i()] = vec![T::one()];

        fn acc<T: Real>(adj: &mut [Vec<T>], id: NodeId, len: usize) -> &mut Vec<T> {
            let a = &mut adj[id.i()];
            if a.is_empty() {
                a.resize(len, T::zero());
            }
            a
        }

        for i in (0..self.ops.len()).rev() {
            let dy = std::mem::take(&mut adj[i]);
            if dy.is_empty() {
                continue;
            }
            match &self.ops[i] {
                Op::Const => {}
                Op::Param { group, offset } => {
                    grads.add_span(*group, *offset, &dy);
                }
                Op::Affine { w, x, b, m, k } => {
                    let (m, k) = (*m, *k);
                    let n = self.len(*x) / k;
                    {
                        let wv = self.val(*w);
                        let dx = acc(&mut adj, *x, k * n);
                        for j in 0..n {
                            let dyc = &dy[j * m..(j + 1) * m];
                            let dxc = &mut dx[j * k..(j + 1) * k];
                            for ii in 0..m {
                                let c = dyc[ii];
                                if c == T::zero() {
                                    continue;
                                }
                                let wr = &wv[ii * k..(ii + 1) * k];
                                for kk in 0..k {
                                    dxc[kk] = dxc[kk] + c * wr[kk];
                                }
                            }
                        }
                    }
                    {
                        let xv = self.val(*x);
                        let dw = acc(&mut adj, *w, m * k);
                        for j in 0..n {
                            let dyc = &dy[j * m..(j + 1) * m];
                            let xc = &xv[j * k..(j + 1) * k];
                            for ii in 0..m {
                                let c = dyc[ii];
                                if c == T::zero() {
                                    continue;
                                }
                                let dwr = &mut dw[ii * k..(ii + 1) * k];
                                for kk in 0..k {
                                    dwr[kk] = dwr[kk] + c * xc[kk];
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let db = acc(&mut adj, *b, m);
                        for j in 0..n {
                            for ii in 0..m {
                                db[ii] = db[ii] + dy[j * m + ii];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let da = acc(&mut adj, *a, dy.len());
                    for (d, &g) in da.iter_mut().zip(&dy) {
                        *d = *d + g;
                    }
                    let db = acc(&mut adj, *b, dy.len());
                    for (d, &g) in db.iter_mut().zip(&dy) {
                        *d = *d + g;
                    }
                }
                Op::Sub(a, b) => {
                    let da = acc(&mut adj, *a, dy.len());
                    for (d, &g) in da.iter_mut().zip(&dy) {
                        *d = *d + g;
                    }
                    let db = acc(&mut adj, *b, dy.len());
                    for (d, &g) in db.iter_mut().zip(&dy) {
                        *d = *d - g;
                    }
                }
                Op::Mul(a, b) => {
                    {
                        let bv = self.val(*b);
                        let da = acc(&mut adj, *a, dy.len());
                        for ((d, &g), &v) in da.iter_mut().zip(&dy).zip(bv) {
                            *d = *d + g * v;
                        }
                    }
                    let av = self.val(*a);
                    let db = acc(&mut adj, *b, dy.len());
                    for ((d, &g), &v) in db.iter_mut().zip(&dy).zip(av) {
                        *d = *d + g * v;
                    }
                }
                Op::AffineScalar { x, a, .. } => {
                    let dx = acc(&mut adj, *x, dy.len());
                    for (d, &g) in dx.iter_mut().zip(&dy) {
                        *d = *d + *a * g;
                    }
                }
                Op::RowAffine { x, rows, scale, .. } => {
                    let dx = acc(&mut adj, *x, dy.len());
                    for (i, (d, &g)) in dx.iter_mut().zip(&dy).enumerate() {
                        *d = *d + scale[i % rows] * g;
                    }
                }
                Op::SelectRows { x, rows_in, idx } => {
                    let rows_out = idx.len();
                    let n = dy.len() / rows_out;
                    let dx = acc(&mut adj, *x, rows_in * n);
                    for j in 0..n {
                        for (ii, &r) in idx.iter().enumerate() {
                            let d = &mut dx[j * rows_in + r as usize];
                            *d = *d + dy[j * rows_out + ii];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let l = self.len(p);
                        let dp = acc(&mut adj, p, l);
                        for (d, &g) in dp.iter_mut().zip(&dy[off..off + l]) {
                            *d = *d + g;
                        }
                        off += l;
                    }
                }
                Op::StackRows { a, b, ra, rb } => {
                    let rows = ra + rb;
                    let n = dy.len() / rows;
                    {
                        let da = acc(&mut adj, *a, ra * n);
                        for j in 0..n {
                            for r in 0..*ra {
                                da[j * ra + r] = da[j * ra + r] + dy[j * rows + r];
                            }
                        }
                    }
                    let db = acc(&mut adj, *b, rb * n);
                    for j in 0..n {
                        for r in 0..*rb {
                            db[j * rb + r] = db[j * rb + r] + dy[j * rows + ra + r];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let yv = &self.vals[i];
                    let dx = acc(&mut adj, *x, dy.len());
                    for ((d, &g), &y) in dx.iter_mut().zip(&dy).zip(yv) {
                        *d = *d + g * (T::one() - y * y);
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = &self.vals[i];
                    let dx = acc(&mut adj, *x, dy.len());
                    for ((d, &g), &y) in dx.iter_mut().zip(&dy).zip(yv) {
                        *d = *d + g * y * (T::one() - y);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.val(*x);
                    let dx = acc(&mut adj, *x, dy.len());
                    for ((d, &g), &v) in dx.iter_mut().zip(&dy).zip(xv) {
                        if v > T::zero() {
                            *d = *d + g;
                        }
                    }
                }
                Op::Square(x) => {
                    let xv = self.val(*x);
                    let two = T::from_f64(2.0);
                    let dx = acc(&mut adj, *x, dy.len());
                    for ((d, &g), &v) in dx.iter_mut().zip(&dy).zip(xv) {
                        *d = *d + two * v * g;
                    }
                }
                Op::Recip(x) => {
                    let yv = &self.vals[i];
                    let dx = acc(&mut adj, *x, dy.len());
                    for ((d, &g), &y) in dx.iter_mut().zip(&dy).zip(yv) {
                        *d = *d - g * y * y;
                    }
                }
                Op::SumAll(x) => {
                    let g = dy[0];
                    let dx = acc(&mut adj, *x, self.len(*x));
                    for d in dx.iter_mut() {
                        *d = *d + g;
                    }
                }
                Op::BroadcastColMul { x, s, rows } => {
                    let n = self.len(*s);
                    {
                        let sv = self.val(*s);
                        let dx = acc(&mut adj, *x, rows * n);
                        for j in 0..n {
                            for r in 0..*rows {
                                dx[j * rows + r] = dx[j * rows + r] + dy[j * rows + r] * sv[j];
                            }
                        }
                    }
                    let xv = self.val(*x);
                    let ds = acc(&mut adj, *s, n);
                    for j in 0..n {
                        let mut acc_s = T::zero();
                        for r in 0..*rows {
                            acc_s = acc_s + xv[j * rows + r] * dy[j * rows + r];
                        }
                        ds[j] = ds[j] + acc_s;
                    }
                }
                Op::SegmentDot {
                    values,
                    weights,
                    d,
                    seg,
                } => {
                    let l = self.len(*weights);
                    {
                        let wv = self.val(*weights);
                        let dv = acc(&mut adj, *values, d * l);
                        for ii in 0..l {
                            let s = ii / seg;
                            let w = wv[ii];
                            if w == T::zero() {
                                continue;
                            }
                            let dyc = &dy[s * d..(s + 1) * d];
                            let dvc = &mut dv[ii * d..(ii + 1) * d];
                            for dd in 0..*d {
                                dvc[dd] = dvc[dd] + w * dyc[dd];
                            }
                        }
                    }
                    let vv = self.val(*values);
                    let dw = acc(&mut adj, *weights, l);
                    for ii in 0..l {
                        let s = ii / seg;
                        let dyc = &dy[s * d..(s + 1) * d];
                        let vc = &vv[ii * d..(ii + 1) * d];
                        let mut a = T::zero();
                        for dd in 0..*d {
                            a = a + vc[dd] * dyc[dd];
                        }
                        dw[ii] = dw[ii] + a;
                    }
                }
                Op::TrilerpWeights { frac } => {
                    let n = self.len(*frac) / 3;
                    let fv = self.val(*frac);
                    let one = T::one();
                    let df = acc(&mut adj, *frac, 3 * n);
                    for j in 0..n {
                        let (tx, ty, tz) = (fv[j * 3], fv[j * 3 + 1], fv[j * 3 + 2]);
                        let (mut gx, mut gy, mut gz) = (T::zero(), T::zero(), T::zero());
                        for c in 0..8usize {
                            let g = dy[j * 8 + c];
                            if g == T::zero() {
                                continue;
                            }
                            let wx = if c & 1 != 0 { tx } else { one - tx };
                            let wy = if c & 2 != 0 { ty } else { one - ty };
                            let wz = if c & 4 != 0 { tz } else { one - tz };
                            let sx = if c & 1 != 0 { one } else { -one };
                            let sy = if c & 2 != 0 { one } else { -one };
                            let sz = if c & 4 != 0 { one } else { -one };
                            gx = gx + g * sx * wy * wz;
                            gy = gy + g * wx * sy * wz;
                            gz = gz + g * wx * wy * sz;
                        }
                        df[j * 3] = df[j * 3] + gx;
                        df[j * 3 + 1] = df[j * 3 + 1] + gy;
                        df[j * 3 + 2] = df[j * 3 + 2] + gz;
                    }
                }
                Op::BilerpWeights { frac } => {
                    let n = self.len(*frac) / 2;
                    let fv = self.val(*frac);
                    let one = T::one();
                    let df = acc(&mut adj, *frac, 2 * n);
                    for j in 0..n {
                        let (tx, ty) = (fv[j * 2], fv[j * 2 + 1]);
                        let (mut gx, mut gy) = (T::zero(), T::zero());
                        for c in 0..4usize {
                            let g = dy[j * 4 + c];
                            if g == T::zero() {
                                continue;
                            }
                            let wx = if c & 1 != 0 { tx } else { one - tx };
                            let wy = if c & 2 != 0 { ty } else { one - ty };
                            let sx = if c & 1 != 0 { one } else { -one };
                            let sy = if c & 2 != 0 { one } else { -one };
                            gx = gx + g * sx * wy;
                            gy = gy + g * wx * sy;
                        }
                        df[j * 2] = df[j * 2] + gx;
                        df[j * 2 + 1] = df[j * 2 + 1] + gy;
                    }
                }
                Op::GatherWeighted {
                    group,
                    idx,
                    weights,
                    d,
                    k,
                } => {
                    let n = idx.len() / k;
                    let pv = store.values(*group);
                    {
                        let wv = self.val(*weights);
                        let mut span = vec![T::zero(); *d];
                        for j in 0..n {
                            let dyc = &dy[j * d..(j + 1) * d];
                            for c in 0..*k {
                                let w = wv[j * k + c];
                                let base = idx[j * k + c] as usize;
                                for dd in 0..*d {
                                    span[dd] = w * dyc[dd];
                                }
                                grads.add_span(*group, base, &span);
                            }
                        }
                    }
                    let dw = acc(&mut adj, *weights, n * k);
                    for j in 0..n {
                        let dyc = &dy[j * d..(j + 1) * d];
                        for c in 0..*k {
                            let base = idx[j * k + c] as usize;
                            let pspan = &pv[base..base + d];
                            let mut a = T::zero();
                            for dd in 0..*d {
                                a = a + pspan[dd] * dyc[dd];
                            }
                            dw[j * k + c] = dw[j * k + c] + a;
                        }
                    }
                }
                Op::RotatePoints { q, x } => {
                    let qv = self.val(*q);
                    let qq = [qv[0], qv[1], qv[2], qv[3]];
                    let r = quat_to_rot(qq);
                    let dr = quat_to_rot_deriv(qq);
                    let xv = self.val(*x);
                    let n = self.len(*x) / 3;
                    {
                        let dx = acc(&mut adj, *x, 3 * n);
                        for j in 0..n {
                            let dyc = [dy[j * 3], dy[j * 3 + 1], dy[j * 3 + 2]];
                            for ii in 0..3 {
                                // dx = R^T dy
                                dx[j * 3 + ii] = dx[j * 3 + ii]
                                    + r[0][ii] * dyc[0]
                                    + r[1][ii] * dyc[1]
                                    + r[2][ii] * dyc[2];
                            }
                        }
                    }
                    let dq = acc(&mut adj, *q, 4);
                    for j in 0..n {
                        let p = [xv[j * 3], xv[j * 3 + 1], xv[j * 3 + 2]];
                        let dyc = [dy[j * 3], dy[j * 3 + 1], dy[j * 3 + 2]];
                        for (kk, drk) in dr.iter().enumerate() {
                            let mut a = T::zero();
                            for ii in 0..3 {
                                a = a
                                    + dyc[ii]
                                        * (drk[ii][0] * p[0] + drk[ii][1] * p[1] + drk[ii][2] * p[2]);
                            }
                            dq[kk] = dq[kk] + a;
                        }
                    }
                }
                Op::NormalizeCols3(x) => {
                    let xv = self.val(*x);
                    let yv = &self.vals[i];
                    let n = dy.len() / 3;
                    let dx = acc(&mut adj, *x, 3 * n);
                    for j in 0..n {
                        let xc = &xv[j * 3..(j + 1) * 3];
                        let yc = &yv[j * 3..(j + 1) * 3];
                        let dyc = &dy[j * 3..(j + 1) * 3];
                        let norm = (xc[0] * xc[0] + xc[1] * xc[1] + xc[2] * xc[2]).sqrt();
                        let ydy = yc[0] * dyc[0] + yc[1] * dyc[1] + yc[2] * dyc[2];
                        for ii in 0..3 {
                            dx[j * 3 + ii] = dx[j * 3 + ii] + (dyc[ii] - yc[ii] * ydy) / norm;
                        }
                    }
                }
                Op::RayPoints {
                    o,
                    dirs,
                    z,
                    samples,
                } => {
                    let rays = self.len(*dirs) / 3;
                    {
                        let dd = acc(&mut adj, *dirs, 3 * rays);
                        for r in 0..rays {
                            for s in 0..*samples {
                                let col = (r * samples + s) * 3;
                                let zi = z[r * samples + s];
                                for ii in 0..3 {
                                    dd[r * 3 + ii] = dd[r * 3 + ii] + zi * dy[col + ii];
                                }
                            }
                        }
                    }
                    let doo = acc(&mut adj, *o, 3);
                    for col in 0..rays * samples {
                        for ii in 0..3 {
                            doo[ii] = doo[ii] + dy[col * 3 + ii];
                        }
                    }
                }
            }
        }
    }
}
