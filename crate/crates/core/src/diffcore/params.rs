//! Flat trainable parameter groups plus the gradient buffer the tape
//! accumulates into. Groups are growable (the voxel field gains vertices as
//! new space is observed); gradients track a touched-entry bitset so sparse
//! updates skip the untouched bulk.

use crate::real::Real;

/// Handle to one parameter group inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupId(pub(crate) u32);

impl GroupId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    pub name: String,
    pub values: Vec<T>,
    /// Default learning rate for this group (optimization phases may override).
    pub lr: T,
    pub trainable: bool,
}

/// All trainable state of the engine, addressed as (group, offset).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    groups: Vec<ParamGroup<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn add_group(&mut self, name: &str, values: Vec<T>, lr: T, trainable: bool) -> GroupId {
        assert!(
            self.by_name(name).is_none(),
            "duplicate parameter group {name:?}"
        );
        self.groups.push(ParamGroup {
            name: name.to_string(),
            values,
            lr,
            trainable,
        });
        GroupId(self.groups.len() as u32 - 1)
    }

    pub fn by_name(&self, name: &str) -> Option<GroupId> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .map(|i| GroupId(i as u32))
    }

    #[inline]
    pub fn group(&self, id: GroupId) -> &ParamGroup<T> {
        &self.groups[id.index()]
    }

    #[inline]
    pub fn group_mut(&mut self, id: GroupId) -> &mut ParamGroup<T> {
        &mut self.groups[id.index()]
    }

    #[inline]
    pub fn values(&self, id: GroupId) -> &[T] {
        &self.groups[id.index()].values
    }

    #[inline]
    pub fn values_mut(&mut self, id: GroupId) -> &mut [T] {
        &mut self.groups[id.index()].values
    }

    /// Append entries to a group; existing offsets stay valid.
    pub fn grow(&mut self, id: GroupId, extra: &[T]) {
        self.groups[id.index()].values.extend_from_slice(extra);
    }

    pub fn len(&self, id: GroupId) -> usize {
        self.groups[id.index()].values.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &ParamGroup<T>)> {
        self.groups
            .iter()
            .enumerate()
            .map(|(i, g)| (GroupId(i as u32), g))
    }
}

/// Per-group dense gradient buffers with a touched bitset.
#[derive(Debug, Clone)]
pub struct GradientBuffer<T> {
    grads: Vec<Vec<T>>,
    touched: Vec<Vec<u64>>,
}

impl<T: Real> GradientBuffer<T> {
    /// Zero buffer sized to the current store.
    pub fn new(store: &ParamStore<T>) -> Self {
        let grads: Vec<Vec<T>> = store
            .groups
            .iter()
            .map(|g| vec![T::zero(); g.values.len()])
            .collect();
        let touched = grads.iter().map(|g| vec![0u64; g.len().div_ceil(64)]).collect();
        Self { grads, touched }
    }

    #[inline]
    pub fn add(&mut self, id: GroupId, idx: usize, v: T) {
        let g = id.index();
        self.grads[g][idx] = self.grads[g][idx] + v;
        self.touched[g][idx >> 6] |= 1u64 << (idx & 63);
    }

    /// Accumulate a contiguous span (hot path for gathered embeddings).
    #[inline]
    pub fn add_span(&mut self, id: GroupId, offset: usize, vals: &[T]) {
        let g = id.index();
        let dst = &mut self.grads[g][offset..offset + vals.len()];
        for (d, v) in dst.iter_mut().zip(vals) {
            *d = *d + *v;
        }
        let bits = &mut self.touched[g];
        for i in offset..offset + vals.len() {
            bits[i >> 6] |= 1u64 << (i & 63);
        }
    }

    #[inline]
    pub fn grad(&self, id: GroupId) -> &[T] {
        &self.grads[id.index()]
    }

    #[inline]
    pub fn is_touched(&self, id: GroupId, idx: usize) -> bool {
        self.touched[id.index()][idx >> 6] & (1u64 << (idx & 63)) != 0
    }

    /// Zero gradients and touched bits over a range (used to freeze the gauge
    /// frame and non-keyframe poses: an untouched entry is never stepped, so
    /// its parameters and optimizer moments stay bit-identical).
    pub fn clear_range(&mut self, id: GroupId, range: std::ops::Range<usize>) {
        let g = id.index();
        for i in range {
            self.grads[g][i] = T::zero();
            self.touched[g][i >> 6] &= !(1u64 << (i & 63));
        }
    }

    /// Indices with their touched bit set, ascending.
    pub fn touched_indices(&self, id: GroupId) -> impl Iterator<Item = usize> + '_ {
        let g = id.index();
        let n = self.grads[g].len();
        self.touched[g]
            .iter()
            .enumerate()
            .flat_map(move |(w, &bits)| {
                let mut rest = bits;
                std::iter::from_fn(move || {
                    if rest == 0 {
                        return None;
                    }
                    let b = rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    Some(w * 64 + b)
                })
            })
            .filter(move |&i| i < n)
    }

    /// Err with the offending group name if any touched gradient is non-finite.
    pub fn check_finite(&self, store: &ParamStore<T>) -> Result<(), String> {
        for (i, grads) in self.grads.iter().enumerate() {
            let id = GroupId(i as u32);
            for idx in self.touched_indices(id) {
                if !grads[idx].is_finite() {
                    return Err(format!(
                        "non-finite gradient in group {:?} at {}",
                        store.group(id).name,
                        idx
                    ));
                }
            }
        }
        Ok(())
    }
}
