//! Parameter-tree plumbing: hierarchical named tensors, scalar-type mapping,
//! and flat-vector packing for optimizers and checkpoints.
//!
//! Parameter structs are declared with [`param_struct!`]; the macro derives
//! [`ParamOps`], which walks every tensor leaf in a fixed order with a
//! dotted hierarchical name ("encoder.0.attn.wq.w"). Everything downstream
//! (partitioning, checkpoints, optimizers, tangent seeding) keys off those
//! names and that order.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3};
use std::collections::HashMap;

/// Read-only view of one tensor leaf.
pub enum TensorRef<'a, S: Scalar> {
    A1(&'a Array1<S>),
    A2(&'a Array2<S>),
    A3(&'a Array3<S>),
}

/// Mutable view of one tensor leaf.
pub enum TensorMut<'a, S: Scalar> {
    A1(&'a mut Array1<S>),
    A2(&'a mut Array2<S>),
    A3(&'a mut Array3<S>),
}

impl<'a, S: Scalar> TensorRef<'a, S> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::A1(a) => a.len(),
            TensorRef::A2(a) => a.len(),
            TensorRef::A3(a) => a.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::A1(a) => a.shape().to_vec(),
            TensorRef::A2(a) => a.shape().to_vec(),
            TensorRef::A3(a) => a.shape().to_vec(),
        }
    }
    /// Iterates elements in logical (row-major) order.
    pub fn for_each(&self, mut f: impl FnMut(S)) {
        match self {
            TensorRef::A1(a) => a.iter().for_each(|&v| f(v)),
            TensorRef::A2(a) => a.iter().for_each(|&v| f(v)),
            TensorRef::A3(a) => a.iter().for_each(|&v| f(v)),
        }
    }
}

impl<'a, S: Scalar> TensorMut<'a, S> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::A1(a) => a.len(),
            TensorMut::A2(a) => a.len(),
            TensorMut::A3(a) => a.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut S)) {
        match self {
            TensorMut::A1(a) => a.iter_mut().for_each(&mut f),
            TensorMut::A2(a) => a.iter_mut().for_each(&mut f),
            TensorMut::A3(a) => a.iter_mut().for_each(&mut f),
        }
    }
}

/// Operations every parameter node (leaf tensor, Vec of nodes, or generated
/// struct) supports.
pub trait ParamOps<S: Scalar>: Sized + Clone + Send + Sync {
    type Mapped<T: Scalar>: ParamOps<T>;

    /// Converts scalar type elementwise (e.g. f64 params -> dual params).
    fn map_scalar<T: Scalar>(&self, f: &mut dyn FnMut(S) -> T) -> Self::Mapped<T>;

    /// Visits every leaf in declaration order with its dotted name.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'a, S>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, S>));

    /// Elementwise in-place combine with a structurally identical other.
    fn zip_apply(&mut self, other: &Self, f: &mut dyn FnMut(&mut S, S));
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

macro_rules! leaf_impl {
    ($arr:ident, $variant:ident) => {
        impl<S: Scalar> ParamOps<S> for $arr<S> {
            type Mapped<T: Scalar> = $arr<T>;

            fn map_scalar<T: Scalar>(&self, f: &mut dyn FnMut(S) -> T) -> $arr<T> {
                self.mapv(|v| f(v))
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'a, S>)) {
                f(prefix, TensorRef::$variant(self));
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, S>)) {
                f(prefix, TensorMut::$variant(self));
            }

            fn zip_apply(&mut self, other: &Self, f: &mut dyn FnMut(&mut S, S)) {
                assert_eq!(self.shape(), other.shape(), "zip_apply shape mismatch");
                for (a, &b) in self.iter_mut().zip(other.iter()) {
                    f(a, b);
                }
            }
        }
    };
}

leaf_impl!(Array1, A1);
leaf_impl!(Array2, A2);
leaf_impl!(Array3, A3);

impl<S: Scalar, P: ParamOps<S>> ParamOps<S> for Vec<P> {
    type Mapped<T: Scalar> = Vec<P::Mapped<T>>;

    fn map_scalar<T: Scalar>(&self, f: &mut dyn FnMut(S) -> T) -> Vec<P::Mapped<T>> {
        self.iter().map(|p| p.map_scalar(f)).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'a, S>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_, S>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn zip_apply(&mut self, other: &Self, f: &mut dyn FnMut(&mut S, S)) {
        assert_eq!(self.len(), other.len(), "zip_apply length mismatch");
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.zip_apply(b, f);
        }
    }
}

/// Declares a parameter struct generic over the scalar type and derives
/// [`ParamOps`] for it.
#[macro_export]
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident : $fty:ty),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug)]
        pub struct $name<S: $crate::scalar::Scalar> {
            $(pub $field: $fty),+
        }

        impl<S: $crate::scalar::Scalar> $crate::params::ParamOps<S> for $name<S> {
            type Mapped<T: $crate::scalar::Scalar> = $name<T>;

            fn map_scalar<T: $crate::scalar::Scalar>(
                &self,
                f: &mut dyn FnMut(S) -> T,
            ) -> $name<T> {
                $name {
                    $($field: $crate::params::ParamOps::map_scalar(&self.$field, f)),+
                }
            }

            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, $crate::params::TensorRef<'a, S>),
            ) {
                $(
                    $crate::params::ParamOps::visit(
                        &self.$field,
                        &$crate::params::join_name(prefix, stringify!($field)),
                        f,
                    );
                )+
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, $crate::params::TensorMut<'_, S>),
            ) {
                $(
                    $crate::params::ParamOps::visit_mut(
                        &mut self.$field,
                        &$crate::params::join_name(prefix, stringify!($field)),
                        f,
                    );
                )+
            }

            fn zip_apply(&mut self, other: &Self, f: &mut dyn FnMut(&mut S, S)) {
                $(
                    $crate::params::ParamOps::zip_apply(&mut self.$field, &other.$field, f);
                )+
            }
        }
    };
}

/// Name joining used by the macro (public so macro expansions can reach it).
pub fn join_name(prefix: &str, field: &str) -> String {
    join(prefix, field)
}

/// One named tensor's place in the flat layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Flat layout of a parameter tree: names, shapes, offsets in visit order.
#[derive(Clone, Debug)]
pub struct FlatIndex {
    pub entries: Vec<FlatEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl FlatIndex {
    pub fn build<S: Scalar>(p: &impl ParamOps<S>) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        p.visit("", &mut |name, t| {
            let len = t.len();
            entries.push(FlatEntry {
                name: name.to_string(),
                offset,
                len,
                shape: t.shape(),
            });
            offset += len;
        });
        let by_name = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        FlatIndex {
            entries,
            by_name,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&FlatEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Copies all values into a flat vector (visit order).
    pub fn pack(&self, p: &impl ParamOps<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        p.visit("", &mut |_, t| t.for_each(|v| out.push(v)));
        assert_eq!(out.len(), self.total, "pack: structure changed since build");
        out
    }

    /// Writes a flat vector back into the tree (visit order).
    pub fn unpack(&self, p: &mut impl ParamOps<f64>, src: &[f64]) {
        assert_eq!(src.len(), self.total, "unpack: length mismatch");
        let mut i = 0usize;
        p.visit_mut("", &mut |_, mut t| {
            t.for_each_mut(|v| {
                *v = src[i];
                i += 1;
            })
        });
    }
}

/// A subset of flat entries (whole tensors), used for the trainable-parameter
/// slices handed to optimizers and tangent seeding.
#[derive(Clone, Debug)]
pub struct Subset {
    /// Indices into `FlatIndex::entries`, ascending.
    pub entry_ids: Vec<usize>,
    pub total_len: usize,
}

impl Subset {
    pub fn from_names(index: &FlatIndex, names: &[&str]) -> Option<Self> {
        let mut ids: Vec<usize> = names
            .iter()
            .map(|n| index.entry_index(n))
            .collect::<Option<Vec<_>>>()?;
        ids.sort_unstable();
        let total_len = ids.iter().map(|&i| index.entries[i].len).sum();
        Some(Subset {
            entry_ids: ids,
            total_len,
        })
    }

    pub fn from_entry_ids(index: &FlatIndex, mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        let total_len = ids.iter().map(|&i| index.entries[i].len).sum();
        Subset {
            entry_ids: ids,
            total_len,
        }
    }

    /// Gathers subset values (entry order, row-major within entries).
    pub fn gather(&self, index: &FlatIndex, p: &impl ParamOps<f64>) -> Vec<f64> {
        let mut wanted: Vec<bool> = vec![false; index.entries.len()];
        for &i in &self.entry_ids {
            wanted[i] = true;
        }
        let mut out = Vec::with_capacity(self.total_len);
        let mut k = 0usize;
        p.visit("", &mut |_, t| {
            if wanted[k] {
                t.for_each(|v| out.push(v));
            }
            k += 1;
        });
        debug_assert_eq!(out.len(), self.total_len);
        out
    }

    /// Scatters subset values back into the tree.
    pub fn scatter(&self, index: &FlatIndex, p: &mut impl ParamOps<f64>, src: &[f64]) {
        assert_eq!(src.len(), self.total_len, "scatter: length mismatch");
        let mut wanted: Vec<bool> = vec![false; index.entries.len()];
        for &i in &self.entry_ids {
            wanted[i] = true;
        }
        let mut k = 0usize;
        let mut i = 0usize;
        p.visit_mut("", &mut |_, mut t| {
            if wanted[k] {
                t.for_each_mut(|v| {
                    *v = src[i];
                    i += 1;
                });
            }
            k += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Dual;
    use ndarray::{Array1, Array2, Array3};

    param_struct!(Inner {
        w: Array2<S>,
        b: Array1<S>,
    });

    param_struct!(Outer {
        first: Inner<S>,
        stack: Vec<Inner<S>>,
        kernel: Array3<S>,
    });

    fn fixture() -> Outer<f64> {
        let inner = |base: f64| Inner {
            w: Array2::from_shape_fn((2, 3), |(i, j)| base + i as f64 * 3.0 + j as f64),
            b: Array1::from_shape_fn(2, |i| base - i as f64),
        };
        Outer {
            first: inner(1.0),
            stack: vec![inner(10.0), inner(20.0)],
            kernel: Array3::from_shape_fn((2, 2, 2), |(a, b, c)| (a * 4 + b * 2 + c) as f64),
        }
    }

    #[test]
    fn visit_names_are_hierarchical_and_ordered() {
        let p = fixture();
        let mut names = Vec::new();
        p.visit("", &mut |n, _| names.push(n.to_string()));
        assert_eq!(
            names,
            vec![
                "first.w",
                "first.b",
                "stack.0.w",
                "stack.0.b",
                "stack.1.w",
                "stack.1.b",
                "kernel",
            ]
        );
    }

    #[test]
    fn pack_unpack_round_trip() {
        let p = fixture();
        let idx = FlatIndex::build(&p);
        assert_eq!(idx.total_len(), 3 * 8 + 8);
        let flat = idx.pack(&p);
        let mut q = fixture();
        q.zip_apply(&fixture(), &mut |a, _| *a = 0.0);
        idx.unpack(&mut q, &flat);
        let flat2 = idx.pack(&q);
        assert_eq!(flat, flat2);
    }

    #[test]
    fn subset_gather_scatter() {
        let p = fixture();
        let idx = FlatIndex::build(&p);
        let sub = Subset::from_names(&idx, &["first.b", "stack.1.w"]).unwrap();
        assert_eq!(sub.total_len, 2 + 6);
        let vals = sub.gather(&idx, &p);
        assert_eq!(vals.len(), 8);
        // first.b comes before stack.1.w in visit order
        assert_eq!(vals[0], p.first.b[0]);
        assert_eq!(vals[2], p.stack[1].w[[0, 0]]);

        let mut q = fixture();
        let new_vals: Vec<f64> = (0..8).map(|i| 100.0 + i as f64).collect();
        sub.scatter(&idx, &mut q, &new_vals);
        assert_eq!(q.first.b[0], 100.0);
        assert_eq!(q.stack[1].w[[1, 2]], 107.0);
        // untouched tensors unchanged
        assert_eq!(q.first.w, p.first.w);
        assert_eq!(q.stack[0].b, p.stack[0].b);
    }

    #[test]
    fn map_scalar_produces_duals() {
        let p = fixture();
        let d: Outer<Dual> = p.map_scalar(&mut |v| Dual::new(v, 2.0 * v));
        assert_eq!(d.first.w[[0, 1]].re, p.first.w[[0, 1]]);
        assert_eq!(d.first.w[[0, 1]].dt, 2.0 * p.first.w[[0, 1]]);
    }

    #[test]
    fn missing_subset_name_is_none() {
        let p = fixture();
        let idx = FlatIndex::build(&p);
        assert!(Subset::from_names(&idx, &["first.w", "nope"]).is_none());
    }
}
