//! Parameter trees.
//!
//! Every learnable structure is generic over its leaf type: `Tensor` for
//! storage, `Var` once bound to a tape, and `Tensor` again for gradients.
//! The `param_tree!` macro derives structure-preserving `map` and named
//! visitation for each of them.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Named traversal of the learnable leaves of a parameter structure.
pub trait ParamTree {
    type Leaf;

    fn visit_leaves(&self, prefix: &str, f: &mut dyn FnMut(String, &Self::Leaf));

    fn visit_leaves_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Self::Leaf));

    fn leaf_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_leaves("", &mut |n, _| names.push(n));
        names
    }
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

macro_rules! param_tree {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $kind:ident $field:ident : $fty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        pub struct $name<P = $crate::tensor::Tensor> {
            $( $(#[$fmeta])* pub $field: $fty, )*
        }

        impl<P> $name<P> {
            /// Rebuilds the structure with every leaf passed through `f`.
            pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name { $( $field: param_tree!(@map $kind self.$field, f), )* }
            }
        }

        impl<P> $crate::params::ParamTree for $name<P> {
            type Leaf = P;

            #[allow(unused_variables)]
            fn visit_leaves(&self, prefix: &str, f: &mut dyn FnMut(String, &P)) {
                $( param_tree!(@visit $kind self.$field, prefix, stringify!($field), f); )*
            }

            #[allow(unused_variables)]
            fn visit_leaves_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
                $( param_tree!(@visit_mut $kind self.$field, prefix, stringify!($field), f); )*
            }
        }
    };

    (@map tensor $e:expr, $f:ident) => { $f(&$e) };
    (@map nested $e:expr, $f:ident) => { $e.map($f) };
    (@map list $e:expr, $f:ident) => {{
        let mut out = Vec::with_capacity($e.len());
        for item in &$e {
            out.push(item.map($f));
        }
        out
    }};
    (@map option $e:expr, $f:ident) => {
        match &$e {
            Some(inner) => Some(inner.map($f)),
            None => None,
        }
    };
    (@map fixed $e:expr, $f:ident) => { $e.clone() };

    (@visit tensor $e:expr, $p:ident, $n:expr, $f:ident) => {
        $f($crate::params::join($p, $n), &$e)
    };
    (@visit nested $e:expr, $p:ident, $n:expr, $f:ident) => {
        $crate::params::ParamTree::visit_leaves(&$e, &$crate::params::join($p, $n), $f)
    };
    (@visit list $e:expr, $p:ident, $n:expr, $f:ident) => {
        for (i, item) in $e.iter().enumerate() {
            let name = format!("{}.{}", $crate::params::join($p, $n), i);
            $crate::params::ParamTree::visit_leaves(item, &name, $f);
        }
    };
    (@visit option $e:expr, $p:ident, $n:expr, $f:ident) => {
        if let Some(inner) = &$e {
            $crate::params::ParamTree::visit_leaves(inner, &$crate::params::join($p, $n), $f);
        }
    };
    (@visit fixed $e:expr, $p:ident, $n:expr, $f:ident) => {};

    (@visit_mut tensor $e:expr, $p:ident, $n:expr, $f:ident) => {
        $f($crate::params::join($p, $n), &mut $e)
    };
    (@visit_mut nested $e:expr, $p:ident, $n:expr, $f:ident) => {
        $crate::params::ParamTree::visit_leaves_mut(&mut $e, &$crate::params::join($p, $n), $f)
    };
    (@visit_mut list $e:expr, $p:ident, $n:expr, $f:ident) => {
        for (i, item) in $e.iter_mut().enumerate() {
            let name = format!("{}.{}", $crate::params::join($p, $n), i);
            $crate::params::ParamTree::visit_leaves_mut(item, &name, $f);
        }
    };
    (@visit_mut option $e:expr, $p:ident, $n:expr, $f:ident) => {
        if let Some(inner) = &mut $e {
            $crate::params::ParamTree::visit_leaves_mut(inner, &$crate::params::join($p, $n), $f);
        }
    };
    (@visit_mut fixed $e:expr, $p:ident, $n:expr, $f:ident) => {};
}

pub(crate) use param_tree;

/// Flattens the leaves of a tree in visitation order.
pub fn flatten<T: ParamTree<Leaf = Tensor>>(tree: &T) -> Vec<Tensor> {
    let mut out = Vec::new();
    tree.visit_leaves("", &mut |_, t| out.push(t.clone()));
    out
}

pub fn count_params<T: ParamTree<Leaf = Tensor>>(tree: &T) -> usize {
    let mut n = 0;
    tree.visit_leaves("", &mut |_, t| n += t.numel());
    n
}

/// Overwrites the leaves of a tree from a flat list in visitation order.
pub fn assign_flat<T: ParamTree<Leaf = Tensor>>(tree: &mut T, values: &[Tensor]) {
    let mut i = 0;
    tree.visit_leaves_mut("", &mut |_, t| {
        *t = values[i].clone();
        i += 1;
    });
    assert_eq!(i, values.len(), "parameter count mismatch");
}

/// Gaussian matrix with the given standard deviation.
pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn([rows, cols], |_| dist.sample(rng))
}

/// Linear-layer weight scaled by `1/sqrt(fan_in)`.
pub fn linear_weight(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    gaussian(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn zero_bias(width: usize) -> Tensor {
    Tensor::zeros([1, width])
}

#[cfg(test)]
mod tests {
    use super::*;

    param_tree! {
        #[derive(Clone, Debug)]
        pub struct Inner {
            tensor w: P,
            fixed scale: f64,
        }
    }

    param_tree! {
        #[derive(Clone, Debug)]
        pub struct Outer {
            tensor bias: P,
            nested inner: Inner<P>,
            list layers: Vec<Inner<P>>,
            option extra: Option<Inner<P>>,
        }
    }

    fn sample() -> Outer {
        let inner = |v: f64| Inner {
            w: Tensor::full([2], v),
            scale: v,
        };
        Outer {
            bias: Tensor::zeros([1]),
            inner: inner(1.0),
            layers: vec![inner(2.0), inner(3.0)],
            extra: Some(inner(4.0)),
        }
    }

    #[test]
    fn names_follow_structure() {
        let names = sample().leaf_names();
        assert_eq!(names, ["bias", "inner.w", "layers.0.w", "layers.1.w", "extra.w"]);
    }

    #[test]
    fn map_preserves_fixed_fields_and_flatten_roundtrips() {
        let s = sample();
        let doubled = s.map(&mut |t| t.scale(2.0));
        assert_eq!(doubled.layers[1].scale, 3.0);
        assert_eq!(doubled.layers[1].w.data(), &[6.0, 6.0]);
        let mut copy = s.clone();
        assign_flat(&mut copy, &flatten(&doubled));
        assert_eq!(copy.extra.unwrap().w.data(), &[8.0, 8.0]);
        assert_eq!(count_params(&s), 9);
    }
}
