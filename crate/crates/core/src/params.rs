//! Named-parameter registry. Every learnable tensor is reachable through a
//! dotted name such as `layers.0.packet_mhsa.q.weight`; freezing, optimizer
//! state, checkpoints and the gradient audit all key on these names.

use crate::tensor::{Scalar, Tensor};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut Tensor<T>));

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n.to_string(), t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_all(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(T::zero()));
    }
}

impl<T: Scalar> Parameters<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(prefix, self)
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        f(prefix, self)
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Parameters`] for a struct whose listed fields are themselves
/// parameters, naming each after the field.
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::params::Parameters<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a mut $crate::tensor::Tensor<T>),
            ) {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

/// Copies every tensor of `src` into the same-named tensor of `dst`,
/// converting the element type. Both sides must share one layout.
pub fn copy_cast<S: Scalar, D: Scalar>(src: &impl Parameters<S>, dst: &mut impl Parameters<D>) {
    let src = src.named();
    let dst = dst.named_mut();
    assert_eq!(src.len(), dst.len(), "parameter layouts differ");
    for ((sn, st), (dn, dt)) in src.into_iter().zip(dst) {
        assert_eq!(sn, dn, "parameter layouts differ");
        assert_eq!(st.shape, dt.shape, "shape of {sn} differs");
        for (d, s) in dt.data.iter_mut().zip(&st.data) {
            *d = D::from(*s).expect("finite cast");
        }
    }
}
