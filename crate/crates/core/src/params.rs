//! Named, ordered traversal of the tensors inside a weight struct.
//!
//! Gradient buffers reuse the weight struct itself, so an optimizer step is a
//! zip over two traversals in identical order.

use crate::tensor::Tensor;

pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, scale: f64, other: &Self) {
        let src = other.named_tensors();
        let dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "parameter sets differ in layout");
        for (d, (_, s)) in dst.into_iter().zip(src) {
            d.axpy(scale, s).expect("parameter sets differ in shape");
        }
    }

    fn sum_squares(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Tensor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(self);
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for item in self.iter_mut() {
            item.collect_mut(out);
        }
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(item) = self {
            item.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        if let Some(item) = self {
            item.collect_mut(out);
        }
    }
}

/// Implements [`Parameters`] by visiting the listed fields in order.
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::params::Parameters for $ty {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::tensor::Tensor)>,
            ) {
                $( $crate::params::Parameters::collect(
                    &self.$field,
                    &$crate::params::join(prefix, stringify!($field)),
                    out,
                ); )+
            }

            fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut $crate::tensor::Tensor>) {
                $( $crate::params::Parameters::collect_mut(&mut self.$field, out); )+
            }
        }
    };
}
pub(crate) use impl_parameters;
