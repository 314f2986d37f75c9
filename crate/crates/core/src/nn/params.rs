use ndarray::{ArrayViewD, ArrayViewMutD};

use super::scalar::Scalar;

pub type ParamSink<'a, F> = Vec<(String, ArrayViewD<'a, F>)>;
pub type ParamSinkMut<'a, F> = Vec<ArrayViewMutD<'a, F>>;

/// Enumerates trainable tensors in a fixed order.
///
/// `collect` and `collect_mut` must visit the same tensors in the same order;
/// gradients are stored in a value of the same type, so optimizers and
/// serializers can zip the two listings.
pub trait Params<F: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>);
    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>);

    fn named_tensors(&self, prefix: &str) -> ParamSink<'_, F> {
        let mut out = Vec::new();
        self.collect(prefix, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> ParamSinkMut<'_, F> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn parameter_count(&self) -> usize {
        self.named_tensors("").iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named_tensors("")
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Sets every tensor entry to zero.
    fn zero(&mut self) {
        for mut t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    /// `self += other * scale`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: F)
    where
        Self: Sized,
    {
        let src = other.named_tensors("");
        for (mut dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.scaled_add(scale, &s);
        }
    }
}

impl<F: Scalar, P: Params<F>> Params<F> for Vec<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        for (i, p) in self.iter().enumerate() {
            p.collect(&format!("{prefix}.{i}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        for p in self.iter_mut() {
            p.collect_mut(out);
        }
    }
}

impl<F: Scalar, P: Params<F>> Params<F> for Option<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        if let Some(p) = self {
            p.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        if let Some(p) = self {
            p.collect_mut(out);
        }
    }
}
