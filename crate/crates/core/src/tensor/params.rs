use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn set_tracked(&mut self, tracked: bool) {
        self.tensors_mut().for_each(|t| t.set_tracked(tracked));
    }

    pub fn clear_grads(&mut self) {
        self.tensors_mut().for_each(Tensor::clear_grad);
    }

    /// Records every tensor on the tape as a leaf (tracked ones get gradients).
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors().map(|t| tape.leaf(t)).collect()
    }

    /// Records every tensor as an untracked constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors().map(|t| tape.constant(t.clone())).collect()
    }

    /// Copies gradients of `vars` (as returned by [`bind`](Self::bind)) into
    /// the tracked tensors.
    pub fn store_grads(&mut self, grads: &mut Gradients<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(Error::Misaligned(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            if !t.is_tracked() {
                continue;
            }
            if let Some(g) = grads.take(v) {
                t.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Same names, same shapes, same order.
    pub fn check_aligned<U: Scalar>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Misaligned(format!("{} vs {} entries", self.len(), other.len())));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Misaligned(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites values with those of an aligned set; tracking flags are kept.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_aligned(other)?;
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(other.iter()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// `self <- mu * self + (1 - mu) * other`, element-wise.
    pub fn ema_from(&mut self, other: &ParamSet<T>, mu: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::invalid("ema", format!("mu must lie in [0, 1], got {mu}")));
        }
        self.check_aligned(other)?;
        let m = T::from_f64(mu);
        let r = T::from_f64(1.0 - mu);
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(other.iter()) {
            if mu == 1.0 {
                continue;
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = if mu == 0.0 { s } else { m * *d + r * s };
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// All values concatenated in order.
    pub fn flat(&self) -> Vec<T> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `max |self - other|` over aligned entries.
    pub fn max_abs_diff(&self, other: &ParamSet<T>) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}
