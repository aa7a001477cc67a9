//! Time-dependent vector fields `v(x, t, c)`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Conditioning label. [`Condition::Null`] is the dropped condition used
/// for the unconditional branch of classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    #[default]
    Null,
    Label(u32),
}

/// A velocity field the solvers can integrate.
///
/// Implementations must be safe for concurrent read-only evaluation; batch
/// solves call `velocity` from several threads at once.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    /// Writes `v(x, t, cond)` into `out` (length [`VectorField::dim`]).
    fn velocity(&self, x: &[f64], t: f64, cond: Condition, out: &mut [f64]) -> Result<()>;
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x: &[f64], t: f64, cond: Condition, out: &mut [f64]) -> Result<()> {
        (**self).velocity(x, t, cond, out)
    }
}

impl<F: VectorField + ?Sized> VectorField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x: &[f64], t: f64, cond: Condition, out: &mut [f64]) -> Result<()> {
        (**self).velocity(x, t, cond, out)
    }
}

/// Closure-backed field, ignoring the condition. Handy for analytic test fields.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn velocity(&self, x: &[f64], t: f64, _cond: Condition, out: &mut [f64]) -> Result<()> {
        (self.f)(x, t, out);
        Ok(())
    }
}

/// Wraps a field and counts every evaluation, including concurrent ones.
pub struct CountingField<F> {
    inner: F,
    count: AtomicU64,
}

impl<F: VectorField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: VectorField> VectorField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn velocity(&self, x: &[f64], t: f64, cond: Condition, out: &mut [f64]) -> Result<()> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(x, t, cond, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Exec;

    #[test]
    fn counter_is_exact_under_concurrency() {
        let field = CountingField::new(FnField::new(3, |x, _t, out| out.copy_from_slice(x)));
        Exec::Parallel.map(10_000, |i| {
            let mut out = [0.0; 3];
            field
                .velocity(&[i as f64, 0.0, 1.0], 0.5, Condition::Null, &mut out)
                .unwrap();
            out[0]
        });
        assert_eq!(field.evaluations(), 10_000);
        field.reset();
        assert_eq!(field.evaluations(), 0);
    }
}
