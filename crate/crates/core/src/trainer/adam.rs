use crate::error::{Error, Result};
use crate::tensor::{ParamKind, ParamStore, Scalar};

/// Adam with bias correction. Moments are kept per parameter slot of the
/// store they were created for; buffers and frozen weights are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

pub const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = |p: &crate::tensor::Parameter<T>| match p.kind {
            ParamKind::Weight => vec![T::zero(); p.value.len()],
            ParamKind::Buffer => Vec::new(),
        };
        let first: Vec<_> = store.iter().map(|(_, p)| zeros(p)).collect();
        Adam { beta1, beta2, eps: ADAM_EPS, step: 0, second: first.clone(), first }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments of parameter slot `index` (empty for buffers).
    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.first[index], &self.second[index])
    }

    /// Restores state saved by [`Adam::moments`] / [`Adam::steps`].
    pub fn restore(&mut self, step: u64, index: usize, first: Vec<T>, second: Vec<T>) -> Result<()> {
        let slot = self
            .first
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no optimizer slot {index}")))?;
        if first.len() != slot.len() || second.len() != slot.len() {
            return Err(Error::shape("adam restore", format!("slot {index} holds {} values", slot.len())));
        }
        self.step = step;
        self.first[index] = first;
        self.second[index] = second;
        Ok(())
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Nothing is modified if any trainable gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { context: format!("gradient of {}", p.name) });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (u1, u2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (c1, c2, lr, eps) = (T::of(c1), T::of(c2), T::of(lr), T::of(self.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable || p.kind != ParamKind::Weight {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + u1 * g;
                *v = b2 * *v + u2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[values.len()], values).unwrap(), ParamKind::Weight).unwrap();
        s.add("frozen", Tensor::from_f64(&[1], &[2.0]).unwrap(), ParamKind::Weight).unwrap();
        s.add("running", Tensor::from_f64(&[1], &[3.0]).unwrap(), ParamKind::Buffer).unwrap();
        s.set_trainable(|n| n == "w");
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0]);
        let mut adam = Adam::new(&s, 0.9, 0.999);
        s.iter_mut().for_each(|p| p.grad.fill(1.0));
        adam.step(&mut s, 0.1).unwrap();
        let w = s.value(s.id("w").unwrap()).data()[0];
        assert!((w + 0.1).abs() < 1e-7, "{w}");
        assert_eq!(s.value(s.id("frozen").unwrap()).data()[0], 2.0);
        assert_eq!(s.value(s.id("running").unwrap()).data()[0], 3.0);
    }

    #[test]
    fn zero_gradient_only_advances_counter() {
        let mut s = store(&[0.5, -1.5]);
        let mut adam = Adam::new(&s, 0.9, 0.999);
        adam.step(&mut s, 0.01).unwrap();
        adam.step(&mut s, 0.01).unwrap();
        assert_eq!(adam.steps(), 2);
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[0.5, -1.5]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(&[0.5, -1.5]);
        let mut adam = Adam::new(&s, 0.9, 0.999);
        let id = s.id("w").unwrap();
        s.get_mut(id).grad[1] = f64::NAN;
        let err = adam.step(&mut s, 0.01).unwrap_err();
        assert!(err.is_numeric() && err.to_string().contains("gradient of w"), "{err}");
        assert_eq!(adam.steps(), 0);
        // A NaN on a frozen slot is ignored.
        s.get_mut(id).grad[1] = 0.0;
        let frozen = s.id("frozen").unwrap();
        s.get_mut(frozen).grad[0] = f64::NAN;
        adam.step(&mut s, 0.01).unwrap();
    }

    #[test]
    fn matches_textbook_recurrence() {
        // Two steps with grads 1 then -2, worked by hand.
        let mut s = store(&[1.0]);
        let mut adam = Adam::new(&s, 0.9, 0.999);
        let id = s.id("w").unwrap();
        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 1.0f64), (2, -2.0)] {
            s.get_mut(id).grad[0] = g;
            adam.step(&mut s, 0.05).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.value(id).data()[0] - w).abs() < 1e-14);
    }
}
