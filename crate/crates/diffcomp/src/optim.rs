use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::store::{EntryKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer over every trainable entry of
/// one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |store: &ParamStore<T>| {
            store
                .entries()
                .map(|(_, e)| match e.kind {
                    EntryKind::Param => vec![T::zero(); e.value.numel()],
                    EntryKind::Buffer => Vec::new(),
                })
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`, then clears
    /// them. Fails without touching anything if a parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(invalid("adam", "optimizer was built for a different store"));
        }
        for (_, e) in store.entries() {
            if e.kind == EntryKind::Param && e.grad.is_none() {
                return Err(TensorError::MissingGradient(e.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bias1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if e.kind != EntryKind::Param {
                continue;
            }
            let grad = e.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &g), m), v) in e.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }

    /// Moment accumulators as named tensors, for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (_, e)) in store.entries().enumerate() {
            if e.kind != EntryKind::Param {
                continue;
            }
            let shape = e.value.shape();
            out.push((format!("m.{}", e.name), Tensor::from_parts(shape.to_vec(), self.first[i].clone())));
            out.push((format!("v.{}", e.name), Tensor::from_parts(shape.to_vec(), self.second[i].clone())));
        }
        out
    }

    /// Restores state saved by [`Adam::state_tensors`].
    pub fn load_state(
        &mut self,
        store: &ParamStore<T>,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for (i, (_, e)) in store.entries().enumerate() {
            if e.kind != EntryKind::Param {
                continue;
            }
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let name = format!("{prefix}.{}", e.name);
                let t = lookup(&name).ok_or_else(|| invalid("adam", format!("missing optimizer state `{name}`")))?;
                if t.shape() != e.value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam",
                        lhs: e.value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                *slot = t.into_vec();
            }
        }
        self.step = step;
        Ok(())
    }
}
