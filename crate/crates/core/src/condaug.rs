//! Conditioning augmentation: a diagonal Gaussian over latent codes
//! predicted from φ_t, sampled by reparameterization.

use diffcomp::{Bound, Linear, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct CondAugNet {
    pub mu: Linear,
    pub logvar: Linear,
}

pub struct CondAugOut<'t, T> {
    pub c: Var<'t, T>,
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
}

impl CondAugNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dt: usize, ng: usize, rng: &mut R) -> Self {
        Self {
            mu: Linear::new(store, &format!("{name}.mu"), dt, ng, true, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), dt, ng, true, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.out_dim
    }

    /// `ĉ = μ + exp(logσ²/2)·ε` with `ε` supplied by the caller.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, phi: Var<'t, T>, eps: &Tensor<T>) -> Result<CondAugOut<'t, T>> {
        let mu = self.mu.forward(p, phi)?;
        let logvar = self.logvar.forward(p, phi)?;
        let noise = p.tape().constant(eps.clone());
        let c = mu.add(logvar.scale(0.5)?.exp()?.mul(noise)?)?;
        Ok(CondAugOut { c, mu, logvar })
    }
}

/// Standard-normal noise of shape `rows×dim`.
pub fn sample_eps<T: Scalar, R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[rows, dim], rng)
}

/// `½·Σ(μ² + exp(logσ²) − 1 − logσ²)` per row, averaged over rows.
pub fn kl_to_standard_normal<'t, T: Scalar>(mu: Var<'t, T>, logvar: Var<'t, T>) -> Result<Var<'t, T>> {
    let rows = mu.shape().first().copied().unwrap_or(1).max(1);
    let per = mu.square()?.add(logvar.exp()?)?.add_scalar(-1.0)?.sub(logvar)?;
    Ok(per.sum()?.scale(0.5 / rows as f64)?)
}
