//! Layers built from tape operations. Each layer only remembers the ids of
//! its tensors inside a [`ParamStore`].

use rand::Rng;

use crate::error::{invalid, Result};
use crate::ops::norm::{BatchNormOpts, BnMode, RunningStats};
use crate::scalar::Scalar;
use crate::store::{Bound, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

fn uniform_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// `y = x·W + b` with `W` stored as `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(format!("{name}.weight"), uniform_init(&[in_dim, out_dim], in_dim, rng));
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), uniform_init(&[out_dim], in_dim, rng)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_param(
            format!("{name}.weight"),
            uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), uniform_init(&[out_ch, 1, 1], fan_in, rng)));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv2d(p.var(self.weight), self.stride, self.pad)?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub opts: BatchNormOpts,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            opts: BatchNormOpts::default(),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>, mode: BnMode) -> Result<Var<'t, T>> {
        let mut running = RunningStats {
            mean: p.value(self.running_mean).data().to_vec(),
            var: p.value(self.running_var).data().to_vec(),
        };
        let y = x.batchnorm2d(p.var(self.gamma), p.var(self.beta), &mut running, mode, self.opts)?;
        if mode == BnMode::Train {
            let c = running.mean.len();
            p.queue_update(self.running_mean, Tensor::from_parts(vec![c], running.mean));
            p.queue_update(self.running_var, Tensor::from_parts(vec![c], running.var));
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add_param(format!("{name}.table"), Tensor::randn(&[vocab, dim], rng));
        Self { table, vocab, dim }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        p.var(self.table).embedding(ids)
    }
}

/// Gated recurrent unit with reset, update and candidate gates.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let h3 = 3 * hidden;
        Self {
            w_input: store.add_param(format!("{name}.w_input"), uniform_init(&[input_dim, h3], hidden, rng)),
            w_hidden: store.add_param(format!("{name}.w_hidden"), uniform_init(&[hidden, h3], hidden, rng)),
            b_input: store.add_param(format!("{name}.b_input"), uniform_init(&[h3], hidden, rng)),
            b_hidden: store.add_param(format!("{name}.b_hidden"), uniform_init(&[h3], hidden, rng)),
            input_dim,
            hidden,
        }
    }

    /// One step: `x` is `N×input_dim`, `h` is `N×hidden`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        if h.shape() != [x.shape()[0], self.hidden] {
            return Err(invalid("gru", format!("hidden state shape {:?}", h.shape())));
        }
        let hd = self.hidden;
        let gi = x.matmul(p.var(self.w_input))?.add(p.var(self.b_input))?;
        let gh = h.matmul(p.var(self.w_hidden))?.add(p.var(self.b_hidden))?;
        let r = gi.narrow(1, 0, hd)?.add(gh.narrow(1, 0, hd)?)?.sigmoid()?;
        let z = gi.narrow(1, hd, hd)?.add(gh.narrow(1, hd, hd)?)?.sigmoid()?;
        let n = gi.narrow(1, 2 * hd, hd)?.add(r.mul(gh.narrow(1, 2 * hd, hd)?)?)?.tanh()?;
        // h' = (1 − z)·n + z·h
        n.add(z.mul(h.sub(n)?)?)
    }
}
