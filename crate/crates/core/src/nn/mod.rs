//! Layers and training machinery: parameter storage, initialisation,
//! the conv + batch-norm + ReLU block, the classification loss, and Adam.

pub mod adam;
pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub use adam::AdamState;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named persistent parameters with accumulated gradients.
///
/// Each training step binds the current values onto a fresh tape as leaves,
/// then harvests the leaf gradients back with [`ParamStore::accumulate_grads`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape leaves for every parameter of a store, in store order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "set_values: {} values for {} parameters",
                values.len(),
                self.entries.len()
            )));
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            if e.value.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_values",
                    lhs: e.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            e.value = v.clone();
        }
        Ok(())
    }

    /// Copy every parameter onto the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), trainable))
                .collect(),
        }
    }

    /// Add the tape gradients of a binding into the persistent grads.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        for (entry, var) in self.entries.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(*var) {
                let acc = entry
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(entry.value.shape()));
                for (dst, src) in acc.data_mut().iter_mut().zip(g) {
                    *dst += *src;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

// ---- initialisation -------------------------------------------------------

/// He-uniform: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), for ReLU-fed kernels.
pub fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-limit..limit)))
}

/// Glorot-uniform: U(-sqrt(6/(fan_in+fan_out)), ...), for linear projections.
pub fn glorot_uniform<T: Element>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-limit..limit)))
}

// ---- conv block -------------------------------------------------------------

/// Frozen batch-norm statistics, updated only in training mode.
#[derive(Clone, Debug)]
pub struct BnState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Conv1d (same padding) -> batch norm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: BnState<T>,
    pub momentum: f64,
    pub eps: f64,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl<T: Element> ConvBlock<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let kernel = store.add(
            format!("{prefix}.kernel"),
            he_uniform(&[c_out, c_in, k], c_in * k, rng),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
        let gamma = store.add(format!("{prefix}.bn_gamma"), Tensor::ones(&[c_out]));
        let beta = store.add(format!("{prefix}.bn_beta"), Tensor::zeros(&[c_out]));
        Self {
            kernel,
            bias,
            gamma,
            beta,
            bn: BnState {
                running_mean: Tensor::zeros(&[c_out]),
                running_var: Tensor::ones(&[c_out]),
            },
            momentum: 0.9,
            eps: 1e-5,
            c_in,
            c_out,
            k,
        }
    }

    /// Training-mode forward: batch statistics normalise the output and the
    /// running statistics are updated (detached from the tape).
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Contract(format!(
                "conv block expects [N, C, T], got {shape:?}"
            )));
        }
        let (n, t) = (shape[0], shape[2]);
        if n * t < 2 {
            return Err(Error::BatchStats(n * t));
        }
        let y = tape.conv1d_same(x, binding.var(self.kernel), binding.var(self.bias))?;
        let (mu, var) = batch_stats(tape, y)?;

        // Detached running-statistics update.
        let mom = T::from_f64(self.momentum);
        let one_m = T::from_f64(1.0 - self.momentum);
        let mu_v = tape.value(mu).clone();
        let var_v = tape.value(var).clone();
        for (r, b) in self
            .bn
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(mu_v.data())
        {
            *r = mom * *r + one_m * *b;
        }
        for (r, b) in self.bn.running_var.data_mut().iter_mut().zip(var_v.data()) {
            *r = mom * *r + one_m * *b;
        }

        self.scale_shift_relu(tape, binding, y, mu, var, n, t)
    }

    /// Eval-mode forward: frozen running statistics, no state mutated.
    pub fn forward_eval(&self, tape: &mut Tape<T>, binding: &Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Contract(format!(
                "conv block expects [N, C, T], got {shape:?}"
            )));
        }
        let (n, t) = (shape[0], shape[2]);
        let y = tape.conv1d_same(x, binding.var(self.kernel), binding.var(self.bias))?;
        let mu = tape.constant(self.bn.running_mean.clone());
        let var = tape.constant(self.bn.running_var.clone());
        self.scale_shift_relu(tape, binding, y, mu, var, n, t)
    }

    fn scale_shift_relu(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        y: Var,
        mu: Var,
        var: Var,
        n: usize,
        t: usize,
    ) -> Result<Var> {
        let xhat = standardize(tape, y, mu, var, self.eps)?;
        let gamma_b = broadcast_channel(tape, binding.var(self.gamma), n, self.c_out, t)?;
        let beta_b = broadcast_channel(tape, binding.var(self.beta), n, self.c_out, t)?;
        let scaled = tape.mul(xhat, gamma_b)?;
        let shifted = tape.add(scaled, beta_b)?;
        Ok(tape.relu(shifted))
    }
}

/// Per-channel batch statistics of [N, C, T]: means over axes (0, 2).
pub fn batch_stats<T: Element>(tape: &mut Tape<T>, y: Var) -> Result<(Var, Var)> {
    let m1 = tape.reduce_mean_axis(y, 2)?;
    let mu = tape.reduce_mean_axis(m1, 0)?;
    let shape = tape.shape(y).to_vec();
    let (n, c, t) = (shape[0], shape[1], shape[2]);
    let mu_b = broadcast_channel(tape, mu, n, c, t)?;
    let yc = tape.sub(y, mu_b)?;
    let sq = tape.mul(yc, yc)?;
    let v1 = tape.reduce_mean_axis(sq, 2)?;
    let var = tape.reduce_mean_axis(v1, 0)?;
    Ok((mu, var))
}

/// (y - mu) / sqrt(var + eps) with mu/var per channel of [N, C, T].
pub fn standardize<T: Element>(
    tape: &mut Tape<T>,
    y: Var,
    mu: Var,
    var: Var,
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let (n, c, t) = (shape[0], shape[1], shape[2]);
    let mu_b = broadcast_channel(tape, mu, n, c, t)?;
    let yc = tape.sub(y, mu_b)?;
    let var_eps = tape.add_const(var, T::from_f64(eps));
    let inv = tape.rsqrt(var_eps);
    let inv_b = broadcast_channel(tape, inv, n, c, t)?;
    tape.mul(yc, inv_b)
}

/// Broadcast a per-channel vector [C] to [N, C, T].
fn broadcast_channel<T: Element>(
    tape: &mut Tape<T>,
    v: Var,
    n: usize,
    c: usize,
    t: usize,
) -> Result<Var> {
    let r = tape.reshape(v, &[1, c, 1])?;
    let r = tape.repeat_axis(r, 0, n)?;
    tape.repeat_axis(r, 2, t)
}

/// Mean cross-entropy of logits [N, C] against labels, on the tape.
pub fn cross_entropy_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}
