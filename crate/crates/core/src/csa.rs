//! Class-specific attention.
//!
//! During training, key/query features are averaged per class, a
//! class-differentiation step boosts the entries where one class's
//! similarity pattern deviates from the average of the other classes, and
//! the resulting row-stochastic attention tensor is persisted as a global
//! per-class state. At test time that stored attention is applied to the
//! value features directly, so no labels are ever consumed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Binding, ParamId, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

/// How the global attention tensor absorbs each batch's attention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttnUpdate {
    /// Overwrite with the latest batch value (default).
    Latest,
    /// Exponential moving average with the given decay on the old value.
    Ema { decay: f64 },
}

impl AttnUpdate {
    pub const DEFAULT_EMA_DECAY: f64 = 0.9;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsaDims {
    /// Feature width of the incoming hidden features.
    pub f: usize,
    /// Width of the key/query spaces.
    pub f_a: usize,
    /// Number of classes.
    pub c: usize,
    /// Time extent.
    pub t: usize,
}

/// Key/query/value projections, the learnable residual scale, and the
/// persisted global attention state.
#[derive(Clone, Debug)]
pub struct CsaModule<T> {
    pub w_k: ParamId,
    pub w_q: ParamId,
    pub w_v: ParamId,
    pub sigma: ParamId,
    /// [C, T, T]; every T x T slice is row-stochastic.
    pub global_attention: Tensor<T>,
    pub class_seen: Vec<bool>,
    pub dims: CsaDims,
    pub update: AttnUpdate,
    /// When false, softmax is applied to the raw similarity (the
    /// class-differentiation step is skipped).
    pub use_cd: bool,
}

/// Per-batch outputs of the training forward pass.
pub struct CsaBatchOutput {
    /// [B, C, T, F]
    pub o_csa: Var,
    /// Raw similarity, [C, T, T].
    pub s: Var,
    /// After class differentiation (equals `s` when CD is disabled).
    pub s_cd: Var,
    /// Row-stochastic attention, [C, T, T].
    pub attention: Var,
    /// Which classes appeared in the batch.
    pub present: Vec<bool>,
}

impl<T: Element> CsaModule<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
        dims: CsaDims,
        update: AttnUpdate,
        use_cd: bool,
    ) -> Result<Self> {
        if dims.c < 2 {
            return Err(Error::Config(format!(
                "class-specific attention needs at least 2 classes, got {}",
                dims.c
            )));
        }
        if dims.f_a == 0 || dims.f == 0 || dims.t == 0 {
            return Err(Error::Config(format!("degenerate dims {dims:?}")));
        }
        let w_k = store.add(
            "csa.w_k",
            glorot_uniform(&[dims.f, dims.f_a], dims.f, dims.f_a, rng),
        );
        let w_q = store.add(
            "csa.w_q",
            glorot_uniform(&[dims.f, dims.f_a], dims.f, dims.f_a, rng),
        );
        let w_v = store.add(
            "csa.w_v",
            glorot_uniform(&[dims.f, dims.f], dims.f, dims.f, rng),
        );
        // sigma starts at 0 so the module begins as the identity mapping.
        let sigma = store.add("csa.sigma", Tensor::zeros(&[1]));
        let uniform = T::from_f64(1.0 / dims.t as f64);
        Ok(Self {
            w_k,
            w_q,
            w_v,
            sigma,
            global_attention: Tensor::filled(&[dims.c, dims.t, dims.t], uniform),
            class_seen: vec![false; dims.c],
            dims,
            update,
            use_cd,
        })
    }

    /// K = L W_K, Q = L W_Q, V = L W_V (no biases).
    pub fn project(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        l: Var,
    ) -> Result<(Var, Var, Var)> {
        self.check_l(tape, l)?;
        let k = tape.matmul(l, binding.var(self.w_k))?;
        let q = tape.matmul(l, binding.var(self.w_q))?;
        let v = tape.matmul(l, binding.var(self.w_v))?;
        Ok((k, q, v))
    }

    fn check_l(&self, tape: &Tape<T>, l: Var) -> Result<()> {
        let shape = tape.shape(l);
        if shape.len() != 3 || shape[1] != self.dims.t || shape[2] != self.dims.f {
            return Err(Error::ShapeMismatch {
                op: "csa input",
                lhs: shape.to_vec(),
                rhs: vec![0, self.dims.t, self.dims.f],
            });
        }
        Ok(())
    }

    /// S[c] = K^C[c] (Q^C[c])^T per class.
    pub fn similarity(tape: &mut Tape<T>, k_c: Var, q_c: Var) -> Result<Var> {
        let q_t = tape.swap_last2(q_c)?;
        tape.matmul(k_c, q_t)
    }

    /// S^C[c] = S_c + |S_c - S_not_c| with S_not_c the average over the
    /// other classes.
    pub fn class_differentiate(tape: &mut Tape<T>, s: Var) -> Result<Var> {
        let shape = tape.shape(s).to_vec();
        if shape.len() != 3 {
            return Err(Error::Contract(format!(
                "class_differentiate expects [C, T, T], got {shape:?}"
            )));
        }
        let c = shape[0];
        if c < 2 {
            return Err(Error::Config(
                "class differentiation needs at least 2 classes".into(),
            ));
        }
        let total = tape.reduce_sum_axis(s, 0)?;
        let total = tape.reshape(total, &[1, shape[1], shape[2]])?;
        let total = tape.repeat_axis(total, 0, c)?;
        let rest = tape.sub(total, s)?;
        let s_not_c = tape.mul_const(rest, T::from_f64(1.0 / (c as f64 - 1.0)));
        let diff = tape.sub(s, s_not_c)?;
        let abs = tape.abs(diff);
        tape.add(s, abs)
    }

    /// Softmax over key positions: each row of every T x T slice.
    pub fn attention_normalize(tape: &mut Tape<T>, s_cd: Var) -> Result<Var> {
        let rank = tape.shape(s_cd).len();
        tape.softmax_axis(s_cd, rank - 1)
    }

    /// O[b, c] = L[b] + sigma * (A[c] V[b]).
    pub fn apply_attention(
        tape: &mut Tape<T>,
        l: Var,
        v: Var,
        attention: Var,
        sigma: Var,
    ) -> Result<Var> {
        let ls = tape.shape(l).to_vec();
        let attn_shape = tape.shape(attention).to_vec();
        if ls.len() != 3 || attn_shape.len() != 3 || attn_shape[1] != ls[1] {
            return Err(Error::ShapeMismatch {
                op: "apply_attention",
                lhs: ls,
                rhs: attn_shape,
            });
        }
        let (b, t, f) = (ls[0], ls[1], ls[2]);
        let c = attn_shape[0];
        let l4 = tape.reshape(l, &[b, 1, t, f])?;
        let l_rep = tape.repeat_axis(l4, 1, c)?;
        let a4 = tape.reshape(attention, &[1, c, t, t])?;
        let v4 = tape.reshape(v, &[b, 1, t, f])?;
        let av = tape.matmul(a4, v4)?;
        let scaled = tape.scalar_mul(sigma, av)?;
        tape.add(l_rep, scaled)
    }

    /// Full training pass: project, aggregate per class, differentiate,
    /// normalise, apply, then absorb the batch attention into the global
    /// state. Gradients flow to W_K, W_Q, W_V and sigma through the class
    /// averages.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        binding: &Binding,
        l: Var,
        labels: &[usize],
    ) -> Result<CsaBatchOutput> {
        let (dims_b, dims_t, dims_f, dims_fa, dims_c) = {
            let s = tape.shape(l);
            self.check_l(tape, l)?;
            (s[0], self.dims.t, self.dims.f, self.dims.f_a, self.dims.c)
        };
        if dims_b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if labels.len() != dims_b {
            return Err(Error::Contract(format!(
                "{} labels for batch of {}",
                labels.len(),
                dims_b
            )));
        }
        let (k, q, v) = self.project(tape, binding, l)?;
        assert_eq!(tape.shape(k), &[dims_b, dims_t, dims_fa]);
        assert_eq!(tape.shape(q), &[dims_b, dims_t, dims_fa]);
        assert_eq!(tape.shape(v), &[dims_b, dims_t, dims_f]);

        let (k_c, present) = tape.class_mean(k, labels, dims_c)?;
        let (q_c, present_q) = tape.class_mean(q, labels, dims_c)?;
        debug_assert_eq!(present, present_q);
        assert_eq!(tape.shape(k_c), &[dims_c, dims_t, dims_fa]);
        assert_eq!(tape.shape(q_c), &[dims_c, dims_t, dims_fa]);

        let s = Self::similarity(tape, k_c, q_c)?;
        assert_eq!(tape.shape(s), &[dims_c, dims_t, dims_t]);
        let s_cd = if self.use_cd {
            let out = Self::class_differentiate(tape, s)?;
            debug_assert!(
                tape.value(out)
                    .data()
                    .iter()
                    .zip(tape.value(s).data())
                    .all(|(cd, raw)| *cd >= *raw),
                "class differentiation must not decrease any entry"
            );
            out
        } else {
            s
        };
        let attention = Self::attention_normalize(tape, s_cd)?;
        assert_eq!(tape.shape(attention), &[dims_c, dims_t, dims_t]);

        let o_csa = Self::apply_attention(tape, l, v, attention, binding.var(self.sigma))?;
        assert_eq!(tape.shape(o_csa), &[dims_b, dims_c, dims_t, dims_f]);

        let batch_attention = tape.value(attention).clone();
        self.update_global_attention(&batch_attention, &present)?;

        Ok(CsaBatchOutput {
            o_csa,
            s,
            s_cd,
            attention,
            present,
        })
    }

    /// Store a detached copy of the batch attention for every class present
    /// in the batch; absent classes keep their previous slice.
    pub fn update_global_attention(
        &mut self,
        batch_attention: &Tensor<T>,
        present: &[bool],
    ) -> Result<()> {
        let (c, t) = (self.dims.c, self.dims.t);
        if batch_attention.shape() != [c, t, t] {
            return Err(Error::ShapeMismatch {
                op: "update_global_attention",
                lhs: batch_attention.shape().to_vec(),
                rhs: vec![c, t, t],
            });
        }
        check_row_stochastic(batch_attention, 1e-4)?;
        let slice = t * t;
        for (ci, &is_present) in present.iter().enumerate() {
            if !is_present {
                continue;
            }
            let src = &batch_attention.data()[ci * slice..(ci + 1) * slice];
            let dst = &mut self.global_attention.data_mut()[ci * slice..(ci + 1) * slice];
            match self.update {
                AttnUpdate::Latest => dst.copy_from_slice(src),
                AttnUpdate::Ema { decay } => {
                    if self.class_seen[ci] {
                        let d = T::from_f64(decay);
                        let nd = T::from_f64(1.0 - decay);
                        for (o, n) in dst.iter_mut().zip(src) {
                            *o = d * *o + nd * *n;
                        }
                    } else {
                        // First sighting replaces the uniform initialisation.
                        dst.copy_from_slice(src);
                    }
                }
            }
            self.class_seen[ci] = true;
        }
        Ok(())
    }

    /// Label-free evaluation: only the value projection is computed and the
    /// stored global attention is applied. No state is mutated.
    pub fn forward_eval(&self, tape: &mut Tape<T>, binding: &Binding, l: Var) -> Result<Var> {
        if let Some(class) = self.class_seen.iter().position(|seen| !seen) {
            return Err(Error::UnseenClass { class });
        }
        self.check_l(tape, l)?;
        let v = tape.matmul(l, binding.var(self.w_v))?;
        let attention = tape.constant(self.global_attention.clone());
        Self::apply_attention(tape, l, v, attention, binding.var(self.sigma))
    }
}

/// Every row of every trailing T x T slice must be non-negative and sum to 1.
pub fn check_row_stochastic<T: Element>(attention: &Tensor<T>, tol: f64) -> Result<()> {
    let shape = attention.shape();
    let t = shape[shape.len() - 1];
    for (ri, row) in attention.data().chunks_exact(t).enumerate() {
        let mut sum = 0.0;
        for v in row {
            let v = v.as_f64();
            if !(0.0..=1.0 + tol).contains(&v) {
                return Err(Error::Contract(format!(
                    "attention entry {v} outside [0, 1] in row {ri}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > tol {
            return Err(Error::Contract(format!(
                "attention row {ri} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}
