//! FCN-based classification models: plain baseline, with class-specific
//! attention, and the no-CD ablation variant.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csa::{AttnUpdate, CsaBatchOutput, CsaDims, CsaModule};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, glorot_uniform, Binding, ConvBlock, ParamId, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    /// FCN backbone with the traditional shared dense head.
    Baseline,
    /// FCN backbone + CSA + class-specific head.
    Csa,
    /// CSA with softmax applied directly to the raw similarity.
    CsaNoCd,
}

impl ModelVariant {
    pub fn uses_csa(self) -> bool {
        !matches!(self, ModelVariant::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::Csa => "csa",
            ModelVariant::CsaNoCd => "csa-nocd",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelVariant::Baseline),
            "csa" => Ok(ModelVariant::Csa),
            "csa-nocd" => Ok(ModelVariant::CsaNoCd),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected baseline|csa|csa-nocd)"
            ))),
        }
    }
}

/// Filter counts and kernel sizes for the three conv blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            filters: [128, 256, 128],
            kernels: [8, 5, 3],
        }
    }
}

impl BackboneConfig {
    /// Shrunken backbone for fast tests and gradient checking.
    pub fn tiny(feature_dim: usize) -> Self {
        Self {
            filters: [feature_dim, feature_dim, feature_dim],
            kernels: [8, 5, 3],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.filters[2]
    }
}

/// Three conv blocks, then a transpose so the features are [N, T, F].
#[derive(Clone, Debug)]
pub struct FcnBackbone<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

impl<T: Element> FcnBackbone<T> {
    fn new(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        num_vars: usize,
        cfg: &BackboneConfig,
    ) -> Self {
        let mut blocks = Vec::with_capacity(3);
        let mut c_in = num_vars;
        for (i, (&c_out, &k)) in cfg.filters.iter().zip(&cfg.kernels).enumerate() {
            blocks.push(ConvBlock::new(
                store,
                rng,
                &format!("backbone.block{i}"),
                c_in,
                c_out,
                k,
            ));
            c_in = c_out;
        }
        Self { blocks }
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for block in &mut self.blocks {
            h = block.forward_train(tape, binding, h)?;
        }
        tape.swap_last2(h)
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, binding: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward_eval(tape, binding, h)?;
        }
        tape.swap_last2(h)
    }
}

enum Head {
    /// Per-class weight vector and bias; logit c reads only slice c.
    ClassSpecific { omega: ParamId, beta: ParamId },
    /// Traditional dense layer shared across classes.
    Shared { weight: ParamId, bias: ParamId },
}

/// Dataset-shape metadata carried inside checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub variant: ModelVariant,
    pub class_names: Vec<String>,
    pub num_vars: usize,
    pub seq_len: usize,
    pub backbone: BackboneConfig,
    pub f_a: usize,
    pub attn_update: AttnUpdate,
}

impl ModelMeta {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// A trainable classifier over fixed-shape multivariate series.
#[derive(Clone)]
pub struct FcnCsaModel<T> {
    pub store: ParamStore<T>,
    pub backbone: FcnBackbone<T>,
    pub csa: Option<CsaModule<T>>,
    head: Head,
    pub meta: ModelMeta,
}

impl Clone for Head {
    fn clone(&self) -> Self {
        match self {
            Head::ClassSpecific { omega, beta } => Head::ClassSpecific {
                omega: *omega,
                beta: *beta,
            },
            Head::Shared { weight, bias } => Head::Shared {
                weight: *weight,
                bias: *bias,
            },
        }
    }
}

impl<T: Element> FcnCsaModel<T> {
    /// Build a model with parameters fully determined by `seed`.
    pub fn new(meta: ModelMeta, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = FcnBackbone::new(&mut store, &mut rng, meta.num_vars, &meta.backbone);
        let f = meta.backbone.feature_dim();
        let c = meta.num_classes();
        let csa = if meta.variant.uses_csa() {
            Some(CsaModule::new(
                &mut store,
                &mut rng,
                CsaDims {
                    f,
                    f_a: meta.f_a,
                    c,
                    t: meta.seq_len,
                },
                meta.attn_update,
                meta.variant == ModelVariant::Csa,
            )?)
        } else {
            None
        };
        let head = match meta.variant {
            ModelVariant::Baseline => {
                let weight = store.add("head.weight", glorot_uniform(&[f, c], f, c, &mut rng));
                let bias = store.add("head.bias", Tensor::zeros(&[c]));
                Head::Shared { weight, bias }
            }
            _ => {
                let omega = store.add("head.omega", glorot_uniform(&[c, f, 1], f, 1, &mut rng));
                let beta = store.add("head.beta", Tensor::zeros(&[c]));
                Head::ClassSpecific { omega, beta }
            }
        };
        Ok(Self {
            store,
            backbone,
            csa,
            head,
            meta,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes()
    }

    /// logits[n, c] = G[n, c, :] . omega_c + beta_c
    fn head_class_specific(
        tape: &mut Tape<T>,
        binding: &Binding,
        omega: ParamId,
        beta: ParamId,
        g: Var,
    ) -> Result<Var> {
        let shape = tape.shape(g).to_vec();
        if shape.len() != 3 {
            return Err(Error::Contract(format!(
                "class-specific head expects [N, C, F], got {shape:?}"
            )));
        }
        let (n, c, f) = (shape[0], shape[1], shape[2]);
        let g4 = tape.reshape(g, &[n, c, 1, f])?;
        let prod = tape.matmul(g4, binding.var(omega))?;
        let logits = tape.reshape(prod, &[n, c])?;
        let beta_row = tape.reshape(binding.var(beta), &[1, c])?;
        let beta_b = tape.repeat_axis(beta_row, 0, n)?;
        tape.add(logits, beta_b)
    }

    fn head_shared(
        tape: &mut Tape<T>,
        binding: &Binding,
        weight: ParamId,
        bias: ParamId,
        g: Var,
    ) -> Result<Var> {
        let n = tape.shape(g)[0];
        let c = tape.shape(binding.var(weight))[1];
        let logits = tape.matmul(g, binding.var(weight))?;
        let bias_row = tape.reshape(binding.var(bias), &[1, c])?;
        let bias_b = tape.repeat_axis(bias_row, 0, n)?;
        tape.add(logits, bias_b)
    }

    /// Head forward pass: class-specific heads take pooled per-class
    /// features [N, C, F]; the shared baseline head takes [N, F].
    pub fn head_forward(&self, tape: &mut Tape<T>, binding: &Binding, g: Var) -> Result<Var> {
        match &self.head {
            Head::ClassSpecific { omega, beta } => {
                Self::head_class_specific(tape, binding, *omega, *beta, g)
            }
            Head::Shared { weight, bias } => Self::head_shared(tape, binding, *weight, *bias, g),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.meta.num_vars || s[2] != self.meta.seq_len {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: vec![0, self.meta.num_vars, self.meta.seq_len],
            });
        }
        Ok(())
    }

    /// Training forward to logits on an existing tape/binding.
    ///
    /// CSA variants require labels (class aggregation consumes them);
    /// the baseline ignores them here and uses them only in the loss.
    pub fn logits_train(
        &mut self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: &Tensor<T>,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        self.check_input(x)?;
        let xv = tape.constant(x.clone());
        let l = self.backbone.forward_train(tape, binding, xv)?;
        match (&self.head, &mut self.csa) {
            (Head::Shared { weight, bias }, None) => {
                let g = tape.reduce_mean_axis(l, 1)?;
                Self::head_shared(tape, binding, *weight, *bias, g)
            }
            (Head::ClassSpecific { omega, beta }, Some(csa)) => {
                let labels = labels.ok_or_else(|| {
                    Error::Contract("CSA training requires labels for class aggregation".into())
                })?;
                let out: CsaBatchOutput = csa.forward_train(tape, binding, l, labels)?;
                let g = tape.reduce_mean_axis(out.o_csa, 2)?;
                Self::head_class_specific(tape, binding, *omega, *beta, g)
            }
            _ => Err(Error::Contract("model head/CSA configuration mismatch".into())),
        }
    }

    /// Training loss (cross-entropy over logits).
    pub fn loss_train(
        &mut self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<Var> {
        let logits = self.logits_train(tape, binding, x, Some(labels))?;
        tape.cross_entropy(logits, labels)
    }

    /// Label-free evaluation to logits. No state is mutated.
    pub fn logits_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let l = self.backbone.forward_eval(&mut tape, &binding, xv)?;
        let logits = match (&self.head, &self.csa) {
            (Head::Shared { weight, bias }, None) => {
                let g = tape.reduce_mean_axis(l, 1)?;
                Self::head_shared(&mut tape, &binding, *weight, *bias, g)?
            }
            (Head::ClassSpecific { omega, beta }, Some(csa)) => {
                let o = csa.forward_eval(&mut tape, &binding, l)?;
                let g = tape.reduce_mean_axis(o, 2)?;
                Self::head_class_specific(&mut tape, &binding, *omega, *beta, g)?
            }
            _ => return Err(Error::Contract("model head/CSA configuration mismatch".into())),
        };
        Ok(tape.value(logits).clone())
    }

    /// Argmax prediction; ties break toward the smallest class index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits_eval(x)?;
        Ok(argmax_rows(&logits))
    }

    /// Time-pooled feature matrices before and after attention:
    /// P_L is [B, F], P_O is [B, C, F]. CSA variants only.
    pub fn feature_matrices(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let Some(csa) = &self.csa else {
            return Err(Error::UnsupportedVariant(
                "feature export needs a CSA variant (baseline has no per-class features)".into(),
            ));
        };
        self.check_input(x)?;
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let l = self.backbone.forward_eval(&mut tape, &binding, xv)?;
        let p_l = tape.reduce_mean_axis(l, 1)?;
        let o = csa.forward_eval(&mut tape, &binding, l)?;
        let p_o = tape.reduce_mean_axis(o, 2)?;
        Ok((tape.value(p_l).clone(), tape.value(p_o).clone()))
    }

    // ---- persistence -------------------------------------------------------

    /// One file: metadata, every parameter, batch-norm running statistics,
    /// and (for CSA variants) the global attention and class_seen flags.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct MetaOnDisk<'a> {
            meta: &'a ModelMeta,
            class_seen: Option<&'a Vec<bool>>,
        }
        let meta_json = serde_json::to_string(&MetaOnDisk {
            meta: &self.meta,
            class_seen: self.csa.as_ref().map(|c| &c.class_seen),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut tensors: Vec<(String, Tensor<T>)> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        for (i, block) in self.backbone.blocks.iter().enumerate() {
            tensors.push((
                format!("backbone.block{i}.bn_running_mean"),
                block.bn.running_mean.clone(),
            ));
            tensors.push((
                format!("backbone.block{i}.bn_running_var"),
                block.bn.running_var.clone(),
            ));
        }
        if let Some(csa) = &self.csa {
            tensors.push(("csa.global_attention".into(), csa.global_attention.clone()));
        }
        let file = std::fs::File::create(path)?;
        checkpoint::write_checkpoint(std::io::BufWriter::new(file), &meta_json, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct MetaOnDisk {
            meta: ModelMeta,
            class_seen: Option<Vec<bool>>,
        }
        let file = std::fs::File::open(path)?;
        let (meta_json, tensors) =
            checkpoint::read_checkpoint::<T, _>(std::io::BufReader::new(file))?;
        let disk: MetaOnDisk = serde_json::from_str(&meta_json)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut model = Self::new(disk.meta, 0)?;
        let lookup: std::collections::HashMap<&str, &Tensor<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..model.store.len() {
            let id = crate::nn::ParamId(i);
            let name = model.store.name(id).to_string();
            let t = lookup.get(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter '{name}'"))
            })?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = (*t).clone();
        }
        for (i, block) in model.backbone.blocks.iter_mut().enumerate() {
            let mean_name = format!("backbone.block{i}.bn_running_mean");
            let var_name = format!("backbone.block{i}.bn_running_var");
            block.bn.running_mean = (*lookup
                .get(mean_name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing '{mean_name}'")))?)
            .clone();
            block.bn.running_var = (*lookup
                .get(var_name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing '{var_name}'")))?)
            .clone();
        }
        if let Some(csa) = &mut model.csa {
            csa.global_attention = (*lookup
                .get("csa.global_attention")
                .ok_or_else(|| Error::Checkpoint("missing 'csa.global_attention'".into()))?)
            .clone();
            csa.class_seen = disk
                .class_seen
                .ok_or_else(|| Error::Checkpoint("missing class_seen flags".into()))?;
        }
        Ok(model)
    }
}

/// Row-wise argmax with smallest-index tie-breaking.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}
