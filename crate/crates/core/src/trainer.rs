//! Fixed-epoch training loop shared by the CLI and the test suites.

use crate::csa::AttnUpdate;
use crate::data::{batch_iter, BatchPlan, TsDataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{BackboneConfig, FcnCsaModel, ModelMeta, ModelVariant};
use crate::nn::AdamState;
use crate::tensor::{Element, Tape};

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub f_a: usize,
    pub attn_update: AttnUpdate,
    pub backbone: BackboneConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            f_a: 64,
            attn_update: AttnUpdate::Latest,
            backbone: BackboneConfig::default(),
        }
    }
}

pub struct TrainOutcome<T> {
    pub model: FcnCsaModel<T>,
    pub final_loss: f64,
}

/// Train one model for the configured number of epochs. Fully determined
/// by the dataset, the variant, and the settings (including the seed).
pub fn train<T: Element>(
    variant: ModelVariant,
    train_ds: &TsDataset<T>,
    settings: &TrainSettings,
) -> Result<TrainOutcome<T>> {
    if settings.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    train_ds.check_all_classes_present()?;
    let (_, num_vars, seq_len) = train_ds.dims();
    let meta = ModelMeta {
        variant,
        class_names: train_ds.class_names.clone(),
        num_vars,
        seq_len,
        backbone: settings.backbone,
        f_a: settings.f_a,
        attn_update: settings.attn_update,
    };
    let mut model = FcnCsaModel::new(meta, settings.seed)?;
    let mut adam = AdamState::new(settings.lr);
    let plan = BatchPlan::new(settings.batch_size, settings.seed);
    let mut final_loss = f64::NAN;
    for epoch in 0..settings.epochs {
        for (bx, by) in batch_iter(train_ds, &plan, epoch as u64)? {
            let mut tape = Tape::new();
            let binding = model.store.bind(&mut tape, true);
            let loss = model.loss_train(&mut tape, &binding, &bx, &by)?;
            let loss_value = tape.value(loss).item()?.as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch} (seed {})",
                    settings.seed
                )));
            }
            final_loss = loss_value;
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape, &binding);
            adam.step(&mut model.store)?;
            model.store.zero_grads();
        }
    }
    Ok(TrainOutcome { model, final_loss })
}

/// Label-free predictions over a test set, in evaluation-sized chunks.
pub fn predict_dataset<T: Element>(
    model: &FcnCsaModel<T>,
    test: &TsDataset<T>,
) -> Result<Vec<usize>> {
    let n = test.len();
    let chunk = 64usize;
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (bx, _) = test.gather(&indices);
        preds.extend(model.predict(&bx)?);
        start = end;
    }
    Ok(preds)
}

/// Predictions plus accuracy against the test labels.
pub fn evaluate<T: Element>(
    model: &FcnCsaModel<T>,
    test: &TsDataset<T>,
) -> Result<(Vec<usize>, f64)> {
    let preds = predict_dataset(model, test)?;
    let acc = accuracy(&preds, &test.labels)?;
    Ok((preds, acc))
}
