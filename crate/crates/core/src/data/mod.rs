//! Dataset ingestion, normalisation, batching, and the synthetic
//! three-class generator.

pub mod ts_format;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use ts_format::{parse_csv, parse_ts, serialize_csv, serialize_ts};

/// Labeled multivariate time-series collection, x of shape [N, V, T].
#[derive(Clone, Debug)]
pub struct TsDataset<T> {
    pub name: String,
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    /// Sorted lexicographically; a label's index is its rank here.
    pub class_names: Vec<String>,
}

impl<T: Element> TsDataset<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.x.shape();
        (s[0], s[1], s[2])
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Copy of one instance, shape [V, T].
    pub fn instance(&self, i: usize) -> Tensor<T> {
        let (_, v, t) = self.dims();
        let src = &self.x.data()[i * v * t..(i + 1) * v * t];
        Tensor::new(vec![v, t], src.to_vec()).expect("instance slice")
    }

    /// Gather instances into a batch tensor plus labels, bit-exact slices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (_, v, t) = self.dims();
        let mut data = Vec::with_capacity(indices.len() * v * t);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * v * t..(i + 1) * v * t]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), v, t], data).expect("batch shape"),
            labels,
        )
    }

    /// Every class index must appear at least once (training-split rule).
    pub fn check_all_classes_present(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes()];
        for &l in &self.labels {
            if l >= seen.len() {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes: seen.len(),
                    index: 0,
                });
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "class '{}' has no instances in this split",
                self.class_names[missing]
            )));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> TsDataset<U> {
        TsDataset {
            name: self.name.clone(),
            x: self.x.cast(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Per-instance, per-variable standardisation to zero mean / unit variance
/// (population std). Series with std below 1e-8 become all zeros.
pub fn znormalize<T: Element>(ds: &TsDataset<T>) -> TsDataset<T> {
    let (n, v, t) = ds.dims();
    let mut out = ds.clone();
    let data = out.x.data_mut();
    for i in 0..n {
        for vi in 0..v {
            let off = (i * v + vi) * t;
            let series = &mut data[off..off + t];
            let mean = series.iter().fold(T::zero(), |a, b| a + *b) / T::from_f64(t as f64);
            let var = series
                .iter()
                .fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean))
                / T::from_f64(t as f64);
            let std = var.sqrt();
            if std.as_f64() < 1e-8 {
                series.fill(T::zero());
            } else {
                for x in series.iter_mut() {
                    *x = (*x - mean) / std;
                }
            }
        }
    }
    out
}

/// Epoch batching: deterministic shuffle keyed by (seed, epoch).
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            seed,
            drop_last: false,
        }
    }
}

/// Shuffled index batches for one epoch. The union covers every instance
/// exactly once (minus a short tail when `drop_last`).
pub fn batch_indices(n: usize, plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if plan.drop_last && plan.batch_size > n {
        return Err(Error::Data(format!(
            "batch size {} with drop_last leaves no batches for {} instances",
            plan.batch_size, n
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut seed_bytes = [0u8; 32];
    seed_bytes[..8].copy_from_slice(&plan.seed.to_le_bytes());
    seed_bytes[8..16].copy_from_slice(&epoch.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    indices.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = indices
        .chunks(plan.batch_size)
        .map(|c| c.to_vec())
        .collect();
    if plan.drop_last {
        batches.retain(|b| b.len() == plan.batch_size);
    }
    Ok(batches)
}

/// Materialised epoch iterator over (batch tensor, batch labels).
pub fn batch_iter<'d, T: Element>(
    ds: &'d TsDataset<T>,
    plan: &BatchPlan,
    epoch: u64,
) -> Result<impl Iterator<Item = (Tensor<T>, Vec<usize>)> + 'd> {
    let batches = batch_indices(ds.len(), plan, epoch)?;
    Ok(batches.into_iter().map(move |idx| ds.gather(&idx)))
}

/// Deterministic train/test split (shuffle keyed by `seed`).
pub fn split_train_test<T: Element>(
    ds: &TsDataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(TsDataset<T>, TsDataset<T>)> {
    let n = ds.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let (tr, te) = indices.split_at(n_train);
    let make = |idx: &[usize], suffix: &str| {
        let (x, labels) = ds.gather(idx);
        TsDataset {
            name: format!("{}_{}", ds.name, suffix),
            x,
            labels,
            class_names: ds.class_names.clone(),
        }
    };
    let train = make(tr, "TRAIN");
    train.check_all_classes_present()?;
    Ok((train, make(te, "TEST")))
}

/// Synthetic three-class dataset: a flat level, an up-growth curve that
/// starts rising halfway, and a down-growth curve that flattens halfway,
/// plus Gaussian noise. The discriminative sub-sequences differ per class
/// by construction.
pub fn make_example1<T: Element>(
    n_per_class: usize,
    t: usize,
    noise_std: f64,
    seed: u64,
) -> Result<TsDataset<T>> {
    if t < 4 {
        return Err(Error::Config(format!(
            "make_example1 needs t >= 4, got {t}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let half = t / 2;
    let template = |class: usize, ti: usize| -> f64 {
        match class {
            // down-growth: falls from 2.0 to the 1.0 level, then flat
            0 => {
                if ti < half {
                    1.0 + (half - ti) as f64 / half as f64
                } else {
                    1.0
                }
            }
            // flat: constant level
            1 => 1.0,
            // up-growth: flat, then rises to 2.0 at the end
            _ => {
                if ti <= half {
                    1.0
                } else {
                    1.0 + (ti - half) as f64 / (t - 1 - half) as f64
                }
            }
        }
    };
    let class_names = vec![
        "down-growth".to_string(),
        "flat".to_string(),
        "up-growth".to_string(),
    ];
    let n = 3 * n_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * t);
    let mut labels = Vec::with_capacity(n);
    for class in 0..3 {
        for _ in 0..n_per_class {
            for ti in 0..t {
                let eps = if noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(T::from_f64(template(class, ti) + eps));
            }
            labels.push(class);
        }
    }
    Ok(TsDataset {
        name: "example1".into(),
        x: Tensor::new(vec![n, 1, t], data)?,
        labels,
        class_names,
    })
}
