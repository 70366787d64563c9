//! Evaluation protocol: accuracy, the relative accuracy-improvement
//! metric, chi-square significance, the DTW 1-NN baseline, run records,
//! and plot-ready feature-matrix export.

pub mod chi_square;
pub mod dtw;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FcnCsaModel, ModelVariant};
use crate::tensor::{Element, Tensor};

pub use chi_square::{
    chi2_sf_df1, chi_square_test, significance_verdict, tally_verdicts, Contingency2x2,
    SignificanceTally, Verdict,
};
pub use dtw::{dtw_distance, nn1_dtw_classify};

/// Fraction of exactly correct predictions.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Relative accuracy improvement of model A over model B, in percent:
/// 100 * (acc_a - acc_b) / acc_b.
pub fn accuracy_improvement(acc_a: f64, acc_b: f64) -> Result<f64> {
    if acc_b <= 0.0 {
        return Err(Error::UndefinedImprovement);
    }
    Ok(100.0 * (acc_a - acc_b) / acc_b)
}

/// One training+evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub variant: ModelVariant,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predictions: Vec<usize>,
}

impl RunRecord {
    /// (correct, incorrect) counts against the given labels.
    pub fn outcome_counts(&self, labels: &[usize]) -> (u64, u64) {
        let correct = self
            .predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count() as u64;
        (correct, labels.len() as u64 - correct)
    }
}

/// Pool per-instance outcomes of two run groups into one 2x2 table.
pub fn pooled_contingency(
    runs_a: &[RunRecord],
    runs_b: &[RunRecord],
    labels: &[usize],
) -> Contingency2x2 {
    let sum = |runs: &[RunRecord]| {
        runs.iter().fold((0u64, 0u64), |acc, r| {
            let (c, i) = r.outcome_counts(labels);
            (acc.0 + c, acc.1 + i)
        })
    };
    Contingency2x2::from_outcomes(sum(runs_a), sum(runs_b))
}

pub fn mean_accuracy(runs: &[RunRecord]) -> f64 {
    if runs.is_empty() {
        return 0.0;
    }
    runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64
}

/// Time-pooled feature matrices of a trained CSA model, as plot-ready CSV:
/// `p_l` has one row per instance, `p_o` one row per (instance, class).
pub struct FeatureMatrices<T> {
    pub p_l: Tensor<T>,
    pub p_o: Tensor<T>,
}

pub fn export_feature_matrices<T: Element>(
    model: &FcnCsaModel<T>,
    x: &Tensor<T>,
) -> Result<FeatureMatrices<T>> {
    let (p_l, p_o) = model.feature_matrices(x)?;
    Ok(FeatureMatrices { p_l, p_o })
}

impl<T: Element> FeatureMatrices<T> {
    pub fn p_l_csv(&self) -> String {
        let (b, f) = (self.p_l.shape()[0], self.p_l.shape()[1]);
        let mut out = String::from("instance");
        for fi in 0..f {
            out.push_str(&format!(",f{fi}"));
        }
        out.push('\n');
        for i in 0..b {
            out.push_str(&format!("{i}"));
            for fi in 0..f {
                out.push_str(&format!(",{}", self.p_l.at(&[i, fi])));
            }
            out.push('\n');
        }
        out
    }

    pub fn p_o_csv(&self, class_names: &[String]) -> String {
        let s = self.p_o.shape();
        let (b, c, f) = (s[0], s[1], s[2]);
        let mut out = String::from("instance,class");
        for fi in 0..f {
            out.push_str(&format!(",f{fi}"));
        }
        out.push('\n');
        for i in 0..b {
            for ci in 0..c {
                out.push_str(&format!("{i},{}", class_names[ci]));
                for fi in 0..f {
                    out.push_str(&format!(",{}", self.p_o.at(&[i, ci, fi])));
                }
                out.push('\n');
            }
        }
        out
    }
}
