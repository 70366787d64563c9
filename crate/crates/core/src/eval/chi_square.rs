//! Pearson chi-square test on a 2x2 contingency table (df = 1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts [[a, b], [c, d]]: rows are the two models, columns are
/// correct/incorrect outcomes pooled over runs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Contingency2x2 {
    pub counts: [[u64; 2]; 2],
}

impl Contingency2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self {
            counts: [[a, b], [c, d]],
        }
    }

    /// Pool per-instance outcomes of two models: (correct, incorrect) each.
    pub fn from_outcomes(model_a: (u64, u64), model_b: (u64, u64)) -> Self {
        Self::new(model_a.0, model_a.1, model_b.0, model_b.1)
    }

    fn row_sums(&self) -> [u64; 2] {
        [
            self.counts[0][0] + self.counts[0][1],
            self.counts[1][0] + self.counts[1][1],
        ]
    }

    fn col_sums(&self) -> [u64; 2] {
        [
            self.counts[0][0] + self.counts[1][0],
            self.counts[0][1] + self.counts[1][1],
        ]
    }
}

/// Pearson statistic (no continuity correction) and the df=1 p-value.
///
/// p is computed through the complementary error function:
/// `p = erfc(sqrt(stat / 2))`.
pub fn chi_square_test(table: &Contingency2x2) -> Result<(f64, f64)> {
    let rows = table.row_sums();
    let cols = table.col_sums();
    if rows.contains(&0) || cols.contains(&0) {
        return Err(Error::DegenerateTable(format!(
            "marginals must be positive, got rows {rows:?}, cols {cols:?}"
        )));
    }
    let total = (rows[0] + rows[1]) as f64;
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let expected = rows[i] as f64 * cols[j] as f64 / total;
            let diff = table.counts[i][j] as f64 - expected;
            stat += diff * diff / expected;
        }
    }
    Ok((stat, chi2_sf_df1(stat)))
}

/// Survival function of the chi-square distribution with one degree of
/// freedom.
pub fn chi2_sf_df1(stat: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    statrs::function::erf::erfc((stat / 2.0).sqrt())
}

/// How two models compare on one dataset, following the standard
/// convention: the null hypothesis ("no difference") is rejected when
/// p < threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    SignificantlyBetter,
    Better,
    NotBetter,
}

/// `SignificantlyBetter` iff model A is more accurate and p < threshold,
/// `Better` iff more accurate without significance, `NotBetter` otherwise.
pub fn significance_verdict(p: f64, threshold: f64, acc_a: f64, acc_b: f64) -> Verdict {
    if acc_a > acc_b {
        if p < threshold {
            Verdict::SignificantlyBetter
        } else {
            Verdict::Better
        }
    } else {
        Verdict::NotBetter
    }
}

/// "Significantly | Not significantly | Total" tallies of better-than
/// verdicts over a collection of test cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignificanceTally {
    pub significantly: usize,
    pub not_significantly: usize,
    pub total_better: usize,
    pub cases: usize,
}

pub fn tally_verdicts(verdicts: &[Verdict]) -> SignificanceTally {
    let mut tally = SignificanceTally {
        cases: verdicts.len(),
        ..Default::default()
    };
    for v in verdicts {
        match v {
            Verdict::SignificantlyBetter => {
                tally.significantly += 1;
                tally.total_better += 1;
            }
            Verdict::Better => {
                tally.not_significantly += 1;
                tally.total_better += 1;
            }
            Verdict::NotBetter => {}
        }
    }
    tally
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_table_gives_zero_statistic_and_p_one() {
        let (stat, p) = chi_square_test(&Contingency2x2::new(10, 10, 10, 10)).unwrap();
        assert_eq!(stat, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn diagonal_table_hand_computation() {
        // [[20,0],[0,20]]: every expected count is 10, so the statistic is
        // 4 * (10^2 / 10) = 40.
        let (stat, _) = chi_square_test(&Contingency2x2::new(20, 0, 0, 20)).unwrap();
        assert!((stat - 40.0).abs() < 1e-12);
    }

    #[test]
    fn critical_value_is_p_05() {
        let p = chi2_sf_df1(3.841);
        assert!((p - 0.05).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn zero_marginal_is_degenerate() {
        assert!(matches!(
            chi_square_test(&Contingency2x2::new(0, 0, 5, 5)),
            Err(Error::DegenerateTable(_))
        ));
    }

    #[test]
    fn verdicts_follow_the_threshold_and_accuracy() {
        assert_eq!(
            significance_verdict(0.01, 0.05, 0.9, 0.8),
            Verdict::SignificantlyBetter
        );
        assert_eq!(significance_verdict(0.5, 0.05, 0.9, 0.8), Verdict::Better);
        assert_eq!(
            significance_verdict(0.001, 0.05, 0.7, 0.8),
            Verdict::NotBetter
        );
        assert_eq!(
            significance_verdict(0.001, 0.05, 0.8, 0.8),
            Verdict::NotBetter
        );
    }

    #[test]
    fn tallies_add_up() {
        let verdicts = vec![
            Verdict::SignificantlyBetter,
            Verdict::Better,
            Verdict::Better,
            Verdict::NotBetter,
        ];
        let tally = tally_verdicts(&verdicts);
        assert_eq!(tally.significantly, 1);
        assert_eq!(tally.not_significantly, 2);
        assert_eq!(tally.total_better, 3);
        assert_eq!(tally.cases, 4);
    }
}
