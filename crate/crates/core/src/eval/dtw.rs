//! Dimension-dependent dynamic time warping and the 1-NN classifier.

use rayon::prelude::*;

use crate::data::TsDataset;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// DTW distance between two [V, T] series.
///
/// Cell cost is the squared Euclidean distance summed over all variables
/// at a pair of time points (dimension-dependent warping); the recurrence
/// uses the full window. The final square root is omitted: it is monotone,
/// so nearest-neighbour decisions are unchanged.
pub fn dtw_distance<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::ShapeMismatch {
            op: "dtw_distance",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let v = sa[0];
    let (t1, t2) = (sa[1], sb[1]);
    if t1 == 0 || t2 == 0 {
        return Err(Error::Contract("dtw needs non-empty series".into()));
    }
    let cost = |i: usize, j: usize| -> f64 {
        let mut d = 0.0;
        for vi in 0..v {
            let diff = a.data()[vi * t1 + i].as_f64() - b.data()[vi * t2 + j].as_f64();
            d += diff * diff;
        }
        d
    };
    // Rolling two-row dynamic program over the full T1 x T2 lattice.
    let mut prev = vec![f64::INFINITY; t2 + 1];
    let mut cur = vec![f64::INFINITY; t2 + 1];
    prev[0] = 0.0;
    for i in 1..=t1 {
        cur[0] = f64::INFINITY;
        for j in 1..=t2 {
            let c = cost(i - 1, j - 1);
            cur[j] = c + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[t2])
}

/// 1-nearest-neighbour labels for every test instance; distance ties break
/// toward the smaller training index. Test instances evaluate in parallel.
pub fn nn1_dtw_classify<T: Element>(
    train: &TsDataset<T>,
    test_x: &Tensor<T>,
) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::Data("1-NN needs a non-empty training set".into()));
    }
    let shape = test_x.shape();
    if shape.len() != 3 || shape[1] != train.dims().1 {
        return Err(Error::ShapeMismatch {
            op: "nn1_dtw_classify",
            lhs: shape.to_vec(),
            rhs: train.x.shape().to_vec(),
        });
    }
    let (v, t) = (shape[1], shape[2]);
    let n_test = shape[0];
    let train_instances: Vec<Tensor<T>> = (0..train.len()).map(|i| train.instance(i)).collect();
    let classify_one = |i: usize| -> Result<usize> {
        let slice = &test_x.data()[i * v * t..(i + 1) * v * t];
        let query = Tensor::new(vec![v, t], slice.to_vec())?;
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, candidate) in train_instances.iter().enumerate() {
            let d = dtw_distance(&query, candidate)?;
            if d < best.0 {
                best = (d, j);
            }
        }
        Ok(train.labels[best.1])
    };
    (0..n_test)
        .into_par_iter()
        .map(classify_one)
        .collect::<Result<Vec<usize>>>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v, data.len() / v], data.to_vec()).unwrap()
    }

    #[test]
    fn identical_series_have_zero_distance() {
        let a = series(2, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn warping_aligns_unequal_lengths() {
        // a=[0,0,1], b=[0,1]: align both zeros of a to b's zero -> cost 0
        let a = series(1, &[0.0, 0.0, 1.0]);
        let b = series(1, &[0.0, 1.0]);
        assert_eq!(dtw_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn single_cell_is_squared_distance() {
        let a = series(1, &[0.0]);
        let b = series(1, &[5.0]);
        assert_eq!(dtw_distance(&a, &b).unwrap(), 25.0);
    }

    #[test]
    fn variable_count_mismatch_errors() {
        let a = series(1, &[0.0, 1.0]);
        let b = series(2, &[0.0, 1.0]);
        assert!(matches!(
            dtw_distance(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let a = series(2, &[0.3, -1.0, 2.0, 0.7, 0.0, 0.5]);
        let b = series(2, &[1.0, 0.0, -0.5, 0.2, 0.4, 0.9]);
        let ab = dtw_distance(&a, &b).unwrap();
        let ba = dtw_distance(&b, &a).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn exact_training_match_wins() {
        let train = TsDataset {
            name: "t".into(),
            x: Tensor::<f64>::new(
                vec![2, 1, 3],
                vec![0.0, 1.0, 2.0, 5.0, 5.0, 5.0],
            )
            .unwrap(),
            labels: vec![0, 1],
            class_names: vec!["a".into(), "b".into()],
        };
        let test_x = Tensor::new(vec![1, 1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(nn1_dtw_classify(&train, &test_x).unwrap(), vec![1]);
    }
}
