//! Plain-loop reference implementations used to verify the optimized paths.
//!
//! Everything here is deliberately naive: nested scalar loops, no shared
//! kernels, no tape. Tests compare the fast implementations against these.

use crate::tensor::Tensor;

/// Reference outputs of the class-specific attention forward pass.
pub struct CsaReferenceOutput {
    /// [B, C, T, F]
    pub o_csa: Tensor<f64>,
    /// [C, T, T]
    pub s: Tensor<f64>,
    pub s_cd: Tensor<f64>,
    pub attention: Tensor<f64>,
}

/// Scalar-loop class-specific attention: project, average per class,
/// differentiate, softmax, apply. Classes absent from the batch get
/// all-zero aggregated rows, matching the optimized path.
#[allow(clippy::too_many_arguments)]
pub fn csa_scalar_reference(
    l: &Tensor<f64>,
    labels: &[usize],
    w_k: &Tensor<f64>,
    w_q: &Tensor<f64>,
    w_v: &Tensor<f64>,
    sigma: f64,
    num_classes: usize,
    use_cd: bool,
) -> CsaReferenceOutput {
    let (b, t, f) = (l.shape()[0], l.shape()[1], l.shape()[2]);
    let f_a = w_k.shape()[1];
    let c = num_classes;

    let lv = |bi: usize, ti: usize, fi: usize| l.at(&[bi, ti, fi]);

    // Projections.
    let mut k = vec![0.0; b * t * f_a];
    let mut q = vec![0.0; b * t * f_a];
    let mut v = vec![0.0; b * t * f];
    for bi in 0..b {
        for ti in 0..t {
            for fa in 0..f_a {
                let mut sk = 0.0;
                let mut sq = 0.0;
                for fi in 0..f {
                    sk += lv(bi, ti, fi) * w_k.at(&[fi, fa]);
                    sq += lv(bi, ti, fi) * w_q.at(&[fi, fa]);
                }
                k[(bi * t + ti) * f_a + fa] = sk;
                q[(bi * t + ti) * f_a + fa] = sq;
            }
            for fo in 0..f {
                let mut sv = 0.0;
                for fi in 0..f {
                    sv += lv(bi, ti, fi) * w_v.at(&[fi, fo]);
                }
                v[(bi * t + ti) * f + fo] = sv;
            }
        }
    }

    // Per-class averages of K and Q.
    let mut counts = vec![0usize; c];
    for &lab in labels {
        counts[lab] += 1;
    }
    let mut k_c = vec![0.0; c * t * f_a];
    let mut q_c = vec![0.0; c * t * f_a];
    for (bi, &lab) in labels.iter().enumerate() {
        for ti in 0..t {
            for fa in 0..f_a {
                k_c[(lab * t + ti) * f_a + fa] += k[(bi * t + ti) * f_a + fa] / counts[lab] as f64;
                q_c[(lab * t + ti) * f_a + fa] += q[(bi * t + ti) * f_a + fa] / counts[lab] as f64;
            }
        }
    }

    // Similarity per class.
    let mut s = vec![0.0; c * t * t];
    for ci in 0..c {
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0;
                for fa in 0..f_a {
                    acc += k_c[(ci * t + i) * f_a + fa] * q_c[(ci * t + j) * f_a + fa];
                }
                s[(ci * t + i) * t + j] = acc;
            }
        }
    }

    // Class differentiation.
    let s_cd = if use_cd {
        let mut out = vec![0.0; c * t * t];
        for ci in 0..c {
            for i in 0..t {
                for j in 0..t {
                    let mut total = 0.0;
                    for cj in 0..c {
                        total += s[(cj * t + i) * t + j];
                    }
                    let sc = s[(ci * t + i) * t + j];
                    let s_not = (total - sc) / (c as f64 - 1.0);
                    out[(ci * t + i) * t + j] = sc + (sc - s_not).abs();
                }
            }
        }
        out
    } else {
        s.clone()
    };

    // Row softmax.
    let mut attention = vec![0.0; c * t * t];
    for ci in 0..c {
        for i in 0..t {
            let row = &s_cd[(ci * t + i) * t..(ci * t + i + 1) * t];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..t {
                attention[(ci * t + i) * t + j] = (row[j] - max).exp() / denom;
            }
        }
    }

    // Residual attention application.
    let mut o = vec![0.0; b * c * t * f];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                for fi in 0..f {
                    let mut av = 0.0;
                    for tj in 0..t {
                        av += attention[(ci * t + ti) * t + tj] * v[(bi * t + tj) * f + fi];
                    }
                    o[((bi * c + ci) * t + ti) * f + fi] = lv(bi, ti, fi) + sigma * av;
                }
            }
        }
    }

    CsaReferenceOutput {
        o_csa: Tensor::new(vec![b, c, t, f], o).expect("reference shape"),
        s: Tensor::new(vec![c, t, t], s).expect("reference shape"),
        s_cd: Tensor::new(vec![c, t, t], s_cd).expect("reference shape"),
        attention: Tensor::new(vec![c, t, t], attention).expect("reference shape"),
    }
}

/// DTW by exhaustive enumeration of every monotone warping path (steps
/// right, down, diagonal). Exponential; for tiny series only.
pub fn dtw_brute_force(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let v = a.shape()[0];
    let (t1, t2) = (a.shape()[1], b.shape()[1]);
    let cost = |i: usize, j: usize| -> f64 {
        let mut d = 0.0;
        for vi in 0..v {
            let diff = a.at(&[vi, i]) - b.at(&[vi, j]);
            d += diff * diff;
        }
        d
    };
    fn walk(
        i: usize,
        j: usize,
        acc: f64,
        t1: usize,
        t2: usize,
        cost: &dyn Fn(usize, usize) -> f64,
        best: &mut f64,
    ) {
        let acc = acc + cost(i, j);
        if i == t1 - 1 && j == t2 - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if acc >= *best {
            return; // every extension only adds non-negative cost
        }
        if i + 1 < t1 {
            walk(i + 1, j, acc, t1, t2, cost, best);
        }
        if j + 1 < t2 {
            walk(i, j + 1, acc, t1, t2, cost, best);
        }
        if i + 1 < t1 && j + 1 < t2 {
            walk(i + 1, j + 1, acc, t1, t2, cost, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(0, 0, 0.0, t1, t2, &cost, &mut best);
    best
}

/// Serial nearest-neighbour scan with brute-force DTW and smallest-index
/// tie-breaking.
pub fn nn1_brute_force(
    train: &[(Tensor<f64>, usize)],
    test: &[Tensor<f64>],
) -> Vec<usize> {
    test.iter()
        .map(|query| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, (candidate, _)) in train.iter().enumerate() {
                let d = dtw_brute_force(query, candidate);
                if d < best.0 {
                    best = (d, j);
                }
            }
            train[best.1].1
        })
        .collect()
}

/// Survival function of the df=1 chi-square distribution by Simpson
/// integration of the density on [stat, stat + 200].
pub fn chi2_sf_df1_quadrature(stat: f64) -> f64 {
    assert!(stat > 0.0, "quadrature needs a positive statistic");
    let density = |x: f64| (-x / 2.0).exp() / (2.0 * std::f64::consts::PI * x).sqrt();
    let a = stat;
    let b = stat + 200.0;
    let n = 400_000usize; // even
    let h = (b - a) / n as f64;
    let mut sum = density(a) + density(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        sum += density(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}
