//! Raw numeric loops shared by the tape operations.
//!
//! Reductions use a fixed 8-lane accumulator order so results are identical
//! regardless of thread count; callers parallelise only over disjoint output
//! slices.

use super::Element;

const LANES: usize = 16;

/// Dot product with sixteen independent accumulators (fixed reduction
/// order, wide enough for one full vector register per step). The
/// fixed-size chunk views keep the lane loop free of bounds checks so it
/// vectorizes.
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        let xa: &[T; LANES] = xa.try_into().expect("exact chunk");
        let xb: &[T; LANES] = xb.try_into().expect("exact chunk");
        for l in 0..LANES {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = x.mul_add(*y, tail);
    }
    let mut sum = T::zero();
    for l in 0..LANES {
        sum += acc[l];
    }
    sum + tail
}

/// Sum with the same fixed lane order as [`dot`].
pub fn sum_slice<T: Element>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    for xa in &mut ca {
        let xa: &[T; LANES] = xa.try_into().expect("exact chunk");
        for l in 0..LANES {
            acc[l] += xa[l];
        }
    }
    let mut tail = T::zero();
    for x in ca.remainder() {
        tail += *x;
    }
    let mut sum = T::zero();
    for l in 0..LANES {
        sum += acc[l];
    }
    sum + tail
}

/// y += alpha * x
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(alpha, *yi);
    }
}

/// out += A[m,k] * B[k,n]
///
/// Row-accumulation order with the k loop blocked by four so each pass
/// over the output row carries four fused multiply-adds.
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let k4 = k / 4 * 4;
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p < k4 {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                let acc = b0[j].mul_add(a0, out_row[j]);
                let acc = b1[j].mul_add(a1, acc);
                let acc = b2[j].mul_add(a2, acc);
                out_row[j] = b3[j].mul_add(a3, acc);
            }
            p += 4;
        }
        while p < k {
            axpy(a_row[p], &b[p * n..(p + 1) * n], out_row);
            p += 1;
        }
    }
}

/// out += A[m,k] * B[n,k]^T  (rows of both operands are contiguous)
pub fn matmul_nt_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out += A[k,m]^T * B[k,n]
pub fn matmul_tn_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        for i in 0..m {
            let a_pi = a[p * m + i];
            axpy(a_pi, &b[p * n..(p + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
    }
}

/// Sliding-window gather for stride-1 same-padded convolution.
///
/// `x` is [c, t]; fills `patches` [t, c*k] with
/// patches[tt][(ci, j)] = x[ci][tt + j - pad_left] (0 outside the series),
/// so every convolution variant becomes one matrix product.
pub fn im2col<T: Element>(
    x: &[T],
    patches: &mut [T],
    c: usize,
    t: usize,
    k: usize,
    pad_left: usize,
) {
    debug_assert_eq!(patches.len(), t * c * k);
    patches.fill(T::zero());
    let ck = c * k;
    for ci in 0..c {
        let x_row = &x[ci * t..(ci + 1) * t];
        for j in 0..k {
            // valid output rows: 0 <= tt + j - pad_left < t
            let lo = pad_left.saturating_sub(j);
            let hi = if j >= pad_left {
                t.saturating_sub(j - pad_left)
            } else {
                t
            };
            for tt in lo..hi.max(lo) {
                patches[tt * ck + ci * k + j] = x_row[tt + j - pad_left];
            }
        }
    }
}

/// Flipped-and-transposed kernel for the input gradient:
/// out[ci][(co, j)] = kernel[co][ci][k-1-j].
pub fn flip_kernel<T: Element>(kernel: &[T], c_in: usize, c_out: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c_in * c_out * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            for j in 0..k {
                out[ci * c_out * k + co * k + j] = kernel[(co * c_in + ci) * k + (k - 1 - j)];
            }
        }
    }
    out
}

/// Zero-padded "same" 1D convolution for one instance.
///
/// `x` is [c_in, t], `kernel` is [c_out, c_in, k], `out` is [c_out, t].
/// pad_left = (k-1)/2, so the output keeps the time extent.
pub fn conv1d_same_one<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    out: &mut [T],
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
) {
    let pad_left = (k - 1) / 2;
    let cik = c_in * k;
    let mut patches = vec![T::zero(); t * cik];
    im2col(x, &mut patches, c_in, t, k, pad_left);
    // out^T[tt][co] = patches[tt] . kernel[co]
    let mut out_t = vec![T::zero(); t * c_out];
    matmul_nt_acc(&patches, kernel, &mut out_t, t, cik, c_out);
    for co in 0..c_out {
        let b = bias[co];
        let row = &mut out[co * t..(co + 1) * t];
        for tt in 0..t {
            row[tt] = out_t[tt * c_out + co] + b;
        }
    }
}

/// Input gradient for one instance: dx[ci, s] += sum_{co,j}
/// dout[co, s + j - pad_right] * kernel[co][ci][k-1-j].
/// `kernel_flipped` comes from [`flip_kernel`].
pub fn conv1d_same_dx_one<T: Element>(
    dout: &[T],
    kernel_flipped: &[T],
    dx: &mut [T],
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
) {
    // The adjoint of same-padding correlation is correlation with the
    // flipped kernel and the complementary padding.
    let pad = k - 1 - (k - 1) / 2;
    let cok = c_out * k;
    let mut patches = vec![T::zero(); t * cok];
    im2col(dout, &mut patches, c_out, t, k, pad);
    let mut dx_t = vec![T::zero(); t * c_in];
    matmul_nt_acc(&patches, kernel_flipped, &mut dx_t, t, cok, c_in);
    for ci in 0..c_in {
        let row = &mut dx[ci * t..(ci + 1) * t];
        for tt in 0..t {
            row[tt] += dx_t[tt * c_in + ci];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn matmul_acc_identity() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let eye = vec![1.0f64, 0.0, 0.0, 1.0];
        let mut out = vec![0.0f64; 4];
        matmul_acc(&a, &eye, &mut out, 2, 2, 2);
        assert_eq!(out, a);
    }

    #[test]
    fn conv_same_hand_example() {
        // x=[1,2,3], kernel=[1,1,1], bias=0 -> [3,6,5]
        let x = vec![1.0f64, 2.0, 3.0];
        let kern = vec![1.0f64, 1.0, 1.0];
        let mut out = vec![0.0f64; 3];
        conv1d_same_one(&x, &kern, &[0.0], &mut out, 1, 1, 3, 3);
        assert_eq!(out, vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_same_asymmetric_pad_even_kernel() {
        // k=2: pad_left=0, pad_right=1; out[t] = x[t] + x[t+1] (zero past end)
        let x = vec![1.0f64, 2.0, 3.0];
        let kern = vec![1.0f64, 1.0];
        let mut out = vec![0.0f64; 3];
        conv1d_same_one(&x, &kern, &[0.0], &mut out, 1, 1, 3, 2);
        assert_eq!(out, vec![3.0, 5.0, 3.0]);
    }
}
