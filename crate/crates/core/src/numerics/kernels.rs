//! Slice-level kernels shared by the tape's forward and backward passes.

/// `c (+)= op(a) * op(b)` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
///
/// `trans_a` / `trans_b` read the stored matrix as its transpose, so with
/// `trans_a` the buffer `a` holds a `[k, m]` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and `m*n`
    // buffers checked by the debug assertions and by every caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` in the overflow-safe form `max(x, 0) + ln(1 + e^{-|x|})`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Depthwise causal convolution over `[batch, seq, channels]` with kernel `[width, channels]`.
pub fn causal_conv_forward(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    batch: usize,
    seq: usize,
    channels: usize,
    width: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * seq * channels];
    for b in 0..batch {
        let xb = &x[b * seq * channels..(b + 1) * seq * channels];
        let yb = &mut y[b * seq * channels..(b + 1) * seq * channels];
        for t in 0..seq {
            let row = &mut yb[t * channels..(t + 1) * channels];
            row.copy_from_slice(bias);
            for j in 0..width {
                // tap j reads x[t - (width - 1) + j]
                let Some(src) = (t + j + 1).checked_sub(width) else {
                    continue;
                };
                let xr = &xb[src * channels..(src + 1) * channels];
                let kr = &kernel[j * channels..(j + 1) * channels];
                for c in 0..channels {
                    row[c] += kr[c] * xr[c];
                }
            }
        }
    }
    y
}

/// Returns `(grad_x, grad_kernel, grad_bias)`.
pub fn causal_conv_backward(
    gy: &[f64],
    x: &[f64],
    kernel: &[f64],
    batch: usize,
    seq: usize,
    channels: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; channels];
    for b in 0..batch {
        let off = b * seq * channels;
        for t in 0..seq {
            let gr = &gy[off + t * channels..off + (t + 1) * channels];
            for c in 0..channels {
                gb[c] += gr[c];
            }
            for j in 0..width {
                let Some(src) = (t + j + 1).checked_sub(width) else {
                    continue;
                };
                let xo = off + src * channels;
                for c in 0..channels {
                    gk[j * channels + c] += gr[c] * x[xo + c];
                    gx[xo + c] += gr[c] * kernel[j * channels + c];
                }
            }
        }
    }
    (gx, gk, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5],[6]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm(2, 2, 1, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [17.0, 39.0]);
        gemm(2, 2, 1, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [23.0, 34.0]);
        gemm(2, 2, 1, &a, true, &b, false, &mut c, true);
        assert_eq!(c, [46.0, 68.0]);
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-3, 0.05, 1.0, 7.5] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &x in &[-3.0, -0.2, 0.0, 1.7] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
