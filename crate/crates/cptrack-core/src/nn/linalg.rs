//! Small dense matrix kernels used by the layers.
//!
//! All kernels accumulate into their output and keep a fixed summation
//! order per output element (ascending inner index, ascending batch row),
//! independent of the batch size. That makes batched evaluation bitwise
//! identical to per-sample evaluation and keeps training deterministic.

/// `out[n x m] += a[n x k] * b[k x m]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[k x m] += a^T[k x n] * dy[n x m]` where `a` is `[n x k]`.
///
/// This is the weight-gradient kernel: `a` holds inputs, `dy` upstream
/// adjoints, batch rows are summed in ascending order.
pub(crate) fn matmul_at_acc(a: &[f64], dy: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for row in 0..n {
        let a_row = &a[row * k..(row + 1) * k];
        let dy_row = &dy[row * m..(row + 1) * m];
        for (p, &a_rp) in a_row.iter().enumerate() {
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &dy_rj) in out_row.iter_mut().zip(dy_row.iter()) {
                *o += a_rp * dy_rj;
            }
        }
    }
}

/// `out[n x k] += dy[n x m] * w^T[m x k]` where `w` is `[k x m]`.
///
/// Input-gradient kernel; the dot product runs over contiguous rows of `w`.
pub(crate) fn matmul_bt_acc(dy: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * k);
    for row in 0..n {
        let dy_row = &dy[row * m..(row + 1) * m];
        let out_row = &mut out[row * k..(row + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let w_row = &w[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (&d, &wv) in dy_row.iter().zip(w_row.iter()) {
                acc += d * wv;
            }
            *o += acc;
        }
    }
}

/// Broadcasts `bias[m]` into every row of `out[n x m]` (overwriting).
pub(crate) fn broadcast_bias(bias: &[f64], out: &mut [f64], n: usize, m: usize) {
    debug_assert_eq!(bias.len(), m);
    debug_assert_eq!(out.len(), n * m);
    for row in 0..n {
        out[row * m..(row + 1) * m].copy_from_slice(bias);
    }
}

/// `out[m] += column sums of dy[n x m]`, batch rows in ascending order.
pub(crate) fn colsum_acc(dy: &[f64], out: &mut [f64], n: usize, m: usize) {
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(out.len(), m);
    for row in 0..n {
        let dy_row = &dy[row * m..(row + 1) * m];
        for (o, &d) in out.iter_mut().zip(dy_row.iter()) {
            *o += d;
        }
    }
}
