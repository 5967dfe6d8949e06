//! GEMM-backed kernels for batched 1-D cross-correlation and dense layers.
//!
//! The convolution is decomposed per kernel tap `j`: output columns
//! `t0..t1` receive `W[:, :, j] x X[:, t0 + j - pad .. t1 + j - pad]`, with
//! out-of-range input columns treated as zero.

use matrixmultiply::dgemm;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub pad_left: usize,
}

impl ConvDims {
    /// Output column range touched by tap `j`, plus the first input column.
    fn tap_range(&self, j: usize) -> Option<(usize, usize, usize)> {
        let shift = j as isize - self.pad_left as isize;
        let t0 = (-shift).max(0) as usize;
        let t1 = (self.len as isize - shift).min(self.len as isize);
        if t1 <= t0 as isize {
            return None;
        }
        let t1 = t1 as usize;
        Some((t0, t1, (t0 as isize + shift) as usize))
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims {
        batch,
        c_in,
        c_out,
        len,
        kernel,
        ..
    } = d;
    let mut y = vec![0.0; batch * c_out * len];
    for n in 0..batch {
        let yn = &mut y[n * c_out * len..(n + 1) * c_out * len];
        for (o, row) in yn.chunks_exact_mut(len).enumerate() {
            row.fill(b[o]);
        }
        let xn = &x[n * c_in * len..(n + 1) * c_in * len];
        for j in 0..kernel {
            let Some((t0, t1, s0)) = d.tap_range(j) else {
                continue;
            };
            // SAFETY: A is c_out x c_in with strides (c_in*k, k) starting at tap j,
            // B is c_in x (t1-t0) inside xn, C is c_out x (t1-t0) inside yn.
            unsafe {
                dgemm(
                    c_out,
                    c_in,
                    t1 - t0,
                    1.0,
                    w.as_ptr().add(j),
                    (c_in * kernel) as isize,
                    kernel as isize,
                    xn.as_ptr().add(s0),
                    len as isize,
                    1,
                    1.0,
                    yn.as_mut_ptr().add(t0),
                    len as isize,
                    1,
                );
            }
        }
    }
    y
}

/// Accumulates the input gradient into `dx`.
pub(crate) fn conv1d_backward_input(dy: &[f64], w: &[f64], dx: &mut [f64], d: ConvDims) {
    let ConvDims {
        batch,
        c_in,
        c_out,
        len,
        kernel,
        ..
    } = d;
    for n in 0..batch {
        let dyn_ = &dy[n * c_out * len..(n + 1) * c_out * len];
        let dxn = &mut dx[n * c_in * len..(n + 1) * c_in * len];
        for j in 0..kernel {
            let Some((t0, t1, s0)) = d.tap_range(j) else {
                continue;
            };
            // SAFETY: A = W[:, :, j]^T is c_in x c_out with strides (k, c_in*k),
            // B is c_out x (t1-t0) inside dyn_, C is c_in x (t1-t0) inside dxn.
            unsafe {
                dgemm(
                    c_in,
                    c_out,
                    t1 - t0,
                    1.0,
                    w.as_ptr().add(j),
                    kernel as isize,
                    (c_in * kernel) as isize,
                    dyn_.as_ptr().add(t0),
                    len as isize,
                    1,
                    1.0,
                    dxn.as_mut_ptr().add(s0),
                    len as isize,
                    1,
                );
            }
        }
    }
}

/// Accumulates weight and bias gradients into `dw` and `db`.
pub(crate) fn conv1d_backward_params(
    dy: &[f64],
    x: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    d: ConvDims,
) {
    let ConvDims {
        batch,
        c_in,
        c_out,
        len,
        kernel,
        ..
    } = d;
    for n in 0..batch {
        let dyn_ = &dy[n * c_out * len..(n + 1) * c_out * len];
        let xn = &x[n * c_in * len..(n + 1) * c_in * len];
        for (o, row) in dyn_.chunks_exact(len).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        for j in 0..kernel {
            let Some((t0, t1, s0)) = d.tap_range(j) else {
                continue;
            };
            // SAFETY: A is c_out x (t1-t0) inside dyn_, B = X^T is (t1-t0) x c_in
            // with strides (1, len), C = dW[:, :, j] is c_out x c_in.
            unsafe {
                dgemm(
                    c_out,
                    t1 - t0,
                    c_in,
                    1.0,
                    dyn_.as_ptr().add(t0),
                    len as isize,
                    1,
                    xn.as_ptr().add(s0),
                    1,
                    len as isize,
                    1.0,
                    dw.as_mut_ptr().add(j),
                    (c_in * kernel) as isize,
                    kernel as isize,
                );
            }
        }
    }
}

/// `Y = X W^T + b` for `X: rows x k_in`, `W: k_out x k_in`.
pub(crate) fn dense_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    rows: usize,
    k_in: usize,
    k_out: usize,
) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * k_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    if rows == 0 || k_in == 0 {
        return y;
    }
    // SAFETY: all three operands are dense row-major buffers of the stated sizes.
    unsafe {
        dgemm(
            rows,
            k_in,
            k_out,
            1.0,
            x.as_ptr(),
            k_in as isize,
            1,
            w.as_ptr(),
            1,
            k_in as isize,
            1.0,
            y.as_mut_ptr(),
            k_out as isize,
            1,
        );
    }
    y
}

/// `dX += dY W`.
pub(crate) fn dense_backward_input(
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
    rows: usize,
    k_in: usize,
    k_out: usize,
) {
    // SAFETY: dense row-major buffers.
    unsafe {
        dgemm(
            rows,
            k_out,
            k_in,
            1.0,
            dy.as_ptr(),
            k_out as isize,
            1,
            w.as_ptr(),
            k_in as isize,
            1,
            1.0,
            dx.as_mut_ptr(),
            k_in as isize,
            1,
        );
    }
}

/// `dW += dY^T X`, `db += colsum(dY)`.
pub(crate) fn dense_backward_params(
    dy: &[f64],
    x: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    rows: usize,
    k_in: usize,
    k_out: usize,
) {
    for row in dy.chunks_exact(k_out) {
        db.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    // SAFETY: dense row-major buffers; dY^T uses strides (1, k_out).
    unsafe {
        dgemm(
            k_out,
            rows,
            k_in,
            1.0,
            dy.as_ptr(),
            1,
            k_out as isize,
            x.as_ptr(),
            k_in as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            k_in as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
        let mut y = vec![0.0; d.batch * d.c_out * d.len];
        for n in 0..d.batch {
            for o in 0..d.c_out {
                for t in 0..d.len {
                    let mut acc = b[o];
                    for i in 0..d.c_in {
                        for j in 0..d.kernel {
                            let s = t as isize + j as isize - d.pad_left as isize;
                            if s >= 0 && (s as usize) < d.len {
                                acc += w[(o * d.c_in + i) * d.kernel + j]
                                    * x[(n * d.c_in + i) * d.len + s as usize];
                            }
                        }
                    }
                    y[(n * d.c_out + o) * d.len + t] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn kernel_longer_than_sequence() {
        let d = ConvDims {
            batch: 2,
            c_in: 2,
            c_out: 3,
            len: 2,
            kernel: 8,
            pad_left: 4,
        };
        let x: Vec<f64> = (0..8).map(|v| v as f64 * 0.3 - 1.0).collect();
        let w: Vec<f64> = (0..48).map(|v| ((v * 7) % 11) as f64 * 0.1 - 0.5).collect();
        let b = vec![0.1, -0.2, 0.3];
        let got = conv1d_forward(&x, &w, &b, d);
        let want = naive(&x, &w, &b, d);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_matches_hand_product() {
        let y = dense_forward(&[1.0, 1.0], &[1.0, 2.0], &[0.5], 1, 2, 1);
        assert_eq!(y, vec![3.5]);
    }
}
