//! Forward kernels on plain tensors.
//!
//! The tape in [`super::graph`] calls the same row kernels, so the
//! differentiable and the direct paths agree bit for bit.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax<S: Real>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::arg(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    let mut lane = vec![S::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = src[base + j * inner];
            }
            softmax_in_place(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                out[base + j * inner] = *v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Causal variant: entries past `limit` are treated as `-inf`.
pub(crate) fn softmax_prefix_in_place<S: Real>(row: &mut [S], limit: usize) {
    softmax_in_place(&mut row[..limit]);
    for v in &mut row[limit..] {
        *v = S::zero();
    }
}

pub(crate) fn log_softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Row-wise log-softmax of a matrix.
pub fn log_softmax_rows<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, cols) = x.dims2()?;
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(cols) {
        log_softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Output length of a 1-D convolution.
pub fn conv1d_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::arg("kernel size and stride must be positive"));
    }
    let padded = t + 2 * padding;
    if padded < kernel {
        return Err(Error::arg(format!(
            "input length {t} with padding {padding} is shorter than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Gathers zero-padded windows into a `[T' × K·D_in]` matrix.
pub(crate) fn im2col<S: Real>(
    x: &[S],
    t: usize,
    d_in: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) -> Vec<S> {
    let width = kernel * d_in;
    let mut cols = vec![S::zero(); t_out * width];
    for o in 0..t_out {
        for k in 0..kernel {
            let src = (o * stride + k) as isize - padding as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let src = src as usize;
            let dst = o * width + k * d_in;
            cols[dst..dst + d_in].copy_from_slice(&x[src * d_in..(src + 1) * d_in]);
        }
    }
    cols
}

/// Scatter-adds window gradients back onto the input rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<S: Real>(
    gcols: &[S],
    gx: &mut [S],
    t: usize,
    d_in: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) {
    let width = kernel * d_in;
    for o in 0..t_out {
        for k in 0..kernel {
            let src = (o * stride + k) as isize - padding as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let src = src as usize;
            let g = &gcols[o * width + k * d_in..o * width + (k + 1) * d_in];
            for (a, &b) in gx[src * d_in..(src + 1) * d_in].iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// 1-D convolution of `x[T×D_in]` with `kernel[K×D_in×D_out]`, zero padding
/// on both ends.
pub fn conv1d<S: Real>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (t, d_in) = x.dims2()?;
    let (k, kd_in, d_out) = match kernel.shape() {
        [k, a, b] => (*k, *a, *b),
        s => return Err(Error::arg(format!("conv kernel must be rank 3, got {s:?}"))),
    };
    if kd_in != d_in {
        return Err(Error::arg(format!(
            "conv kernel expects {kd_in} input channels, input has {d_in}"
        )));
    }
    let t_out = conv1d_out_len(t, k, stride, padding)?;
    let cols = im2col(x.data(), t, d_in, k, stride, padding, t_out);
    let mut out = vec![S::zero(); t_out * d_out];
    S::gemm(
        t_out,
        k * d_in,
        d_out,
        S::one(),
        &cols,
        false,
        kernel.data(),
        false,
        S::zero(),
        &mut out,
    );
    Tensor::matrix(t_out, d_out, out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, skipping positions whose `ignore` flag is set.
pub fn cross_entropy<S: Real>(logits: &Tensor<S>, targets: &[usize], ignore: &[bool]) -> Result<S> {
    let (rows, cols) = logits.dims2()?;
    if targets.len() != rows || ignore.len() != rows {
        return Err(Error::arg(format!(
            "{rows} logit rows but {} targets and {} mask flags",
            targets.len(),
            ignore.len()
        )));
    }
    let logp = log_softmax_rows(logits)?;
    let mut total = S::zero();
    let mut count = 0usize;
    for (i, (&t, &skip)) in targets.iter().zip(ignore).enumerate() {
        if skip {
            continue;
        }
        if t >= cols {
            return Err(Error::arg(format!("target {t} outside vocabulary of {cols}")));
        }
        total -= logp.row(i)[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::arg("every position is masked"));
    }
    Ok(total / S::lit(count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&t(&[2], &[2f64.ln(), 0.0]), 0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);

        let s = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(softmax(&t(&[2, 2], &[0.0; 4]), 2).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let s = softmax(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn conv_length_examples() {
        assert_eq!(conv1d_out_len(100, 3, 2, 1).unwrap(), 50);
        assert_eq!(conv1d_out_len(4, 3, 2, 1).unwrap(), 2);
        assert!(conv1d_out_len(1, 3, 2, 0).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv1d(&x, &k, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // x: T=5, D_in=2; kernel K=3, D_out=1; stride 2, padding 1.
        let x: Vec<f64> = (0..10).map(|v| v as f64 * 0.5 - 1.0).collect();
        let kv: Vec<f64> = (0..6).map(|v| (v as f64).sin()).collect();
        let y = conv1d(&t(&[5, 2], &x), &t(&[3, 2, 1], &kv), 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        for o in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                let src = (o * 2 + k) as isize - 1;
                if (0..5).contains(&src) {
                    for c in 0..2 {
                        acc += x[src as usize * 2 + c] * kv[k * 2 + c];
                    }
                }
            }
            assert!((y.data()[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = t(&[1, 4], &[0.0; 4]);
        let ce = cross_entropy(&uniform, &[2], &[false]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);

        let sharp = t(&[1, 3], &[100.0, 0.0, 0.0]);
        assert!(cross_entropy(&sharp, &[0], &[false]).unwrap() < 1e-40);

        // losses {ln 4, ln 2}; second masked.
        let logits = t(&[2, 4], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1e9, -1e9]);
        let ce = cross_entropy(&logits, &[1, 0], &[false, true]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);

        assert!(cross_entropy(&logits, &[1, 0], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let n = v.len();
            let s = softmax(&t(&[n], &v), 0).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn conv_length_formula(t_len in 1usize..64, k in 1usize..6, stride in 1usize..4, pad in 0usize..3) {
            let res = conv1d_out_len(t_len, k, stride, pad);
            if t_len + 2 * pad >= k {
                let out = res.unwrap();
                prop_assert_eq!(out, (t_len + 2 * pad - k) / stride + 1);
                let x = Tensor::<f64>::zeros(&[t_len, 2]);
                let kern = Tensor::<f64>::zeros(&[k, 2, 3]);
                let y = conv1d(&x, &kern, stride, pad).unwrap();
                prop_assert_eq!(y.shape(), &[out, 3]);
            } else {
                prop_assert!(res.is_err());
            }
        }
    }
}
