//! 2-D cross-correlation, forward and backward, via im2col plus a small
//! hand-rolled GEMM. Direct loops would match the definition just as well;
//! the im2col route keeps epoch times in seconds at toy scale.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output spatial size `floor((dim + 2*padding - k) / stride) + 1`, with
/// validation of the degenerate cases.
pub fn conv_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh == 0 || kw == 0 || kh > ph || kw > pw {
        return Err(Error::InvalidArgument(format!(
            "kernel {kh}x{kw} exceeds padded input {ph}x{pw}"
        )));
    }
    let ho = (ph - kh) / stride + 1;
    let wo = (pw - kw) / stride + 1;
    if ho == 0 || wo == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate conv output {ho}x{wo}"
        )));
    }
    Ok((ho, wo))
}

/// c[m x n] += a[m x k] * b[k x n]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m x n] += a^T where a is [k x m], times b[k x n]
fn gemm_at_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m x n] += a[m x t] * b^T where b is [n x t]
fn gemm_bt_acc(m: usize, t: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * t..(i + 1) * t];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * t..(j + 1) * t];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col(input: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let area = d.ho * d.wo;
    for cin in 0..d.cin {
        let plane = &input[cin * d.h * d.w..(cin + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((cin * d.kh + ki) * d.kw + kj) * area;
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    let out_base = row + oh * d.wo;
                    if ih < 0 || ih >= d.h as isize {
                        cols[out_base..out_base + d.wo].fill(0.0);
                        continue;
                    }
                    let in_base = ih as usize * d.w;
                    for ow in 0..d.wo {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        cols[out_base + ow] = if iw < 0 || iw >= d.w as isize {
                            0.0
                        } else {
                            plane[in_base + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], d: &ConvDims, grad_input: &mut [f64]) {
    let area = d.ho * d.wo;
    for cin in 0..d.cin {
        let plane = &mut grad_input[cin * d.h * d.w..(cin + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((cin * d.kh + ki) * d.kw + kj) * area;
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let in_base = ih as usize * d.w;
                    for ow in 0..d.wo {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        plane[in_base + iw as usize] += cols[row + oh * d.wo + ow];
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(input: &Tensor, kernel: &Tensor) -> Result<()> {
    if input.shape().len() != 4 || kernel.shape().len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "conv2d expects 4-d input and kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if input.shape()[1] != kernel.shape()[1] {
        return Err(Error::ShapeMismatch {
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    Ok(())
}

/// Cross-correlation of `input` (N x Cin x H x W) with `kernel`
/// (Cout x Cin x kh x kw). No bias term.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    check_conv_shapes(input, kernel)?;
    let (n, cin, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (cout, kh, kw) = {
        let s = kernel.shape();
        (s[0], s[2], s[3])
    };
    let (ho, wo) = conv_output_dims(h, w, kh, kw, stride, padding)?;
    let d = ConvDims {
        cin,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        stride,
        padding,
    };
    let data = conv2d_forward_raw(input.data(), kernel.data(), n, cout, &d);
    Tensor::new(vec![n, cout, ho, wo], data)
}

fn conv2d_forward_raw(input: &[f64], kernel: &[f64], n: usize, cout: usize, d: &ConvDims) -> Vec<f64> {
    let area = d.ho * d.wo;
    let k = d.k();
    let mut out = vec![0.0; n * cout * area];
    let mut cols = vec![0.0; k * area];
    for s in 0..n {
        im2col(&input[s * d.cin * d.h * d.w..], d, &mut cols);
        gemm_acc(
            cout,
            k,
            area,
            kernel,
            &cols,
            &mut out[s * cout * area..(s + 1) * cout * area],
        );
    }
    out
}

/// Gradients of a conv2d forward pass. Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward_raw(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = ConvDims {
        cin,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        stride,
        padding,
    };
    let area = ho * wo;
    let k = d.k();
    let mut grad_input = vec![0.0; n * cin * h * w];
    let mut grad_kernel = vec![0.0; cout * k];
    let mut cols = vec![0.0; k * area];
    let mut grad_cols = vec![0.0; k * area];
    for s in 0..n {
        let go = &grad_out[s * cout * area..(s + 1) * cout * area];
        im2col(&input[s * cin * h * w..], &d, &mut cols);
        // dK += dY * cols^T
        gemm_bt_acc(cout, area, k, go, &cols, &mut grad_kernel);
        // dcols = K^T * dY, scattered back through im2col
        grad_cols.fill(0.0);
        gemm_at_acc(k, cout, area, kernel, go, &mut grad_cols);
        col2im_acc(&grad_cols, &d, &mut grad_input[s * cin * h * w..(s + 1) * cin * h * w]);
    }
    (grad_input, grad_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::naive_conv2d;
    use crate::rng::RngStream;

    #[test]
    fn one_by_one_kernel_scales() {
        let input = Tensor::filled(&[1, 1, 2, 2], 1.0).unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let out = conv2d(&input, &kernel, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = RngStream::from_seed(2);
        let data: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.next_f64()).collect();
        let input = Tensor::new(vec![1, 2, 5, 5], data).unwrap();
        // 3x3 kernel with a single 1 at the center, per input channel.
        let mut kdata = vec![0.0; 2 * 2 * 9];
        kdata[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
        kdata[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
        let kernel = Tensor::new(vec![2, 2, 3, 3], kdata).unwrap();
        let out = conv2d(&input, &kernel, 1, 1).unwrap();
        assert_eq!(out.shape(), input.shape());
        for (a, b) in out.data().iter().zip(input.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = RngStream::from_seed(77);
        let input = Tensor::new(
            vec![1, 2, 5, 5],
            (0..50).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let kernel = Tensor::new(
            vec![3, 2, 3, 3],
            (0..54).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let fast = conv2d(&input, &kernel, stride, padding).unwrap();
            let slow = naive_conv2d(&input, &kernel, stride, padding).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_degenerate_geometry() {
        let input = Tensor::zeros(&[1, 1, 2, 2]);
        let kernel = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&input, &kernel, 1, 0).is_err());
        // Channel mismatch reports both shapes.
        let k2 = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(matches!(
            conv2d(&input, &k2, 1, 0),
            Err(crate::error::Error::ShapeMismatch { .. })
        ));
        assert!(conv_output_dims(4, 4, 2, 2, 0, 0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::from_seed(5);
        let input = Tensor::new(vec![2, 2, 4, 4], (0..64).map(|_| rng.normal()).collect()).unwrap();
        let kernel = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|_| rng.normal()).collect()).unwrap();
        let (stride, padding) = (1, 1);
        let (ho, wo) = conv_output_dims(4, 4, 3, 3, stride, padding).unwrap();
        // Loss = sum of outputs, so upstream gradient is all ones.
        let grad_out = vec![1.0; 2 * 3 * ho * wo];
        let (gi, gk) = conv2d_backward_raw(
            input.data(),
            kernel.data(),
            &grad_out,
            2,
            2,
            4,
            4,
            3,
            3,
            3,
            stride,
            padding,
            ho,
            wo,
        );
        let f_in = |t: &Tensor| conv2d(t, &kernel, stride, padding).unwrap().sum();
        let fd_in = crate::oracle::fd_gradient(f_in, &input, 1e-6).unwrap();
        for (a, b) in gi.iter().zip(fd_in.data()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        let f_k = |t: &Tensor| conv2d(&input, t, stride, padding).unwrap().sum();
        let fd_k = crate::oracle::fd_gradient(f_k, &kernel, 1e-6).unwrap();
        for (a, b) in gk.iter().zip(fd_k.data()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }
}
