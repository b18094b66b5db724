use super::{Matrix, Tensor4};
use crate::error::{Error, Result};

/// 2×2 average pooling with stride 2. Height and width must be even.
pub fn avgpool2(input: &Tensor4) -> Result<Tensor4> {
    let [b, c, h, w] = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avgpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(b, c, oh, ow);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        let s = &src[plane * h * w..][..h * w];
        let d = &mut dst[plane * oh * ow..][..oh * ow];
        for y in 0..oh {
            let r0 = &s[2 * y * w..][..w];
            let r1 = &s[(2 * y + 1) * w..][..w];
            for x in 0..ow {
                d[y * ow + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    Ok(out)
}

/// Spreads each pooled gradient evenly over its 2×2 window.
pub fn avgpool2_backward(grad_out: &Tensor4) -> Tensor4 {
    let [b, c, oh, ow] = grad_out.dims();
    let (h, w) = (oh * 2, ow * 2);
    let mut out = Tensor4::zeros(b, c, h, w);
    let src = grad_out.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        let s = &src[plane * oh * ow..][..oh * ow];
        let d = &mut dst[plane * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = 0.25 * s[(y / 2) * ow + x / 2];
            }
        }
    }
    out
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor4::from_vec(input.dims(), data).expect("same dims")
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor4, saved_input: &Tensor4) -> Result<Tensor4> {
    if grad_out.dims() != saved_input.dims() {
        return Err(Error::shape(format!(
            "relu backward: grad {:?} vs input {:?}",
            grad_out.dims(),
            saved_input.dims()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(saved_input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(grad_out.dims(), data)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub x: Matrix,
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// `y = x·W + b`, row by row.
pub fn affine_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols() {
        return Err(Error::shape(format!(
            "affine: bias has {} entries, weight has {} columns",
            b.len(),
            w.cols()
        )));
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(y)
}

pub fn affine_backward(grad_out: &Matrix, x: &Matrix, w: &Matrix) -> Result<AffineGrads> {
    if x.cols() != w.rows() || grad_out.rows() != x.rows() || grad_out.cols() != w.cols() {
        return Err(Error::shape(format!(
            "affine backward: x {}x{}, W {}x{}, grad {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols(),
            grad_out.rows(),
            grad_out.cols()
        )));
    }
    let gx = grad_out.matmul(&w.transpose())?;
    let gw = x.transpose().matmul(grad_out)?;
    let mut gb = vec![0.0; w.cols()];
    for r in 0..grad_out.rows() {
        for (acc, g) in gb.iter_mut().zip(grad_out.row(r)) {
            *acc += g;
        }
    }
    Ok(AffineGrads { x: gx, w: gw, b: gb })
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (rows, classes) = (logits.rows(), logits.cols());
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "softmax_xent: {} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    if rows == 0 {
        return Err(Error::invalid("softmax_xent: empty batch"));
    }
    let mut grad = Matrix::zeros(rows, classes);
    let mut loss = 0.0;
    let inv_batch = 1.0 / rows as f64;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss -= row[label] - max - log_sum;
        let g = grad.row_mut(r);
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - max - log_sum).exp() * inv_batch;
        }
        g[label] -= inv_batch;
    }
    Ok((loss * inv_batch, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_constant_and_block() {
        let t = Tensor4::filled([1, 2, 4, 4], 1.5);
        assert!(avgpool2(&t).unwrap().data().iter().all(|&v| v == 1.5));

        let t = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2(&t).unwrap().data(), &[2.5]);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        assert!(avgpool2(&Tensor4::zeros(1, 1, 3, 4)).is_err());
    }

    #[test]
    fn pool_backward_quarters() {
        let g = Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(avgpool2_backward(&g).data(), &[0.5; 4]);
    }

    #[test]
    fn relu_masks() {
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![-2.0, -0.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
        let g = Tensor4::filled([1, 1, 1, 4], 1.0);
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn affine_identity_and_bias_broadcast() {
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let y = affine_forward(&x, &Matrix::identity(3), &[0.0; 3]).unwrap();
        assert_eq!(y, x);

        let z = affine_forward(&Matrix::zeros(2, 3), &Matrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(z.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(z.row(1), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn affine_inner_dim_mismatch() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(4, 2);
        assert!(affine_forward(&x, &w, &[0.0, 0.0]).is_err());
        assert!(affine_backward(&Matrix::zeros(2, 2), &x, &w).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Matrix::from_vec(2, 5, vec![0.3; 10]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn xent_rejects_bad_label() {
        let logits = Matrix::zeros(1, 3);
        assert!(softmax_xent(&logits, &[3]).is_err());
    }

    #[test]
    fn xent_grad_rows_sum_to_zero() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, -1.0, 0.2, 4.0, 2.0, -3.0]).unwrap();
        let (_, g) = softmax_xent(&logits, &[1, 0]).unwrap();
        for r in 0..2 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
    }
}
