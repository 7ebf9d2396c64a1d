//! Elementwise ops, channel concatenation, the dense layer and the loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.expect_same_shape(input, "relu_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.dims().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Stack NCHW tensors along C. Returns the channel offset of each input.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = inputs.first().ok_or(Error::EmptyInput("concat_channels"))?;
    let (n, _, h, w) = first.shape().nchw()?;
    let mut offsets = Vec::with_capacity(inputs.len());
    let mut total = 0;
    for t in inputs {
        if !first.shape().channel_concatenable(t.shape()) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape().clone(),
                rhs: t.shape().clone(),
            });
        }
        offsets.push(total);
        total += t.dims()[1];
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.dims()[1];
            data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Ok((Tensor::from_vec(vec![n, total, h, w], data)?, offsets))
}

/// Inverse of [`concat_channels`] given the per-part channel counts.
pub fn split_channels(input: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (_, c, _, _) = input.shape().nchw()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::InvalidShape(format!("split {channels:?} does not cover {c} channels")));
    }
    let mut start = 0;
    channels
        .iter()
        .map(|&len| {
            let part = input.narrow_channels(start, len);
            start += len;
            part
        })
        .collect()
}

/// `[N, D] x [D, K] + [K] -> [N, K]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, k) = linear_dims(input, weight)?;
    if let Some(b) = bias {
        if b.numel() != k {
            return Err(Error::ChannelMismatch { op: "linear bias", expected: k, actual: b.numel() });
        }
    }
    let mut out = vec![0.0; n * k];
    super::gemm::gemm(
        super::gemm::Mat::new(input.data(), n, d),
        super::gemm::Mat::new(weight.data(), d, k),
        0.0,
        &mut out,
    );
    if let Some(b) = bias {
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
        }
    }
    Tensor::from_vec(vec![n, k], out)
}

fn linear_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    match (input.dims(), weight.dims()) {
        (&[n, d], &[d2, k]) if d == d2 => Ok((n, d, k)),
        _ => Err(Error::ShapeMismatch {
            op: "linear",
            lhs: input.shape().clone(),
            rhs: weight.shape().clone(),
        }),
    }
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    use super::gemm::{gemm, Mat};
    let (n, d, k) = linear_dims(input, weight)?;
    if grad_out.dims() != [n, k] {
        return Err(Error::InvalidShape("linear_backward: grad_out shape".into()));
    }
    let gout = Mat::new(grad_out.data(), n, k);
    let mut gi = vec![0.0; n * d];
    gemm(gout, Mat::new(weight.data(), d, k).t(), 0.0, &mut gi);
    let mut gw = vec![0.0; d * k];
    gemm(Mat::new(input.data(), n, d).t(), gout, 0.0, &mut gw);
    let mut gb = vec![0.0; k];
    for row in grad_out.data().chunks(k) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::from_vec(vec![n, d], gi)?,
        Tensor::from_vec(vec![d, k], gw)?,
        Tensor::from_vec(vec![k], gb)?,
    ))
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = match logits.dims() {
        &[_, k] => k,
        _ => return Err(Error::InvalidShape(format!("softmax expects [N, K], got {}", logits.shape()))),
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch. Returns `(loss, softmax probabilities)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.check_finite("softmax_cross_entropy logits")?;
    let (n, k) = match logits.dims() {
        &[n, k] => (n, k),
        _ => return Err(Error::InvalidShape(format!("logits must be [N, K], got {}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(Error::InvalidShape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label, classes: k });
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (&label, lrow) in labels.iter().zip(logits.data().chunks(k)) {
        let m = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lrow.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - lrow[label];
    }
    Ok((loss / n as f64, probs))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], grad_loss: f64) -> Tensor {
    let k = probs.dims()[1];
    let n = labels.len() as f64;
    let mut g = probs.clone();
    for (row, &label) in g.data_mut().chunks_mut(k).zip(labels) {
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= grad_loss / n);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_widths_add_up() {
        let a = Tensor::ones(vec![2, 4, 3, 3]).unwrap();
        let b = Tensor::zeros(vec![2, 4, 3, 3]).unwrap();
        let (c, offsets) = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[2, 8, 3, 3]);
        assert_eq!(offsets, vec![0, 4]);
        assert!(concat_channels(&[]).is_err());
        let bad = Tensor::ones(vec![2, 4, 3, 2]).unwrap();
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let logits = Tensor::zeros(vec![3, 10]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
        assert!((loss - 2.302585).abs() < 1e-6);
        assert!(probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 10, 1]),
            Err(Error::InvalidLabel { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let logits = Tensor::from_vec(vec![1, 3], vec![1000.0, 1001.0, 999.0]).unwrap();
        let p = softmax(&logits).unwrap();
        assert!(p.all_finite());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng).unwrap();
        assert_eq!(add(&x, &Tensor::zeros_like(&x)).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(vec![2, 3, 4, 5]).unwrap()).is_err());
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = relu_backward(&Tensor::ones(vec![3]).unwrap(), &x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[7.5, 9.5]);
    }
}
