//! 2x2 / stride-2 max and average pooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn halved_dims(input: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.shape().nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatial(op, h, w));
    }
    Ok((n, c, h / 2, w / 2))
}

/// Max over each 2x2 window. `argmax[i]` is the flat input index that produced
/// output `i`; ties resolve to the first maximum in row-major window order.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, oh, ow) = halved_dims(input, "max_pool2")?;
    let (h, w) = (oh * 2, ow * 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let top = base + 2 * y * w + 2 * xo;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, oh, ow], out)?, argmax))
}

pub fn max_pool2_backward(grad_out: &Tensor, argmax: &[usize], input_dims: &[usize]) -> Result<Tensor> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::InvalidShape("max_pool2_backward: argmax length mismatch".into()));
    }
    let mut grad = Tensor::zeros(input_dims.to_vec())?;
    let g = grad.data_mut();
    for (&idx, &go) in argmax.iter().zip(grad_out.data()) {
        g[idx] += go;
    }
    Ok(grad)
}

pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = halved_dims(input, "avg_pool2")?;
    let (h, w) = (oh * 2, ow * 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let top = base + 2 * y * w + 2 * xo;
                out.push((x[top] + x[top + 1] + x[top + w] + x[top + w + 1]) * 0.25);
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out)
}

pub fn avg_pool2_backward(grad_out: &Tensor, input_dims: &[usize]) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.shape().nchw()?;
    let expected = [n, c, oh * 2, ow * 2];
    if input_dims != expected {
        return Err(Error::InvalidShape(format!(
            "avg_pool2_backward: input {input_dims:?} vs grad {:?}",
            grad_out.dims()
        )));
    }
    let (h, w) = (oh * 2, ow * 2);
    let mut grad = Tensor::zeros(expected.to_vec())?;
    let g = grad.data_mut();
    for (i, &go) in grad_out.data().iter().enumerate() {
        let plane = i / (oh * ow);
        let y = (i / ow) % oh;
        let xo = i % ow;
        let top = plane * h * w + 2 * y * w + 2 * xo;
        let share = go * 0.25;
        g[top] += share;
        g[top + 1] += share;
        g[top + w] += share;
        g[top + w + 1] += share;
    }
    Ok(grad)
}

/// Mean over H and W: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.shape().nchw()?;
    let plane = h * w;
    let out = input.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::from_vec(vec![n, c], out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_dims: &[usize]) -> Result<Tensor> {
    let plane = input_dims[2] * input_dims[3];
    if grad_out.numel() * plane != input_dims.iter().product::<usize>() {
        return Err(Error::InvalidShape("global_avg_pool_backward: size mismatch".into()));
    }
    let mut data = Vec::with_capacity(grad_out.numel() * plane);
    for &go in grad_out.data() {
        data.extend(std::iter::repeat(go / plane as f64).take(plane));
    }
    Tensor::from_vec(input_dims.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (m, idx) = max_pool2(&x).unwrap();
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn constant_input_is_fixed_point() {
        let x = Tensor::full(vec![2, 3, 4, 6], 1.75).unwrap();
        let (m, _) = max_pool2(&x).unwrap();
        let a = avg_pool2(&x).unwrap();
        assert_eq!(m.dims(), &[2, 3, 2, 3]);
        assert!(m.data().iter().chain(a.data()).all(|&v| v == 1.75));
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::ones(vec![1, 1, 3, 4]).unwrap();
        assert!(matches!(max_pool2(&x), Err(Error::OddSpatial(_, 3, 4))));
        assert!(avg_pool2(&x).is_err());
    }

    #[test]
    fn backward_routes_and_spreads() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        let (_, idx) = max_pool2(&x).unwrap();
        let g = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(max_pool2_backward(&g, &idx, x.dims()).unwrap().data(), &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(avg_pool2_backward(&g, x.dims()).unwrap().data(), &[0.5; 4]);
    }
}
