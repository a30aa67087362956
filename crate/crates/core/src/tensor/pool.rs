//! Non-overlapping 2-D pooling over the last two axes.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Average,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    /// Flat input index of each output's maximum (max mode only).
    pub argmax: Option<Vec<usize>>,
}

fn planes(shape: &[usize], window: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || window == 0 {
        return Err(Error::Shape(format!(
            "pooling needs a rank >= 2 input and window >= 1, got {shape:?} / {window}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!(
            "spatial dims {h}x{w} not divisible by window {window}"
        )));
    }
    let count = shape[..shape.len() - 2].iter().product();
    Ok((count, h, w))
}

/// Pools `data` laid out as `count` planes of `h×w`.
pub(crate) fn pool_slices(
    data: &[f64],
    count: usize,
    h: usize,
    w: usize,
    window: usize,
    mode: PoolMode,
    out: &mut [f64],
    mut argmax: Option<&mut [usize]>,
) {
    let (oh, ow) = (h / window, w / window);
    let area = (window * window) as f64;
    for p in 0..count {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = p * oh * ow + oy * ow + ox;
                match mode {
                    PoolMode::Average => {
                        let mut acc = 0.0;
                        for dy in 0..window {
                            for dx in 0..window {
                                acc += plane[(oy * window + dy) * w + ox * window + dx];
                            }
                        }
                        out[o] = acc / area;
                    }
                    PoolMode::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for dy in 0..window {
                            for dx in 0..window {
                                let i = (oy * window + dy) * w + ox * window + dx;
                                if plane[i] > best {
                                    best = plane[i];
                                    at = i;
                                }
                            }
                        }
                        out[o] = best;
                        if let Some(am) = argmax.as_deref_mut() {
                            am[o] = p * h * w + at;
                        }
                    }
                }
            }
        }
    }
}

/// Backward counterpart of [`pool_slices`]; accumulates into `grad_in`.
pub(crate) fn pool_backward_slices(
    grad_out: &[f64],
    count: usize,
    h: usize,
    w: usize,
    window: usize,
    mode: PoolMode,
    argmax: Option<&[usize]>,
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h / window, w / window);
    match mode {
        PoolMode::Average => {
            let area = (window * window) as f64;
            for p in 0..count {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[p * oh * ow + oy * ow + ox] / area;
                        for dy in 0..window {
                            for dx in 0..window {
                                grad_in[p * h * w + (oy * window + dy) * w + ox * window + dx] += g;
                            }
                        }
                    }
                }
            }
        }
        PoolMode::Max => {
            let am = argmax.expect("max pooling backward needs argmax indices");
            for (o, &g) in grad_out.iter().enumerate() {
                grad_in[am[o]] += g;
            }
        }
    }
}

pub fn pool2d(input: &Tensor, window: usize, mode: PoolMode) -> Result<Pooled> {
    let (count, h, w) = planes(input.shape(), window)?;
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h / window;
    shape[r - 1] = w / window;
    let mut out = vec![0.0; count * (h / window) * (w / window)];
    let mut am = (mode == PoolMode::Max).then(|| vec![0usize; out.len()]);
    pool_slices(input.data(), count, h, w, window, mode, &mut out, am.as_deref_mut());
    Ok(Pooled {
        output: Tensor::from_parts(shape, out),
        argmax: am,
    })
}

pub fn pool2d_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
    window: usize,
    mode: PoolMode,
    argmax: Option<&[usize]>,
) -> Result<Tensor> {
    let (count, h, w) = planes(input_shape, window)?;
    if grad_out.len() != count * (h / window) * (w / window) {
        return Err(Error::Dimension(format!(
            "grad_out {:?} does not match pooled {input_shape:?}",
            grad_out.shape()
        )));
    }
    if mode == PoolMode::Max && argmax.is_none_or(|a| a.len() != grad_out.len()) {
        return Err(Error::Dimension("max pooling backward needs matching argmax".into()));
    }
    let mut gi = vec![0.0; count * h * w];
    pool_backward_slices(grad_out.data(), count, h, w, window, mode, argmax, &mut gi);
    Ok(Tensor::from_parts(input_shape.to_vec(), gi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Tensor {
        Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn window_one_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.5 - 2.0);
        for mode in [PoolMode::Average, PoolMode::Max] {
            assert_eq!(pool2d(&x, 1, mode).unwrap().output, x);
        }
    }

    #[test]
    fn hand_values() {
        let avg = pool2d(&square(), 2, PoolMode::Average).unwrap();
        assert_eq!(avg.output.data(), &[2.5]);
        assert!(avg.argmax.is_none());
        let max = pool2d(&square(), 2, PoolMode::Max).unwrap();
        assert_eq!(max.output.data(), &[4.0]);
        assert_eq!(max.argmax.as_deref(), Some(&[3usize][..]));
    }

    #[test]
    fn indivisible_is_shape_error() {
        let x = Tensor::zeros(&[1, 3, 4]);
        assert!(matches!(pool2d(&x, 2, PoolMode::Average), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_routes() {
        let g = Tensor::new(&[1, 1, 1], vec![2.0]).unwrap();
        let avg = pool2d_backward(&g, &[1, 2, 2], 2, PoolMode::Average, None).unwrap();
        assert_eq!(avg.data(), &[0.5; 4]);
        let p = pool2d(&square(), 2, PoolMode::Max).unwrap();
        let mx = pool2d_backward(&g, &[1, 2, 2], 2, PoolMode::Max, p.argmax.as_deref()).unwrap();
        assert_eq!(mx.data(), &[0.0, 0.0, 0.0, 2.0]);
    }
}
