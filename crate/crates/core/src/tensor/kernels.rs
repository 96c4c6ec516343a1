//! Forward kernels shared by the tape and by tape-free inference code.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Contracts `core` with `vec` along `mode` (1-based). The result drops that
/// dimension: a `a x b x c` core contracted on mode 1 becomes `b x c`.
pub fn mode_n_product<T: Element>(core: &Tensor<T>, vec: &Tensor<T>, mode: usize) -> Result<Tensor<T>> {
    let (pre, len, post) = mode_split(core.shape(), vec.shape(), mode)?;
    let c = core.data();
    let v = vec.data();
    let mut out = vec![T::zero(); pre * post];
    for p in 0..pre {
        let o = &mut out[p * post..(p + 1) * post];
        for (j, &vj) in v.iter().enumerate() {
            let row = &c[(p * len + j) * post..(p * len + j + 1) * post];
            for (acc, &cv) in o.iter_mut().zip(row) {
                *acc += cv * vj;
            }
        }
    }
    let mut shape = core.shape().to_vec();
    shape.remove(mode - 1);
    Tensor::new(&shape, out)
}

/// `(prefix size, contracted size, suffix size)` for a mode product.
pub(crate) fn mode_split(core: &[usize], vec: &[usize], mode: usize) -> Result<(usize, usize, usize)> {
    if mode == 0 || mode > core.len() {
        return Err(Error::domain(
            "mode_n_product",
            format!("mode {mode} out of range for core of shape {core:?}"),
        ));
    }
    let len = core[mode - 1];
    if vec != [len] {
        return Err(Error::Shape {
            op: "mode_n_product",
            expected: core.to_vec(),
            got: vec.to_vec(),
        });
    }
    let pre = core[..mode - 1].iter().product();
    let post = core[mode..].iter().product();
    Ok((pre, len, post))
}

/// `y = W x (+ b)` for `W` of shape `rows x cols`.
pub fn linear_map<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_linear(x.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let xs = x.data();
    let mut y: Vec<T> = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![T::zero(); rows],
    };
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for (&a, &b) in row.iter().zip(xs) {
            acc += a * b;
        }
        *yr += acc;
    }
    Tensor::new(&[rows], y)
}

pub(crate) fn check_linear(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<()> {
    if w.len() != 2 || x.len() != 1 || x[0] != w[1] {
        return Err(Error::Shape {
            op: "linear_map",
            expected: w.to_vec(),
            got: x.to_vec(),
        });
    }
    if let Some(b) = b {
        if b != [w[0]] {
            return Err(Error::shape("linear_map", &[w[0]], b));
        }
    }
    Ok(())
}

/// Numerically stable softmax of `x / temperature`. Temperatures below
/// `1e-6` take the argmax path and return a one-hot vector.
pub fn softmax<T: Element>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) {
        return Err(Error::domain(
            "softmax",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    if x.rank() != 1 {
        return Err(Error::shape("softmax", &[x.numel()], x.shape()));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    if temperature < 1e-6 {
        let mut out = vec![T::zero(); x.numel()];
        out[argmax(x.data())] = T::one();
        return Tensor::new(x.shape(), out);
    }
    let inv_t = T::of(1.0 / temperature);
    let max = x.data().iter().copied().fold(T::neg_infinity(), T::max);
    let mut e: Vec<T> = x.data().iter().map(|&v| ((v - max) * inv_t).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.iter_mut().for_each(|v| *v = *v / s);
    Tensor::new(x.shape(), e)
}

/// Index of the first maximal element.
pub fn argmax<T: Element>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Geometry of a channels-last 3D convolution over `t x h x w x c` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Output extent along each of (t, h, w): `floor((n + 2p - k) / s) + 1`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return Err(Error::domain("conv3d", "kernel and stride must be positive"));
            }
            if self.kernel[a] > padded {
                return Err(Error::domain(
                    "conv3d",
                    format!(
                        "kernel {:?} larger than padded input {:?} (padding {:?})",
                        self.kernel, input, self.padding
                    ),
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

pub(crate) struct ConvDims {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], b: &[usize], g: &ConvGeometry) -> Result<ConvDims> {
    if x.len() != 4 {
        return Err(Error::shape("conv3d", &[0, 0, 0, 0], x));
    }
    let expected_w = [g.kernel[0], g.kernel[1], g.kernel[2], x[3], *w.last().unwrap_or(&0)];
    if w.len() != 5 || w != expected_w {
        return Err(Error::shape("conv3d", &expected_w, w));
    }
    let c_out = w[4];
    if b != [c_out] {
        return Err(Error::shape("conv3d", &[c_out], b));
    }
    let input = [x[0], x[1], x[2]];
    Ok(ConvDims {
        input,
        output: g.output_dims(input)?,
        c_in: x[3],
        c_out,
    })
}

/// Channels-last 3D convolution. `weight` is laid out `kt x kh x kw x c_in x c_out`.
pub fn conv3d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), weight.shape(), bias.shape(), geom)?;
    let [ot, oh, ow] = d.output;
    let mut out = vec![T::zero(); ot * oh * ow * d.c_out];
    for_each_tap(&d, geom, |o_off, x_off, w_off| {
        let xs = &x.data()[x_off..x_off + d.c_in];
        let o = &mut out[o_off..o_off + d.c_out];
        for (ci, &xv) in xs.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &weight.data()[w_off + ci * d.c_out..w_off + (ci + 1) * d.c_out];
            for (acc, &wv) in o.iter_mut().zip(wrow) {
                *acc += xv * wv;
            }
        }
    });
    for o in out.chunks_exact_mut(d.c_out) {
        for (acc, &bv) in o.iter_mut().zip(bias.data()) {
            *acc += bv;
        }
    }
    Tensor::new(&[ot, oh, ow, d.c_out], out)
}

/// Visits every (output position, kernel tap) pair that lands inside the
/// input, passing flat offsets into output, input and weight buffers.
pub(crate) fn for_each_tap(d: &ConvDims, g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [it, ih, iw] = d.input;
    let [ot, oh, ow] = d.output;
    let [kt, kh, kw] = g.kernel;
    for t in 0..ot {
        for y in 0..oh {
            for x in 0..ow {
                let o_off = ((t * oh + y) * ow + x) * d.c_out;
                for a in 0..kt {
                    let ti = (t * g.stride[0] + a) as isize - g.padding[0] as isize;
                    if ti < 0 || ti >= it as isize {
                        continue;
                    }
                    for b in 0..kh {
                        let yi = (y * g.stride[1] + b) as isize - g.padding[1] as isize;
                        if yi < 0 || yi >= ih as isize {
                            continue;
                        }
                        for c in 0..kw {
                            let xi = (x * g.stride[2] + c) as isize - g.padding[2] as isize;
                            if xi < 0 || xi >= iw as isize {
                                continue;
                            }
                            let x_off = ((ti as usize * ih + yi as usize) * iw + xi as usize) * d.c_in;
                            let w_off = ((a * kh + b) * kw + c) * d.c_in * d.c_out;
                            f(o_off, x_off, w_off);
                        }
                    }
                }
            }
        }
    }
}

/// Mean over every leading dimension, keeping the last: `t x h x w x c -> c`.
pub fn mean_over_leading<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::shape("space_time_avg_pool", &[1], x.shape()));
    }
    let c = *x.shape().last().expect("rank >= 1");
    let n = x.numel() / c;
    let mut out = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let inv = T::of(1.0 / n as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(&[c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_follow_stride_formula() {
        let g = ConvGeometry {
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        };
        assert_eq!(g.output_dims([21, 90, 160]).unwrap(), [21, 45, 80]);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let g = ConvGeometry {
            kernel: [5, 1, 1],
            stride: [1, 1, 1],
            padding: [1, 0, 0],
        };
        assert!(g.output_dims([2, 4, 4]).is_err());
    }

    #[test]
    fn argmax_takes_first_of_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
    }
}
