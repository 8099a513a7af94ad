//! Differentiable primitives. Every forward has a matching `*_backward` that
//! returns (or accumulates) the vector-Jacobian product.
//!
//! The tensor-level functions validate shapes and return [`Result`]. The
//! `*_into` / `*_acc` slice kernels underneath them are used by the model hot
//! path and only `debug_assert!` their extents.

use super::tensor::{dot, norm};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Guard added to the norm in [`squash`].
pub const SQUASH_EPS: f64 = 1e-8;

/// Extents of a valid (unpadded) 2-d cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.height * self.width
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.out_height() * self.out_width()
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if self.kernel == 0 || self.height < self.kernel || self.width < self.kernel {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {}x{} is smaller than kernel {}x{}",
                    self.height, self.width, self.kernel, self.kernel
                ),
            ));
        }
        Ok(())
    }
}

fn conv_geometry<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize) -> Result<ConvGeometry> {
    let &[c_in, height, width] = input.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [C,H,W], got {:?}", input.shape()),
        ));
    };
    let &[c_out, kc, kh, kw] = kernels.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernels must be [C_out,C_in,k,k], got {:?}", kernels.shape()),
        ));
    };
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("kernels expect {kc} input channels, input has {c_in}"),
        ));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
    }
    let geom = ConvGeometry {
        c_in,
        height,
        width,
        c_out,
        kernel: kh,
        stride,
    };
    geom.validate()?;
    Ok(geom)
}

/// Valid cross-correlation of `input` `[C_in,H,W]` with `kernels`
/// `[C_out,C_in,k,k]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernels, stride)?;
    let mut out = vec![T::zero(); g.output_len()];
    conv2d_into(&g, input.data(), kernels.data(), &mut out);
    Tensor::from_vec(&[g.c_out, g.out_height(), g.out_width()], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernels.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input, kernels, stride)?;
    if grad_out.shape() != [g.c_out, g.out_height(), g.out_width()] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out has shape {:?}", grad_out.shape()),
        ));
    }
    let mut gin = vec![T::zero(); g.input_len()];
    let mut gk = vec![T::zero(); g.kernel_len()];
    conv2d_input_grad_acc(&g, kernels.data(), grad_out.data(), &mut gin);
    conv2d_kernel_grad_acc(&g, input.data(), grad_out.data(), &mut gk);
    Ok((
        Tensor::from_vec(input.shape(), gin)?,
        Tensor::from_vec(kernels.shape(), gk)?,
    ))
}

/// Patch matrix `[positions, c_in * k * k]`; row `p` holds the receptive
/// field of output position `p` in kernel layout.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let plane = g.height * g.width;
    let j_len = g.c_in * k * k;
    let mut col = vec![T::zero(); oh * ow * j_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * j_len..(oy * ow + ox + 1) * j_len];
            for ci in 0..g.c_in {
                for ky in 0..k {
                    let src = ci * plane + (oy * s + ky) * g.width + ox * s;
                    let dst = (ci * k + ky) * k;
                    row[dst..dst + k].copy_from_slice(&input[src..src + k]);
                }
            }
        }
    }
    col
}

/// Overwrites `out` with the cross-correlation.
pub fn conv2d_into<T: Scalar>(g: &ConvGeometry, input: &[T], kernels: &[T], out: &mut [T]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(kernels.len(), g.kernel_len());
    debug_assert_eq!(out.len(), g.output_len());
    let positions = g.out_height() * g.out_width();
    let j_len = g.c_in * g.kernel * g.kernel;
    let col = im2col(g, input);
    for (co, w) in kernels.chunks_exact(j_len).enumerate() {
        for (p, patch) in col.chunks_exact(j_len).enumerate() {
            out[co * positions + p] = dot(w, patch);
        }
    }
}

/// `grad_kernels += d(out)/d(kernels)^T grad_out`.
pub fn conv2d_kernel_grad_acc<T: Scalar>(g: &ConvGeometry, input: &[T], grad_out: &[T], grad_kernels: &mut [T]) {
    let positions = g.out_height() * g.out_width();
    let j_len = g.c_in * g.kernel * g.kernel;
    let col = im2col(g, input);
    for (co, gw) in grad_kernels.chunks_exact_mut(j_len).enumerate() {
        for (p, patch) in col.chunks_exact(j_len).enumerate() {
            axpy(grad_out[co * positions + p], patch, gw);
        }
    }
}

/// `grad_input += d(out)/d(input)^T grad_out`.
pub fn conv2d_input_grad_acc<T: Scalar>(g: &ConvGeometry, kernels: &[T], grad_out: &[T], grad_input: &mut [T]) {
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let positions = oh * ow;
    let plane = g.height * g.width;
    let j_len = g.c_in * k * k;
    let mut gcol = vec![T::zero(); positions * j_len];
    for (co, w) in kernels.chunks_exact(j_len).enumerate() {
        for (p, gpatch) in gcol.chunks_exact_mut(j_len).enumerate() {
            axpy(grad_out[co * positions + p], w, gpatch);
        }
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &gcol[(oy * ow + ox) * j_len..(oy * ow + ox + 1) * j_len];
            for ci in 0..g.c_in {
                for ky in 0..k {
                    let dst = ci * plane + (oy * s + ky) * g.width + ox * s;
                    let src = (ci * k + ky) * k;
                    for (d, &v) in grad_input[dst..dst + k].iter_mut().zip(&row[src..src + k]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `y += a * x`; skipped when `a` is zero.
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    if a == T::zero() {
        return;
    }
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// `weight · input + bias` for `weight` `[m,n]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _) = linear_dims(input, weight, bias)?;
    let mut out = vec![T::zero(); m];
    linear_into(input.data(), weight.data(), bias.data(), &mut out);
    Ok(Tensor::vector(out))
}

/// Returns gradients for `(input, weight, bias)`.
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = linear_dims(input, weight, bias)?;
    if grad_out.len() != m {
        return Err(Error::shape(
            "linear_backward",
            format!("grad_out has {} values, expected {m}", grad_out.len()),
        ));
    }
    let mut gin = vec![T::zero(); n];
    let mut gw = vec![T::zero(); m * n];
    let mut gb = vec![T::zero(); m];
    linear_backward_acc(
        input.data(),
        weight.data(),
        grad_out.data(),
        Some(&mut gin),
        &mut gw,
        &mut gb,
    );
    Ok((
        Tensor::vector(gin),
        Tensor::from_vec(weight.shape(), gw)?,
        Tensor::vector(gb),
    ))
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let &[m, n] = weight.shape() else {
        return Err(Error::shape(
            "linear",
            format!("weight must be [m,n], got {:?}", weight.shape()),
        ));
    };
    if input.len() != n {
        return Err(Error::shape(
            "linear",
            format!("input has {} values, weight expects {n}", input.len()),
        ));
    }
    if bias.len() != m {
        return Err(Error::shape(
            "linear",
            format!("bias has {} values, weight produces {m}", bias.len()),
        ));
    }
    Ok((m, n))
}

pub fn linear_into<T: Scalar>(input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let n = input.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = bias[r] + dot(&weight[r * n..(r + 1) * n], input);
    }
}

pub fn linear_backward_acc<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let n = input.len();
    for (r, &go) in grad_out.iter().enumerate() {
        grad_bias[r] += go;
        if go == T::zero() {
            continue;
        }
        for (gw, &x) in grad_weight[r * n..(r + 1) * n].iter_mut().zip(input) {
            *gw += go * x;
        }
    }
    if let Some(gin) = grad_input {
        for (r, &go) in grad_out.iter().enumerate() {
            if go == T::zero() {
                continue;
            }
            for (gi, &w) in gin.iter_mut().zip(&weight[r * n..(r + 1) * n]) {
                *gi += go * w;
            }
        }
    }
}

/// Capsule nonlinearity `(|v|^2 / (1 + |v|^2)) * v / (|v| + eps)`.
pub fn squash<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let mut out = v.clone();
    out.clear_grad();
    squash_into(v.data(), out.data_mut());
    out
}

pub fn squash_backward<T: Scalar>(v: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if v.shape() != grad_out.shape() {
        return Err(Error::shape(
            "squash_backward",
            format!("{:?} vs {:?}", v.shape(), grad_out.shape()),
        ));
    }
    let mut g = vec![T::zero(); v.len()];
    squash_backward_acc(v.data(), grad_out.data(), &mut g);
    Tensor::from_vec(v.shape(), g)
}

#[inline]
fn squash_factor<T: Scalar>(n: T) -> T {
    let q = n * n;
    q / ((T::one() + q) * (n + T::of(SQUASH_EPS)))
}

pub fn squash_into<T: Scalar>(v: &[T], out: &mut [T]) {
    let f = squash_factor(norm(v));
    for (o, &x) in out.iter_mut().zip(v) {
        *o = f * x;
    }
}

pub fn squash_backward_acc<T: Scalar>(v: &[T], grad_out: &[T], grad_v: &mut [T]) {
    let n = norm(v);
    let f = squash_factor(n);
    // d f / d n, divided by n so that d f / d v_j = coef * v_j
    let coef = if n > T::zero() {
        let eps = T::of(SQUASH_EPS);
        let one = T::one();
        let q = n * n;
        let h = (one + q) * (n + eps);
        let dh = T::of(2.0) * n * (n + eps) + (one + q);
        let df = (T::of(2.0) * n * h - q * dh) / (h * h);
        df / n
    } else {
        T::zero()
    };
    let vg = dot(v, grad_out);
    for ((g, &x), &go) in grad_v.iter_mut().zip(v).zip(grad_out) {
        *g += f * go + coef * vg * x;
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(logits.shape(), axis)?;
    let mut out = logits.clone();
    out.clear_grad();
    let src = logits.data();
    let dst = out.data_mut();
    let mut buf = vec![T::zero(); n];
    let mut res = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = src[(o * n + j) * inner + i];
            }
            softmax_into(&buf, &mut res);
            for (j, &r) in res.iter().enumerate() {
                dst[(o * n + j) * inner + i] = r;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`softmax`] with respect to its logits, given its output.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if probs.shape() != grad_out.shape() {
        return Err(Error::shape(
            "softmax_backward",
            format!("{:?} vs {:?}", probs.shape(), grad_out.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(probs.shape(), axis)?;
    let mut g = Tensor::zeros(probs.shape());
    let (p, go) = (probs.data(), grad_out.data());
    let dst = g.data_mut();
    let mut pb = vec![T::zero(); n];
    let mut gb = vec![T::zero(); n];
    let mut rb = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                let idx = (o * n + j) * inner + i;
                pb[j] = p[idx];
                gb[j] = go[idx];
            }
            rb.fill(T::zero());
            softmax_backward_acc(&pb, &gb, &mut rb);
            for (j, &r) in rb.iter().enumerate() {
                dst[(o * n + j) * inner + i] = r;
            }
        }
    }
    Ok(g)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_backward_acc<T: Scalar>(probs: &[T], grad_out: &[T], grad_logits: &mut [T]) {
    let pg = dot(probs, grad_out);
    for ((g, &p), &go) in grad_logits.iter_mut().zip(probs).zip(grad_out) {
        *g += p * (go - pg);
    }
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn naive_conv(input: &Tensor<f64>, kernels: &Tensor<f64>, stride: usize) -> Vec<f64> {
        let [c_in, h, w] = input.shape().try_into().unwrap();
        let [c_out, _, k, _] = kernels.shape().try_into().unwrap();
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += input.data()[(ci * h + oy * stride + ky) * w + ox * stride + kx]
                                    * kernels.data()[((co * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::<f32>::from_vec(&[1, 3, 3], (0..9).map(|x| x as f32).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let out = conv2d(&input, &k, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_all_ones_sums_nine() {
        let input = Tensor::<f32>::full(&[1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &k, 1).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[9.0; 4]);
    }

    #[test]
    fn conv_stem_shape() {
        let input = Tensor::<f32>::zeros(&[1, 32, 32]);
        let k = Tensor::zeros(&[256, 1, 9, 9]);
        assert_eq!(conv2d(&input, &k, 1).unwrap().shape(), &[256, 24, 24]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(c_in, hw, c_out, k, s) in &[(2, 7, 3, 3, 1), (3, 9, 2, 3, 2), (1, 8, 4, 5, 3)] {
            let input = Tensor::<f64>::uniform(&[c_in, hw, hw], -1.0, 1.0, &mut rng);
            let kernels = Tensor::<f64>::uniform(&[c_out, c_in, k, k], -1.0, 1.0, &mut rng);
            let out = conv2d(&input, &kernels, s).unwrap();
            for (a, b) in out.data().iter().zip(naive_conv(&input, &kernels, s)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = Tensor::<f32>::zeros(&[2, 4, 4]);
        assert!(conv2d(&input, &Tensor::zeros(&[1, 1, 3, 3]), 1).is_err());
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 5, 5]), 1).is_err());
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 3, 3]), 0).is_err());
        assert!(conv2d::<f32>(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[1, 1, 3, 3]), 1).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::<f32>::vector(vec![2.0, 3.0]);
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[5.0, -1.0]);

        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &eye, &b).unwrap().data(), x.data());

        let bias = Tensor::vector(vec![0.5, -4.0]);
        assert_eq!(linear(&x, &Tensor::zeros(&[2, 2]), &bias).unwrap().data(), bias.data());
        assert!(linear(&Tensor::vector(vec![1.0f32; 3]), &w, &b).is_err());
    }

    #[test]
    fn squash_examples() {
        let z = squash(&Tensor::<f32>::zeros(&[16]));
        assert!(z.data().iter().all(|&x| x == 0.0));

        let u = squash(&Tensor::<f32>::vector(vec![1.0, 0.0]));
        assert_abs_diff_eq!(u.data()[0], 0.5, epsilon = 1e-6);
        assert_eq!(u.data()[1], 0.0);

        let v = squash(&Tensor::<f64>::vector(vec![6.0, 8.0]));
        assert_abs_diff_eq!(v.norm(), 100.0 / 101.0, epsilon = 1e-7);
        assert_abs_diff_eq!(v.data()[0] / v.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::<f64>::vector(vec![0.0, 3f64.ln()]), 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);

        let u = softmax(&Tensor::<f32>::full(&[4], 7.0), 0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));

        let one = softmax(&Tensor::<f32>::vector(vec![-3.0]), 0).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
        let r = softmax(&t, 1).unwrap();
        assert_abs_diff_eq!(r.data()[..3].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(softmax(&t, 2).is_err());
    }
}
