use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{expect_extent, expect_rank, strides, Result, Scalar, Tensor, TensorError};

/// Valid (unpadded) 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
        {
            return Err(TensorError::Config(format!(
                "convolution extents and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((in - kernel) / stride) + 1`, or an error when the kernel does
    /// not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if h < self.kernel_h {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "height",
                expected: self.kernel_h,
                found: h,
            });
        }
        if w < self.kernel_w {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "width",
                expected: self.kernel_w,
                found: w,
            });
        }
        Ok((
            (h - self.kernel_h) / self.stride + 1,
            (w - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w + self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
}

fn geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    expect_rank(op, input, 4)?;
    expect_rank(op, weights, 4)?;
    let s = input.shape();
    expect_extent(op, "input channels", spec.in_channels, s[1])?;
    let ws = spec.weight_shape();
    for (axis, (&e, &f)) in [
        "out channels",
        "in channels",
        "kernel height",
        "kernel width",
    ]
    .into_iter()
    .zip(ws.iter().zip(weights.shape()))
    {
        expect_extent(op, axis, e, f)?;
    }
    let (out_h, out_w) = spec.output_hw(s[2], s[3])?;
    Ok(Geometry {
        n: s[0],
        h: s[2],
        w: s[3],
        out_h,
        out_w,
    })
}

/// Unfolds one sample `[C,H,W]` into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col<T: Scalar>(sample: &[T], g: &Geometry, spec: &ConvSpec, col: &mut [T]) {
    let p = g.out_h * g.out_w;
    let mut row = 0;
    for c in 0..spec.in_channels {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let src_row = &plane[(oy * spec.stride + ki) * g.w..];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if spec.stride == 1 {
                        dst_row.copy_from_slice(&src_row[kj..kj + g.out_w]);
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            *d = src_row[ox * spec.stride + kj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, spec: &ConvSpec, sample: &mut [T]) {
    let p = g.out_h * g.out_w;
    let mut row = 0;
    for c in 0..spec.in_channels {
        let plane = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let base = (oy * spec.stride + ki) * g.w + kj;
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        plane[base + ox * spec.stride] += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid cross-correlation of `input[N,Cin,H,W]` with `weights[Cout,Cin,kh,kw]`
/// plus a per-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry("conv2d_forward", input, weights, spec)?;
    expect_rank("conv2d_forward", bias, 1)?;
    expect_extent("conv2d_forward", "bias", spec.out_channels, bias.len())?;

    let p = g.out_h * g.out_w;
    let k = spec.patch_len();
    let in_len = spec.in_channels * g.h * g.w;
    let out_len = spec.out_channels * p;
    let mut out = Tensor::zeros(&[g.n, spec.out_channels, g.out_h, g.out_w]);
    out.data_mut()
        .par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(
            || vec![T::zero(); k * p],
            |col, (dst, src)| {
                im2col(src, &g, spec, col);
                for (c, plane) in dst.chunks_mut(p).enumerate() {
                    plane.fill(bias.data()[c]);
                }
                T::gemm(
                    spec.out_channels,
                    k,
                    p,
                    weights.data(),
                    strides(spec.out_channels, k, false),
                    col,
                    strides(k, p, false),
                    T::one(),
                    dst,
                );
            },
        );
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    conv2d_backward_impl(grad_out, cached_input, weights, spec, true)
}

/// As [`conv2d_backward`]; when `need_input` is false the input gradient is
/// returned as zeros without being computed.
pub(crate) fn conv2d_backward_impl<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    let g = geometry(OP, cached_input, weights, spec)?;
    expect_rank(OP, grad_out, 4)?;
    let gs = grad_out.shape();
    expect_extent(OP, "batch", g.n, gs[0])?;
    expect_extent(OP, "out channels", spec.out_channels, gs[1])?;
    expect_extent(OP, "out height", g.out_h, gs[2])?;
    expect_extent(OP, "out width", g.out_w, gs[3])?;

    let p = g.out_h * g.out_w;
    let k = spec.patch_len();
    let in_len = spec.in_channels * g.h * g.w;
    let out_len = spec.out_channels * p;

    let mut grad_input = Tensor::zeros(cached_input.shape());
    if need_input {
        grad_input
            .data_mut()
            .par_chunks_mut(in_len)
            .zip(grad_out.data().par_chunks(out_len))
            .for_each_init(
                || vec![T::zero(); k * p],
                |gcol, (dst, gout)| {
                    // gcol = Wᵀ · gout
                    T::gemm(
                        k,
                        spec.out_channels,
                        p,
                        weights.data(),
                        strides(k, spec.out_channels, true),
                        gout,
                        strides(spec.out_channels, p, false),
                        T::zero(),
                        gcol,
                    );
                    col2im(gcol, &g, spec, dst);
                },
            );
    }

    // Weight gradients are accumulated in sample order so the result does
    // not depend on the worker count.
    let mut grad_w = Tensor::zeros(&spec.weight_shape());
    let mut col = vec![T::zero(); k * p];
    for (src, gout) in cached_input
        .data()
        .chunks(in_len)
        .zip(grad_out.data().chunks(out_len))
    {
        im2col(src, &g, spec, &mut col);
        T::gemm(
            spec.out_channels,
            p,
            k,
            gout,
            strides(spec.out_channels, p, false),
            &col,
            strides(p, k, true),
            T::one(),
            grad_w.data_mut(),
        );
    }

    let mut grad_b = Tensor::zeros(&[spec.out_channels]);
    for gout in grad_out.data().chunks(out_len) {
        for (b, plane) in grad_b.data_mut().iter_mut().zip(gout.chunks(p)) {
            *b += plane.iter().copied().sum::<T>();
        }
    }

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Six nested loops over (n, co, oy, ox, ci, ki, kj); no unfolding.
    fn direct_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
    ) -> Tensor<f64> {
        let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [cout, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let xv = x.data()[((ni * cin + ci) * h + oy * stride + ki)
                                        * wd
                                        + ox * stride
                                        + kj];
                                    let wv = w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, oh, ow], out).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn hand_computed_two_by_two() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[1], &[0.0]);
        let out = conv2d_forward(&x, &w, &b, &ConvSpec::new(1, 1, 2, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec::new(3, 4, 3, 1);
        let x = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let w = random(&mut rng, &spec.weight_shape());
        let b = t(&[4], &[0.5, -1.0, 2.0, 0.0]);
        let out = conv2d_forward(&x, &w, &b, &spec).unwrap();
        for (c, plane) in out.data().chunks(36).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn matches_direct_oracle_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let n = rng.gen_range(1..=2);
            let cin = rng.gen_range(1..=4);
            let cout = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=5);
            let stride = rng.gen_range(1..=2);
            let h = rng.gen_range(k..=9);
            let w = rng.gen_range(k..=9);
            let spec = ConvSpec::new(cin, cout, k, stride);
            let x = random(&mut rng, &[n, cin, h, w]);
            let wt = random(&mut rng, &spec.weight_shape());
            let b = random(&mut rng, &[cout]);
            let fast = conv2d_forward(&x.cast::<f32>(), &wt.cast(), &b.cast(), &spec).unwrap();
            let slow = direct_conv(&x, &wt, &b, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((*a as f64 - e).abs() <= 1e-5, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        let spec = ConvSpec::new(3, 1, 3, 1);
        let w = Tensor::zeros(&spec.weight_shape());
        let b = Tensor::zeros(&[1]);
        let err = conv2d_forward(&x, &w, &b, &spec).unwrap_err();
        assert!(matches!(
            err,
            TensorError::Dimension {
                axis: "input channels",
                ..
            }
        ));
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let spec = ConvSpec::new(1, 1, 5, 1);
        assert!(spec.output_hw(4, 10).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new(2, 3, 3, 1);
        let x = random(&mut rng, &[2, 2, 6, 6]);
        let w = random(&mut rng, &spec.weight_shape());
        let g = Tensor::zeros(&[2, 3, 4, 4]);
        let grads = conv2d_backward(&g, &x, &w, &spec).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_product_rule() {
        let (x, w, g) = (1.5, -0.75, 2.0);
        let spec = ConvSpec::new(1, 1, 1, 1);
        let grads = conv2d_backward(
            &t(&[1, 1, 1, 1], &[g]),
            &t(&[1, 1, 1, 1], &[x]),
            &t(&[1, 1, 1, 1], &[w]),
            &spec,
        )
        .unwrap();
        assert_eq!(grads.input.data(), &[w * g]);
        assert_eq!(grads.weights.data(), &[x * g]);
        assert_eq!(grads.bias.data(), &[g]);
    }

    #[test]
    fn stale_gradient_shape_is_rejected() {
        let spec = ConvSpec::new(1, 2, 3, 1);
        let x = Tensor::<f32>::zeros(&[1, 1, 6, 6]);
        let w = Tensor::zeros(&spec.weight_shape());
        let g = Tensor::zeros(&[1, 2, 3, 4]);
        assert!(conv2d_backward(&g, &x, &w, &spec).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let stride = 1 + (seed as usize % 2);
            let spec = ConvSpec::new(2, 3, 3, stride);
            let x = random(&mut rng, &[1, 2, 6, 6]);
            let w = random(&mut rng, &spec.weight_shape());
            let b = random(&mut rng, &[3]);
            let (oh, ow) = spec.output_hw(6, 6).unwrap();
            let r = random(&mut rng, &[1, 3, oh, ow]);
            let grads = conv2d_backward(&r, &x, &w, &spec).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = conv2d_forward(x, w, b, &spec).unwrap();
                y.data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let cfg = GradCheck::default();
            check_gradient(&x, grads.input.data(), |p| loss(p, &w, &b), &cfg).assert_ok("input");
            check_gradient(&w, grads.weights.data(), |p| loss(&x, p, &b), &cfg)
                .assert_ok("weights");
            check_gradient(&b, grads.bias.data(), |p| loss(&x, &w, p), &cfg).assert_ok("bias");
        }
    }
}
