use super::{expect_extent, expect_rank, Result, Scalar, Tensor, TensorError};

/// Winning window offset for every output element of a 2×2 max-pool,
/// encoded as `dy * 2 + dx`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_shape: Vec<usize>,
    offsets: Vec<u8>,
}

impl ArgmaxMap {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        pooled_shape(&self.input_shape)
    }

    /// Position `(dy, dx)` of the maximum inside the window of output
    /// element `index`.
    pub fn position(&self, index: usize) -> (usize, usize) {
        let o = self.offsets[index] as usize;
        (o / 2, o % 2)
    }

    /// Window offset (`dy * 2 + dx`) of every output element.
    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }
}

fn pooled_shape(s: &[usize]) -> Vec<usize> {
    vec![s[0], s[1], s[2] / 2, s[3] / 2]
}

fn check_input<T: Scalar>(op: &'static str, input: &Tensor<T>) -> Result<()> {
    expect_rank(op, input, 4)?;
    let s = input.shape();
    for (axis, extent) in [("height", s[2]), ("width", s[3])] {
        if extent < 2 {
            return Err(TensorError::Dimension {
                op,
                axis,
                expected: 2,
                found: extent,
            });
        }
    }
    Ok(())
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped. Ties go
/// to the first element in row-major window order.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgmaxMap)> {
    check_input("maxpool2x2_forward", input)?;
    let s = input.shape();
    let (h, w) = (s[2], s[3]);
    let out_shape = pooled_shape(s);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(&out_shape);
    let mut offsets = vec![0u8; out.len()];
    let src = input.data();
    for (plane, (dst, arg)) in out
        .data_mut()
        .chunks_mut(oh * ow)
        .zip(offsets.chunks_mut(oh * ow))
        .enumerate()
    {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let window = [src[top], src[top + 1], src[top + w], src[top + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if window[k] > window[best] {
                        best = k;
                    }
                }
                dst[oy * ow + ox] = window[best];
                arg[oy * ow + ox] = best as u8;
            }
        }
    }
    Ok((
        out,
        ArgmaxMap {
            input_shape: s.to_vec(),
            offsets,
        },
    ))
}

/// Routes each upstream gradient to the input position that won the forward
/// max.
pub fn maxpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &ArgmaxMap,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    const OP: &str = "maxpool2x2_backward";
    expect_rank(OP, grad_out, 4)?;
    if argmax.input_shape != input_shape {
        return Err(TensorError::Dimension {
            op: OP,
            axis: "argmax input",
            expected: input_shape.iter().product(),
            found: argmax.input_shape.iter().product(),
        });
    }
    let expected = argmax.output_shape();
    for (axis, (&e, &f)) in ["batch", "channels", "height", "width"]
        .into_iter()
        .zip(expected.iter().zip(grad_out.shape()))
    {
        expect_extent(OP, axis, e, f)?;
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (expected[2], expected[3]);
    let mut grad_in = Tensor::zeros(input_shape);
    let dst = grad_in.data_mut();
    for (plane, (g, arg)) in grad_out
        .data()
        .chunks(oh * ow)
        .zip(argmax.offsets.chunks(oh * ow))
        .enumerate()
    {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = arg[oy * ow + ox] as usize;
                let idx = base + (2 * oy + o / 2) * w + 2 * ox + o % 2;
                dst[idx] += g[oy * ow + ox];
            }
        }
    }
    Ok(grad_in)
}

/// 2×2 stride-2 average pooling with the same floor semantics as max-pool.
pub fn avgpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    check_input("avgpool2x2_forward", input)?;
    let s = input.shape();
    let (h, w) = (s[2], s[3]);
    let out_shape = pooled_shape(s);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros(&out_shape);
    let src = input.data();
    for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                dst[oy * ow + ox] =
                    (src[top] + src[top + 1] + src[top + w] + src[top + w + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    const OP: &str = "avgpool2x2_backward";
    expect_rank(OP, grad_out, 4)?;
    if input_shape.len() != 4 {
        return Err(TensorError::Rank {
            op: OP,
            expected: 4,
            found: input_shape.len(),
        });
    }
    let expected = pooled_shape(input_shape);
    for (axis, (&e, &f)) in ["batch", "channels", "height", "width"]
        .into_iter()
        .zip(expected.iter().zip(grad_out.shape()))
    {
        expect_extent(OP, axis, e, f)?;
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (expected[2], expected[3]);
    let quarter = T::from_f64_lossy(0.25);
    let mut grad_in = Tensor::zeros(input_shape);
    let dst = grad_in.data_mut();
    for (plane, g) in grad_out.data().chunks(oh * ow).enumerate() {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * quarter;
                let top = base + 2 * oy * w + 2 * ox;
                dst[top] += v;
                dst[top + 1] += v;
                dst[top + w] += v;
                dst[top + w + 1] += v;
            }
        }
    }
    Ok(grad_in)
}
