use super::{expect_extent, expect_rank, strides, Result, Scalar, Tensor};

pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `input[N,F] · weights[F,G] + bias[G]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "linear_forward";
    expect_rank(OP, input, 2)?;
    expect_rank(OP, weights, 2)?;
    expect_rank(OP, bias, 1)?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    expect_extent(OP, "features", weights.shape()[0], f)?;
    let g = weights.shape()[1];
    expect_extent(OP, "bias", g, bias.len())?;

    let mut out = Tensor::zeros(&[n, g]);
    for row in out.data_mut().chunks_mut(g) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        f,
        g,
        input.data(),
        strides(n, f, false),
        weights.data(),
        strides(f, g, false),
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    const OP: &str = "linear_backward";
    expect_rank(OP, grad_out, 2)?;
    expect_rank(OP, cached_input, 2)?;
    expect_rank(OP, weights, 2)?;
    let (n, f) = (cached_input.shape()[0], cached_input.shape()[1]);
    expect_extent(OP, "features", weights.shape()[0], f)?;
    let g = weights.shape()[1];
    expect_extent(OP, "batch", n, grad_out.shape()[0])?;
    expect_extent(OP, "outputs", g, grad_out.shape()[1])?;

    let mut grad_in = Tensor::zeros(&[n, f]);
    T::gemm(
        n,
        g,
        f,
        grad_out.data(),
        strides(n, g, false),
        weights.data(),
        strides(g, f, true),
        T::zero(),
        grad_in.data_mut(),
    );
    let mut grad_w = Tensor::zeros(&[f, g]);
    T::gemm(
        f,
        n,
        g,
        cached_input.data(),
        strides(f, n, true),
        grad_out.data(),
        strides(n, g, false),
        T::zero(),
        grad_w.data_mut(),
    );
    let mut grad_b = Tensor::zeros(&[g]);
    for row in grad_out.data().chunks(g) {
        for (b, &v) in grad_b.data_mut().iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok(LinearGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use crate::tensor::TensorError;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let x = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = linear_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_sum() {
        let x = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[3.5]);
    }

    #[test]
    fn inner_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 1]);
        let err = linear_forward(&x, &w, &Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(
            err,
            TensorError::Dimension {
                axis: "features",
                ..
            }
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand = |s: &[usize]| Tensor::<f64>::from_fn(s, |_| rng.gen_range(-1.0..1.0));
            let x = rand(&[3, 5]);
            let w = rand(&[5, 4]);
            let b = rand(&[4]);
            let r = rand(&[3, 4]);
            let g = linear_backward(&r, &x, &w).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = linear_forward(x, w, b).unwrap();
                y.data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let cfg = GradCheck::default();
            check_gradient(&x, g.input.data(), |p| loss(p, &w, &b), &cfg).assert_ok("input");
            check_gradient(&w, g.weights.data(), |p| loss(&x, p, &b), &cfg).assert_ok("weights");
            check_gradient(&b, g.bias.data(), |p| loss(&x, &w, p), &cfg).assert_ok("bias");
        }
    }
}
