use super::{expect_extent, Result, Scalar, Tensor};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where the cached input is strictly positive.
pub fn relu_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_extent(
        "relu_backward",
        "elements",
        cached_input.len(),
        grad_out.len(),
    )?;
    let data = grad_out
        .data()
        .iter()
        .zip(cached_input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

/// ELU with unit scale: `x` for positive inputs, `exp(x) - 1` otherwise.
pub fn elu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { v.exp_m1() })
}

pub fn elu_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_extent(
        "elu_backward",
        "elements",
        cached_input.len(),
        grad_out.len(),
    )?;
    let data = grad_out
        .data()
        .iter()
        .zip(cached_input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { g * x.exp() })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-0.3f32, 0.7, 0.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.7, 0.0]);
    }

    #[test]
    fn relu_blocks_negative_and_zero() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let g = Tensor::full(&[3], 5.0f32);
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn elu_negative_branch() {
        let x = Tensor::new(vec![2], vec![-1.0f64, 2.0]).unwrap();
        let y = elu_forward(&x);
        assert!((y.data()[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(y.data()[1], 2.0);
    }

    #[test]
    fn activations_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Keep samples at least 0.01 away from the kink at zero.
            let x = Tensor::<f64>::from_fn(&[2, 9], |_| {
                let m = rng.gen_range(0.01..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            let r = Tensor::<f64>::from_fn(&[2, 9], |_| rng.gen_range(-1.0..1.0));
            let dot = |y: &Tensor<f64>| {
                y.data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let g = relu_backward(&r, &x).unwrap();
            check_gradient(
                &x,
                g.data(),
                |p| dot(&relu_forward(p)),
                &GradCheck::default(),
            )
            .assert_ok("relu");
            let g = elu_backward(&r, &x).unwrap();
            check_gradient(
                &x,
                g.data(),
                |p| dot(&elu_forward(p)),
                &GradCheck::default(),
            )
            .assert_ok("elu");
        }
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(values in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let x = Tensor::new(vec![values.len()], values).unwrap();
            let once = relu_forward(&x);
            prop_assert_eq!(relu_forward(&once), once);
        }
    }
}
