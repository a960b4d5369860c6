use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{expect_extent, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Keep pattern of one dropout application. Kept elements were scaled by
/// `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    scale: f64,
}

impl DropoutMask {
    pub fn all_keep(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            scale: 1.0,
        }
    }

    pub fn kept(&self) -> &[bool] {
        &self.keep
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Inverted dropout. Eval mode and `rate == 0` return the input unchanged.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::all_keep(input.len())));
    }
    let scale = 1.0 / (1.0 - rate);
    let s = T::from_f64_lossy(scale);
    let keep: Vec<bool> = (0..input.len()).map(|_| rng.gen::<f64>() >= rate).collect();
    let data = input
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v * s } else { T::zero() })
        .collect();
    Ok((
        Tensor::new(input.shape().to_vec(), data)?,
        DropoutMask { keep, scale },
    ))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &DropoutMask) -> Result<Tensor<T>> {
    expect_extent(
        "dropout_backward",
        "elements",
        mask.keep.len(),
        grad_out.len(),
    )?;
    let s = T::from_f64_lossy(mask.scale);
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&g, &k)| if k { g * s } else { T::zero() })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::from_fn(&[4, 5], |i| i as f32 - 3.0);
        for rate in [0.0, 0.25, 0.9] {
            let (y, _) = dropout(&x, rate, Mode::Eval, &mut rng).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn zero_rate_train_keeps_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::from_fn(&[10], |i| i as f32);
        let (y, mask) = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.kept().iter().all(|&k| k));
    }

    #[test]
    fn rate_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::zeros(&[3]);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn preserves_expected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = Tensor::<f32>::full(&[100_000], 1.0);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn same_seed_same_mask_and_backward_reuses_it() {
        let x = Tensor::<f64>::from_fn(&[64], |i| i as f64);
        let (y1, m1) = dropout(&x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (y2, m2) = dropout(&x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(m1, m2);
        let g = dropout_backward(&Tensor::full(&[64], 1.0), &m1).unwrap();
        for (gv, &k) in g.data().iter().zip(m1.kept()) {
            assert_eq!(*gv, if k { 1.0 / 0.7 } else { 0.0 });
        }
    }
}
