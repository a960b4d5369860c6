use serde::{Deserialize, Serialize};

use super::{config_error, Result};

/// Mean squared error `(1/n) Σ (y_i − ŷ_i)²` and its gradient with respect
/// to each prediction, `−2 (y_i − ŷ_i) / n`.
pub fn mse_loss(actual: &[f64], predicted: &[f64]) -> Result<(f64, Vec<f64>)> {
    if actual.is_empty() {
        return Err(config_error(None, "mse_loss needs at least one sample"));
    }
    if actual.len() != predicted.len() {
        return Err(config_error(
            None,
            format!(
                "mse_loss length mismatch: {} actual vs {} predicted",
                actual.len(),
                predicted.len()
            ),
        ));
    }
    let n = actual.len() as f64;
    let mut loss = 0.0;
    let grad = actual
        .iter()
        .zip(predicted)
        .map(|(y, p)| {
            let r = y - p;
            loss += r * r;
            -2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Actual/predicted pairs and their mean squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub mse: f64,
}

impl EvalReport {
    pub fn from_pairs(actual: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        let (mse, _) = mse_loss(&actual, &predicted)?;
        Ok(Self {
            n: actual.len(),
            actual,
            predicted,
            mse,
        })
    }

    /// Two-column table in the layout of a printed results table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("actual\tpredicted\n");
        for (a, p) in self.actual.iter().zip(&self.predicted) {
            out.push_str(&format!("{a:.3}\t{p:.3}\n"));
        }
        out.push_str(&format!("MSE\t{:.3}\n", self.mse));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn identical_is_zero() {
        let y = [0.1, -0.2, 0.3];
        assert_eq!(mse_loss(&y, &y).unwrap().0, 0.0);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn hand_value() {
        let (l, g) = mse_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(g, vec![-1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            pairs in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..20)
        ) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (_, g) = mse_loss(&y, &p).unwrap();
            let point = Tensor::new(vec![p.len()], p).unwrap();
            let cfg = GradCheck { tolerance: 1e-6, ..GradCheck::default() };
            let r = check_gradient(&point, &g, |q| mse_loss(&y, q.data()).unwrap().0, &cfg);
            prop_assert!(r.passed(), "{:?}", r);
        }

        #[test]
        fn zero_iff_equal(y in proptest::collection::vec(-1.0f64..1.0, 1..10), k in 0usize..10, d in 0.001f64..1.0) {
            let mut p = y.clone();
            let k = k % p.len();
            p[k] += d;
            prop_assert!(mse_loss(&y, &p).unwrap().0 > 0.0);
        }
    }
}
