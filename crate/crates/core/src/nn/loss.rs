use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Squared reconstruction error summed over features and averaged over the
/// leading (batch) axis.
///
/// Returns the loss and its gradient with respect to `x_rec`,
/// `2 (x_rec - x) / n`.
pub fn mse_loss(x: &Tensor, x_rec: &Tensor) -> Result<(f64, Tensor)> {
    if x.shape() != x_rec.shape() {
        return Err(Error::ShapeMismatch {
            layer: "mse_loss",
            expected: x.shape().to_vec(),
            got: x_rec.shape().to_vec(),
        });
    }
    let n = x.rows() as f64;
    let mut grad = x_rec.clone();
    let mut sum = 0.0;
    for (g, &t) in grad.data_mut().iter_mut().zip(x.data()) {
        let diff = *g - t;
        sum += diff * diff;
        *g = 2.0 * diff / n;
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_cost_nothing() {
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (l, g) = mse_loss(&x, &x).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_four_five() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let r = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let (l, g) = mse_loss(&x, &r).unwrap();
        assert_eq!(l, 25.0);
        assert_eq!(g.data(), &[6.0, 8.0]);
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor::zeros(&[1, 2]);
        let r = Tensor::zeros(&[2, 1]);
        assert!(mse_loss(&x, &r).is_err());
    }
}
