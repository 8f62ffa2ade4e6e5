use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative-region slope shared by every leaky ReLU in the backbone.
pub const LEAKY_SLOPE: f32 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
        .collect();
    Tensor::from_parts(x.shape_obj().clone(), data)
}

/// Derivative is 1 for `x >= 0`; the point `x == 0` takes the positive branch.
pub fn leaky_relu_backward(grad: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad.shape() != input.shape() {
        return Err(Error::mismatch("leaky_relu_backward", input.shape(), grad.shape()));
    }
    let data = grad
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x >= 0.0 { g } else { LEAKY_SLOPE * g })
        .collect();
    Ok(Tensor::from_parts(grad.shape_obj().clone(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values() {
        let x = Tensor::from_vec(&[3], vec![5.0, -10.0, 0.0]).unwrap();
        assert_eq!(leaky_relu(&x).data(), &[5.0, -2.0, 0.0]);
    }

    #[test]
    fn backward_at_zero_uses_positive_branch() {
        let x = Tensor::from_vec(&[3], vec![0.0, -1.0, 2.0]).unwrap();
        let g = Tensor::full(&[3], 3.0).unwrap();
        let d = leaky_relu_backward(&g, &x).unwrap();
        assert_eq!(d.data()[0], 3.0);
        assert!((d.data()[1] - 0.6).abs() < 1e-7);
        assert_eq!(d.data()[2], 3.0);
    }
}
