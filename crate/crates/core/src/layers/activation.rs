use super::{missing_cache, Layer, Mode};
use crate::error::Result;
use crate::tensor::Tensor4;

/// `max(x, 0)` elementwise.
pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// ReLU with subgradient 0 at exactly 0.
#[derive(Default)]
pub struct Relu {
    input: Option<Tensor4>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        self.input = Some(x.clone());
        Ok(relu_forward(x))
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Some(x) = &self.input else {
            return missing_cache("relu");
        };
        x.check_same_dims(grad_out)?;
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect();
        Tensor4::new(x.dims(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor4::new([1, 2, 1, 1], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn dead_units_pass_no_gradient() {
        let x = Tensor4::new([1, 1, 2, 2], vec![-1.0, -0.5, -3.0, 0.0]).unwrap();
        let mut relu = Relu::new();
        let y = relu.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let g = relu.backward(&Tensor4::full([1, 1, 2, 2], 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_input_is_identity() {
        let x = Tensor4::new([1, 1, 1, 3], vec![0.1, 2.0, 5.0]).unwrap();
        let mut relu = Relu::new();
        assert_eq!(relu.forward(&x, Mode::Train).unwrap(), x);
        let g = Tensor4::new([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(relu.backward(&g).unwrap(), g);
    }
}
