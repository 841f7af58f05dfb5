use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{Param, Parameters};

/// Affine map `y = x W + b` over row-major batches, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let std = (2.0 / (input + output) as f32).sqrt();
        Self {
            weight: Param::normal(format!("{name}.weight"), &[input, output], std, rng),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[output], false)),
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), &[input, output], true),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[output], false)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.view2());
        if let Some(bias) = &self.bias {
            let b = ArrayView2::from_shape((1, bias.numel()), &bias.value).expect("bias shape");
            y += &b;
        }
        y
    }

    /// Accumulates parameter gradients for input `x` and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f32>, grad: &Array2<f32>) -> Array2<f32> {
        let dw = x.t().dot(grad);
        self.weight
            .grad
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(acc, d)| *acc += d);
        if let Some(bias) = &mut self.bias {
            let db = grad.sum_axis(Axis(0));
            bias.grad.iter_mut().zip(db.iter()).for_each(|(acc, d)| *acc += d);
        }
        grad.dot(&self.weight.view2().t())
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.weight];
        out.extend(self.bias.as_ref());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.weight];
        out.extend(self.bias.as_mut());
        out
    }
}
