//! Central finite-difference gradient checking for scalar-valued graphs.

use crate::error::Result;
use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

impl GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub fn relative_error(&self) -> f64 {
        let diff = self.analytic.zip_map(&self.numeric, |a, b| a - b).norm();
        let scale = self.analytic.norm().max(self.numeric.norm());
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    pub fn max_abs_error(&self) -> f64 {
        self.analytic.max_abs_diff(&self.numeric)
    }
}

/// Compares analytic gradients of `f` against central differences with
/// the given step, for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = f(&leaves)?;
    let grads = out.backward()?;
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let consts: Vec<Var<f64>> = values.iter().cloned().map(Var::constant).collect();
        Ok(f(&consts)?.value().data()[0])
    };
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        let mut numeric = Tensor::zeros(leaf.shape());
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        reports.push(GradCheck { analytic, numeric });
    }
    Ok(reports)
}
