use prfusion_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type ParamVisitor<'a> = dyn FnMut(&str, &Tensor) + 'a;

/// Anything owning named learnable tensors.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.trim_start_matches('.').to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

/// Learnable `rows × cols` matrix with i.i.d. `N(0, std²)` entries.
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::param(data, &[rows, cols])?)
}

pub fn zero_vector(n: usize) -> Result<Tensor> {
    Ok(Tensor::param(vec![0.0; n], &[n])?)
}
