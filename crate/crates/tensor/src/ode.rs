//! Fixed-step classical Runge–Kutta integration over tensors.
//!
//! The integrator is unrolled through the autodiff graph, so gradients of
//! the final state are exact for the discretized flow.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OdeState {
    pub state: Tensor,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl OdeState {
    pub fn new(state: Tensor, t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(TensorError::Contract("ODE step count must be at least 1".into()));
        }
        if !(t1 > t0) {
            return Err(TensorError::Contract(format!("ODE horizon [{t0}, {t1}] is empty")));
        }
        Ok(OdeState { state, t0, t1, steps })
    }
}

/// Integrates `dy/dt = f(t, y)` from `s.t0` to `s.t1` with `s.steps` RK4 steps.
pub fn ode_integrate<F>(f: F, s: &OdeState) -> Result<Tensor>
where
    F: Fn(f64, &Tensor) -> Result<Tensor>,
{
    if s.steps < 1 {
        return Err(TensorError::Contract("ODE step count must be at least 1".into()));
    }
    let h = (s.t1 - s.t0) / s.steps as f64;
    let mut y = s.state.clone();
    for step in 0..s.steps {
        let t = s.t0 + step as f64 * h;
        let k1 = f(t, &y)?;
        check_shape(&y, &k1)?;
        let k2 = f(t + 0.5 * h, &y.add(&k1.scale(0.5 * h))?)?;
        let k3 = f(t + 0.5 * h, &y.add(&k2.scale(0.5 * h))?)?;
        let k4 = f(t + h, &y.add(&k3.scale(h))?)?;
        let incr = k1.add(&k2.scale(2.0))?.add(&k3.scale(2.0))?.add(&k4)?;
        y = y.add(&incr.scale(h / 6.0))?;
        if !y.is_finite() {
            return Err(TensorError::Divergence { step: step + 1 });
        }
    }
    Ok(y)
}

fn check_shape(y: &Tensor, dy: &Tensor) -> Result<()> {
    if y.shape() != dy.shape() {
        return Err(TensorError::shape("ode_integrate", y.shape(), dy.shape()));
    }
    Ok(())
}
