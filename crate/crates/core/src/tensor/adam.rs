use std::collections::BTreeMap;

use super::{ParamStore, Real, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(format!("learning rate must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    /// One bias-corrected Adam update of `param` in place.
    ///
    /// An all-zero gradient leaves both the parameter and the state untouched.
    pub fn step(&mut self, cfg: &AdamConfig, param: &mut [T], grad: &[T]) -> Result<()> {
        if param.len() != grad.len() || param.len() != self.m.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!("param {}, grad {}, state {}", param.len(), grad.len(), self.m.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGradient("<unnamed>".into()));
        }
        if grad.iter().all(|g| g.is_zero()) {
            return Ok(());
        }
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::of(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - cfg.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.epsilon));
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam over a whole [`ParamStore`], one state per parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, states: BTreeMap::new() }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<T>> {
        self.states.get(name)
    }

    /// Applies the stored gradients and clears them. Parameters without a
    /// gradient are skipped. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient(name.to_string()));
                }
            }
        }
        for (name, t) in params.iter_mut() {
            let Some(grad) = t.grad().map(<[T]>::to_vec) else { continue };
            let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState::new(grad.len()));
            state.step(&self.config, t.data_mut(), &grad)?;
            t.zero_grad();
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::of(max_norm / norm);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }
    norm
}
