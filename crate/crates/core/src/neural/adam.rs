use super::{NeuralError, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2.5e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar = f32> {
    pub step: u64,
    pub config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Self { step: 0, config, m: zeros(), v: zeros() }
    }

    pub fn first_moment(&self, param: usize) -> &[S] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[S] {
        &self.v[param]
    }
}

/// One bias-corrected Adam update. A `None` gradient leaves that parameter and
/// its moments untouched. Nothing is modified when any gradient is non-finite.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &[Option<&[S]>],
    state: &mut AdamState<S>,
) -> Result<(), NeuralError> {
    let cfg = state.config;
    if !(cfg.lr > 0.0) {
        return Err(NeuralError::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NeuralError::Shape {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), state.m.len()),
        });
    }
    for (i, (g, (_, p))) in grads.iter().zip(params.iter()).enumerate() {
        if let Some(g) = g {
            if g.len() != p.numel() {
                return Err(NeuralError::Shape { op: "adam_step", detail: format!("gradient {i} length") });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFiniteGradient { param: i });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (S::from_f64c(cfg.beta1), S::from_f64c(cfg.beta2));
    let (one_b1, one_b2) = (S::from_f64c(1.0 - cfg.beta1), S::from_f64c(1.0 - cfg.beta2));
    let (lr, bc1, bc2) = (S::from_f64c(cfg.lr), S::from_f64c(bc1), S::from_f64c(bc2));
    let eps = S::from_f64c(cfg.eps);
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let Some(g) = grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
