use super::WdnError;
use crate::scalar::Scalar;

/// One elementwise RMSProp update:
/// `state ← decay·state + (1−decay)·g²`, `param ← param − lr·g/√(state+eps)`.
pub fn rmsprop_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut [T],
    lr: T,
    decay: T,
    eps: T,
) -> Result<(), WdnError> {
    if grads.len() != params.len() {
        return Err(WdnError::ShapeMismatch { expected: params.len(), got: grads.len() });
    }
    if state.len() != params.len() {
        return Err(WdnError::ShapeMismatch { expected: params.len(), got: state.len() });
    }
    let keep = T::one() - decay;
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *s = decay * *s + keep * g * g;
        *p -= lr * g / (*s + eps).sqrt();
    }
    Ok(())
}

/// Optimizer state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp<T> {
    pub lr: T,
    pub decay: T,
    pub eps: T,
    pub state: Vec<T>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(len: usize, lr: T, decay: T, eps: T) -> Self {
        Self { lr, decay, eps, state: vec![T::zero(); len] }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), WdnError> {
        rmsprop_step(params, grads, &mut self.state, self.lr, self.decay, self.eps)
    }
}
