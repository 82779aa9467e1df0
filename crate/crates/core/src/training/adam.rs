use crate::autodiff::ParamSet;
use crate::error::Result;

/// Bias-corrected Adam moments for every slot of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: ParamSet,
    pub second: ParamSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam ascent step on `params` along `grads`.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.first)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let slots = params.iter_mut().zip(grads.iter()).zip(state.first.iter_mut().zip(state.second.iter_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in slots {
        for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}
