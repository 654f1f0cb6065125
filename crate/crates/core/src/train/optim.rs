use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Cosine annealing from `lr0` at `t = 0` down to zero at `t = horizon`.
pub fn cosine_lr(lr0: f64, t: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return lr0;
    }
    let frac = t.min(horizon) as f64 / horizon as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// First and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(format!("no gradient for `{name}`")))?;
        let m = state.m.get_mut(name)?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::dim(format!(
                "`{name}`: parameter {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
        let m = m.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i].f64();
            let mi = BETA1 * m[i].f64() + (1.0 - BETA1) * gi;
            let vi = BETA2 * v[i].f64() + (1.0 - BETA2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = (mi / bc1) / ((vi / bc2).sqrt() + EPSILON);
            *w = T::of(w.f64() * (1.0 - lr * weight_decay) - lr * update);
        }
    }
    Ok(())
}
