use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use super::tensor::Tensor2;
use crate::error::{contract, Result, Sd3Error};

/// Adam moment accumulators and hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl OptimState {
    pub fn adam(store: &ParamStore, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor2> = store
            .values()
            .iter()
            .map(|t| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One Adam update of `params` in place. Missing gradients count as zero.
pub fn optimizer_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(contract("optimizer: parameter, gradient and state counts differ"));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.get(id).shape() {
                return Err(contract(format!(
                    "optimizer: gradient shape {:?} for `{}` does not match {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Sd3Error::NonFiniteGradient {
                    name: params.name(id).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for id in params.ids() {
        let i = id.0;
        let g = grads.get(id);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::ParamId;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor2::row_vector(&[v]));
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: ParamId, g: f64) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(store);
        grads.accumulate(id, &Tensor2::row_vector(&[g]));
        grads
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(1.25);
        let mut st = OptimState::adam(&s, 0.1);
        let g = grads_for(&s, id, 0.0);
        optimizer_step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.get(id).data(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let (mut s, id) = scalar_store(0.0);
        let mut st = OptimState::adam(&s, 0.1);
        let g = grads_for(&s, id, 1.0);
        optimizer_step(&mut s, &g, &mut st).unwrap();
        assert!((s.get(id).data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn identical_inputs_stay_identical() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor2::row_vector(&[0.3, -0.2]));
        let b = s.add("b", Tensor2::row_vector(&[0.3, -0.2]));
        let mut st = OptimState::adam(&s, 0.01);
        for step in 0..10 {
            let mut g = ParamGrads::zeros_like(&s);
            let gv = Tensor2::row_vector(&[step as f64 * 0.1, -1.0]);
            g.accumulate(a, &gv);
            g.accumulate(b, &gv);
            optimizer_step(&mut s, &g, &mut st).unwrap();
        }
        assert_eq!(s.get(a), s.get(b));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = OptimState::adam(&s, 0.1);
        let g = grads_for(&s, id, f64::NAN);
        match optimizer_step(&mut s, &g, &mut st) {
            Err(Sd3Error::NonFiniteGradient { name }) => assert_eq!(name, "x"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.step, 0);
    }
}
