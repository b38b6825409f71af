use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment accumulators keyed like the parameters they track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let p = params.get_mut(&name).expect("listed name");
        let n = p.len();
        let shape = p.shape().to_vec();
        let moment = |slot: Option<Tensor>| slot.map_or_else(|| vec![0.0; n], Tensor::into_data);
        let mut m_data = moment(state.first.remove(&name));
        let mut v_data = moment(state.second.remove(&name));
        if m_data.len() != n || v_data.len() != n {
            return Err(Error::dim("adam_step", format!("moment size for `{name}`")));
        }
        let zero = vec![0.0; n];
        let g = grads.get(&name).map_or(zero.as_slice(), |g| g.data());

        let mut p_data = p.data().to_vec();
        for i in 0..n {
            m_data[i] = BETA1 * m_data[i] + (1.0 - BETA1) * g[i];
            v_data[i] = BETA2 * v_data[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m_data[i] / c1;
            let v_hat = v_data[i] / c2;
            p_data[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        *p = Tensor::new(shape.clone(), p_data)?;
        state.first.insert(name.clone(), Tensor::new(shape.clone(), m_data)?);
        state.second.insert(name, Tensor::new(shape, v_data)?);
    }
    Ok(())
}

/// Step-decay schedule: `base` until 80 % of the run, `base/10` until 90 %,
/// `base/100` afterwards.
pub fn lr_schedule(step: usize, total_steps: usize, base: f64) -> f64 {
    if step * 10 < total_steps * 8 {
        base
    } else if step * 10 < total_steps * 9 {
        base / 10.0
    } else {
        base / 100.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(1.5);
        let mut st = OptimState::new();
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
        adam_step(&mut s, &grads, &mut st, 0.1).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(0.0);
        let mut st = OptimState::new();
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        adam_step(&mut s, &grads, &mut st, 0.1).unwrap();
        let p = s.get("p").unwrap().data()[0];
        assert!((p + 0.1).abs() < 1e-8, "{p}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = single(0.0);
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(vec![2, 1]))]);
        assert!(adam_step(&mut s, &grads, &mut OptimState::new(), 0.1).is_err());
    }

    #[test]
    fn schedule_drops() {
        assert_eq!(lr_schedule(0, 200, 1e-3), 1e-3);
        assert_eq!(lr_schedule(159, 200, 1e-3), 1e-3);
        assert_eq!(lr_schedule(160, 200, 1e-3), 1e-4);
        assert_eq!(lr_schedule(170, 200, 1e-3), 1e-4);
        assert_eq!(lr_schedule(180, 200, 1e-3), 1e-5);
        assert_eq!(lr_schedule(190, 200, 1e-3), 1e-5);
    }
}
