use std::collections::BTreeMap;

use crate::error::{invalid, FlowError, Result};
use crate::net::NetworkParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the update counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update. Parameters without an entry in `grads` are
/// treated as having zero gradient.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f32,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(FlowError::NonFinite("gradient"));
        }
        let p = params
            .get(name)
            .ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(FlowError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        let m = m.data_mut();
        let v = v.data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn single(value: f32) -> (NetworkParams, String) {
        let cfg = NetConfig {
            num_scales: 2,
            base_channels: 1,
            input_channels: 1,
            ..Default::default()
        };
        let mut p = NetworkParams::init(&cfg, 0).unwrap();
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
        (p, "enc1.b".to_string())
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, name) = single(0.0);
        let mut st = AdamState::new(&p);
        let grads = BTreeMap::from([(name.clone(), Tensor::ones(&[1]))]);
        adam_step(&mut p, &grads, &mut st, 1e-4, &AdamConfig::default()).unwrap();
        let w = p.get(&name).unwrap().data()[0];
        assert!((w + 1e-4).abs() < 1e-9, "{w}");
        // parameters without gradient stay put
        assert_eq!(p.get("enc1_1.b").unwrap().data()[0], 0.0);
    }

    #[test]
    fn second_identical_step_is_at_most_lr() {
        let (mut p, name) = single(0.0);
        let mut st = AdamState::new(&p);
        let grads = BTreeMap::from([(name.clone(), Tensor::ones(&[1]))]);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grads, &mut st, 1e-4, &cfg).unwrap();
        adam_step(&mut p, &grads, &mut st, 1e-4, &cfg).unwrap();
        let w = p.get(&name).unwrap().data()[0];
        assert!(w < 0.0 && -w < 2e-4 + 1e-9, "{w}");
    }

    #[test]
    fn zero_grads_decay_moments() {
        let (mut p, name) = single(0.5);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &BTreeMap::from([(name.clone(), Tensor::ones(&[1]))]), &mut st, 1e-3, &cfg).unwrap();
        let m1 = st.m[&name].data()[0];
        let before = p.clone();
        let zero = BTreeMap::from([(name.clone(), Tensor::zeros(&[1]))]);
        let mut st0 = AdamState::new(&p);
        adam_step(&mut p, &zero, &mut st0, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
        adam_step(&mut p, &zero, &mut st, 1e-3, &cfg).unwrap();
        assert!(st.m[&name].data()[0] < m1);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let (mut p, name) = single(0.0);
        let mut st = AdamState::new(&p);
        let grads = BTreeMap::from([(name, Tensor::full(&[1], f32::NAN))]);
        assert!(adam_step(&mut p, &grads, &mut st, 1e-4, &AdamConfig::default()).is_err());
        assert_eq!(st.t, 0);
    }
}
