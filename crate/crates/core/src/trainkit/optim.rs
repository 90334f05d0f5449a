use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::supernet::{ElasticViT, ParamGroup};

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of updates this parameter has received.
    pub t: u32,
}

/// Adam with decoupled weight decay. Each parameter keeps its own step count
/// and is updated only on steps where it received a gradient, so parameters
/// outside the sampled path stay bitwise unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter named in `grads`. Quantizer
    /// parameters are not decayed.
    pub fn step(&mut self, model: &mut ElasticViT, grads: &BTreeMap<String, Vec<f32>>, lr: f32) {
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let state = &mut self.state;
        model.visit_params_mut(&mut |name, group, values| {
            let Some(g) = grads.get(name) else {
                return;
            };
            debug_assert_eq!(g.len(), values.len(), "{name}");
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; values.len()],
                v: vec![0.0; values.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let decay = if group == ParamGroup::Quant { 0.0 } else { wd };
            for i in 0..values.len() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                values[i] -= lr * (mhat / (vhat.sqrt() + eps) + decay * values[i]);
            }
        });
        model.clamp_quantizers();
    }
}
