//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::nn::segresnet::SegResNet;
use crate::nn::Scalar;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update from the gradients currently accumulated in the network.
    /// Decay is decoupled: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    pub fn step<T: Scalar>(&mut self, net: &mut SegResNet<T>, lr: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.for_each_param(&mut |p| {
            let m = ms.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.value.len()]);
            let v = vs.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.value.len()]);
            for i in 0..p.value.len() {
                let g = p.grad[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = p.value[i].as_f64();
                p.value[i] =
                    T::of_f64(theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta));
            }
        });
    }

    /// Flattened state tensors for checkpointing, named `optim.m.<param>` /
    /// `optim.v.<param>`.
    pub fn state_sections(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, m) in &self.m {
            out.push((
                format!("optim.m.{name}"),
                vec![m.len()],
                m.iter().map(|&x| x as f32).collect(),
            ));
        }
        for (name, v) in &self.v {
            out.push((
                format!("optim.v.{name}"),
                vec![v.len()],
                v.iter().map(|&x| x as f32).collect(),
            ));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        step_count: u64,
        mut lookup: impl FnMut(&str) -> Option<Vec<f32>>,
        param_names: &[String],
    ) {
        self.step_count = step_count;
        for name in param_names {
            if let Some(m) = lookup(&format!("optim.m.{name}")) {
                self.m.insert(name.clone(), m.iter().map(|&x| x as f64).collect());
            }
            if let Some(v) = lookup(&format!("optim.v.{name}")) {
                self.v.insert(name.clone(), v.iter().map(|&x| x as f64).collect());
            }
        }
    }
}
