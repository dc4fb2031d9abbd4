//! AdamW with decoupled weight decay. One-dimensional parameters (biases and
//! normalization scales) are not decayed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
    decay: bool,
    lr_scale: f64,
}

pub struct AdamW {
    params: AdamWParams,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, params: AdamWParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                let decay = var.rank() > 1;
                Ok((
                    name,
                    Slot {
                        var,
                        m,
                        v,
                        decay,
                        lr_scale: 1.0,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            slots,
            step: 0,
        })
    }

    /// Multiplies the learning rate of every parameter under `prefix`.
    pub fn scale_lr(&mut self, prefix: &str, scale: f64) {
        for (_, slot) in self.slots.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            slot.lr_scale = scale;
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient keep their value but still see weight decay.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for slot in self.slots.values_mut() {
            let lr = lr * slot.lr_scale;
            let theta = slot.var.as_tensor();
            let mut next = if slot.decay && weight_decay > 0.0 {
                (theta * (1.0 - lr * weight_decay))?
            } else {
                theta.clone()
            };
            if let Some(g) = grads.get(theta) {
                let g = g.detach();
                let g = &g;
                slot.m = ((&slot.m * beta1)? + (g * (1.0 - beta1))?)?.detach();
                slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
                let m_hat = (&slot.m / bc1)?;
                let denom = ((&slot.v / bc2)?.sqrt()? + eps)?;
                next = (next - (m_hat.div(&denom)? * lr)?)?;
            }
            slot.var.set(&next.detach())?;
        }
        Ok(())
    }

    /// Moments as named tensors `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for (name, s) in &self.slots {
            out.push((format!("adam.m.{name}"), s.m.clone()));
            out.push((format!("adam.v.{name}"), s.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, s) in self.slots.iter_mut() {
            let get = |kind: &str| {
                tensors
                    .get(&format!("adam.{kind}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("adam.{kind}.{name}")))
            };
            s.m = get("m")?;
            s.v = get("v")?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let w = Var::from_tensor(&Tensor::new(&[[1f32, -2.0]], &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[0.5f32], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(
            vec![("w".into(), w.clone()), ("b".into(), b.clone())],
            AdamWParams {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.1,
            },
        )
        .unwrap();
        let loss = (w.as_tensor().sum_all().unwrap() + (b.as_tensor() * 3.0).unwrap().sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, 0.01).unwrap();
        let w1 = w.as_tensor().to_vec2::<f32>().unwrap();
        // decoupled decay then a unit-magnitude Adam step
        assert!((w1[0][0] - (1.0 * (1.0 - 0.001) - 0.01)).abs() < 1e-6);
        assert!((w1[0][1] - (-2.0 * (1.0 - 0.001) - 0.01)).abs() < 1e-6);
        let b1 = b.as_tensor().to_vec1::<f32>().unwrap();
        assert!((b1[0] - (0.5 - 0.01)).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
        assert_eq!(opt.state_tensors().len(), 4);
    }

    #[test]
    fn scaled_prefix_takes_smaller_steps() {
        let a = Var::from_tensor(&Tensor::new(&[[1f32]], &Device::Cpu).unwrap()).unwrap();
        let h = Var::from_tensor(&Tensor::new(&[[1f32]], &Device::Cpu).unwrap()).unwrap();
        let params = AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(vec![("body.w".into(), a.clone()), ("head.w".into(), h.clone())], params).unwrap();
        opt.scale_lr("head.", 0.1);
        let loss = (a.as_tensor().sum_all().unwrap() + h.as_tensor().sum_all().unwrap()).unwrap();
        opt.step(&loss.backward().unwrap(), 0.01).unwrap();
        let a1 = a.as_tensor().to_vec2::<f32>().unwrap()[0][0];
        let h1 = h.as_tensor().to_vec2::<f32>().unwrap()[0][0];
        assert!((a1 - 0.99).abs() < 1e-6);
        assert!((h1 - 0.999).abs() < 1e-6);
    }
}
