use std::collections::BTreeMap;

use crate::backbone::ParamStore;
use crate::error::{contract_err, Result};
use crate::gradcore::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm is at most this value.
    /// Non-positive disables clipping.
    pub clip_norm: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let value = params.get_mut(name)?;
            if value.shape() != g.shape() {
                return Err(contract_err!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), value.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((p, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

/// Exponential moving average of the student's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTeacher {
    pub shadow: ParamStore,
    pub decay: f64,
}

impl EmaTeacher {
    /// Starts as an exact copy of the student.
    pub fn new(student: &ParamStore, decay: f64) -> Self {
        Self { shadow: student.clone(), decay }
    }

    /// `shadow ← decay·shadow + (1 − decay)·student` for trainable entries;
    /// frozen entries are left alone.
    pub fn update(&mut self, student: &ParamStore) -> Result<()> {
        ema_update(&mut self.shadow, student, self.decay)
    }
}

pub fn ema_update(shadow: &mut ParamStore, student: &ParamStore, decay: f64) -> Result<()> {
    if !shadow.same_layout(student) {
        return Err(contract_err!("teacher and student parameter layouts differ"));
    }
    for ((_, s), (_, p)) in shadow.iter_mut().zip(student.iter()) {
        if !p.trainable {
            continue;
        }
        for (a, b) in s.value.data_mut().iter_mut().zip(p.value.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
