use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::backbone::Conditioning;
use crate::config::{join_list, KvConfig, KvMap};
use crate::error::{config_err, dim_err, Result};
use crate::gradcore::Tensor;

/// Number of steps an event's kick stays active.
pub const TRANSIENT_SUPPORT: usize = 3;

/// One demonstration: actions, the binary event channel and the global
/// context that pins down the slow component.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[T, D]`
    pub actions: Tensor,
    pub events: Vec<bool>,
    pub context: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub seq_len: usize,
    pub action_dim: usize,
    pub n_slow_modes: usize,
    /// Cycles per trajectory; mode `k` of every dimension uses entry
    /// `k mod len`.
    pub slow_freqs: Vec<f64>,
    pub transient_amp: f64,
    /// Magnitude ratio between consecutive steps of a kick; the sign
    /// alternates, which puts the kick in the upper half of the spectrum.
    pub transient_decay: f64,
    pub event_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seq_len: 16,
            action_dim: 2,
            n_slow_modes: 2,
            slow_freqs: vec![1.0, 2.0],
            transient_amp: 1.0,
            transient_decay: 0.6,
            event_rate: 0.08,
            noise_std: 0.3,
            seed: 0,
        }
    }
}

impl KvConfig for GenSpec {
    fn write_kv(&self, kv: &mut KvMap) {
        kv.set("seq_len", self.seq_len);
        kv.set("action_dim", self.action_dim);
        kv.set("n_slow_modes", self.n_slow_modes);
        kv.set("slow_freqs", join_list(&self.slow_freqs));
        kv.set("transient_amp", self.transient_amp);
        kv.set("transient_decay", self.transient_decay);
        kv.set("event_rate", self.event_rate);
        kv.set("noise_std", self.noise_std);
        kv.set("seed", self.seed);
    }

    fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take("seq_len", &mut self.seq_len)?;
        kv.take("action_dim", &mut self.action_dim)?;
        kv.take("n_slow_modes", &mut self.n_slow_modes)?;
        kv.take_list("slow_freqs", &mut self.slow_freqs)?;
        kv.take("transient_amp", &mut self.transient_amp)?;
        kv.take("transient_decay", &mut self.transient_decay)?;
        kv.take("event_rate", &mut self.event_rate)?;
        kv.take("noise_std", &mut self.noise_std)?;
        kv.take("seed", &mut self.seed)
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len < 4 || self.action_dim == 0 {
            return Err(config_err!("need seq_len ≥ 4 and action_dim ≥ 1"));
        }
        if self.n_slow_modes > 0 && self.slow_freqs.is_empty() {
            return Err(config_err!("slow modes requested but slow_freqs is empty"));
        }
        let limit = (self.seq_len as f64 / 8.0).min(2.0);
        if let Some(f) = self.slow_freqs.iter().find(|&&f| !(f > 0.0 && f <= limit)) {
            return Err(config_err!("slow frequency {f} outside (0, {limit}] cycles per trajectory"));
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return Err(config_err!("event_rate must lie in [0, 1]"));
        }
        if !(self.transient_decay.abs() <= 1.0) || !self.transient_amp.is_finite() || !(self.noise_std >= 0.0) {
            return Err(config_err!("transient_decay, transient_amp or noise_std out of range"));
        }
        Ok(())
    }
}

impl GenSpec {
    /// Width of [`Trajectory::context`].
    pub fn context_dim(&self) -> usize {
        2 * self.action_dim * self.n_slow_modes
    }

    pub fn max_events(&self) -> usize {
        self.seq_len.div_ceil(4)
    }

    fn freq(&self, mode: usize) -> f64 {
        self.slow_freqs[mode % self.slow_freqs.len()]
    }

    /// Slow component at (possibly fractional) step `tau`, one value per
    /// action dimension.
    pub fn slow_value(&self, context: &[f64], tau: f64) -> Vec<f64> {
        (0..self.action_dim)
            .map(|dim| {
                (0..self.n_slow_modes)
                    .map(|k| {
                        let base = 2 * (dim * self.n_slow_modes + k);
                        let w = TAU * self.freq(k) * tau / self.seq_len as f64;
                        // amp·sin(w + φ) with (amp·cos φ, amp·sin φ) stored
                        context[base] * w.sin() + context[base + 1] * w.cos()
                    })
                    .sum()
            })
            .collect()
    }

    /// The context of the same world observed `steps` later: every mode's
    /// phase advances by `2π·f·steps/T`.
    pub fn shift_context(&self, context: &[f64], steps: f64) -> Vec<f64> {
        let mut out = context.to_vec();
        for dim in 0..self.action_dim {
            for k in 0..self.n_slow_modes {
                let base = 2 * (dim * self.n_slow_modes + k);
                let (c, s) = (context[base], context[base + 1]);
                let (sin, cos) = (TAU * self.freq(k) * steps / self.seq_len as f64).sin_cos();
                out[base] = c * cos - s * sin;
                out[base + 1] = s * cos + c * sin;
            }
        }
        out
    }

    /// The slow component implied by a context vector, `[T, D]`.
    pub fn slow_component(&self, context: &[f64]) -> Tensor {
        let data = (0..self.seq_len).flat_map(|s| self.slow_value(context, s as f64)).collect();
        Tensor::new([self.seq_len, self.action_dim], data).expect("finite context")
    }

    /// Kick response to an event sequence, `[len, D]`; only the last
    /// dimension is excited.
    pub fn transient_component(&self, events: &[bool]) -> Tensor {
        let (t, d) = (events.len(), self.action_dim);
        let mut out = Tensor::zeros([t, d]);
        for (start, _) in events.iter().enumerate().filter(|(_, &e)| e) {
            let mut a = self.transient_amp;
            for s in start..(start + TRANSIENT_SUPPORT).min(t) {
                out.set(&[s, d - 1], out.get(&[s, d - 1]) + a);
                a *= -self.transient_decay;
            }
        }
        out
    }

    /// Noiseless mean trajectory given the conditioning.
    pub fn clean_actions(&self, events: &[bool], context: &[f64]) -> Tensor {
        self.slow_component(context).add(&self.transient_component(events)).expect("same shape")
    }

    fn one(&self, index: usize) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let mut context = Vec::with_capacity(self.context_dim());
        for _ in 0..self.action_dim * self.n_slow_modes {
            let amp = rng.random_range(0.5..1.5);
            let phase = rng.random_range(0.0..TAU);
            context.extend([amp * phase.cos(), amp * phase.sin()]);
        }
        let mut events: Vec<bool> = (0..self.seq_len).map(|_| rng.random_bool(self.event_rate)).collect();
        let mut kept = 0;
        for e in events.iter_mut() {
            if *e {
                kept += 1;
                *e = kept <= self.max_events();
            }
        }
        let mut actions = self.clean_actions(&events, &context);
        if self.noise_std > 0.0 {
            let noise = Normal::new(0.0, self.noise_std).expect("validated std");
            actions.data_mut().iter_mut().for_each(|a| *a += noise.sample(&mut rng));
        }
        Trajectory { actions, events, context }
    }
}

/// `n` trajectories, each drawn from its own stream of the spec's seed, so
/// the result does not depend on thread scheduling.
pub fn generate_dataset(spec: &GenSpec, n: usize) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    Ok((0..n).into_par_iter().map(|i| spec.one(i)).collect())
}

/// A training or evaluation batch: clean actions plus conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T, D]`
    pub actions: Tensor,
    pub cond: Conditioning,
}

impl Batch {
    pub fn from_trajectories(trajs: &[&Trajectory]) -> Result<Batch> {
        let first = trajs.first().ok_or_else(|| dim_err!("empty batch"))?;
        let (t, d) = (first.actions.shape()[0], first.actions.shape()[1]);
        let c = first.context.len();
        let (mut actions, mut events, mut context) = (Vec::new(), Vec::new(), Vec::new());
        for tr in trajs {
            if tr.actions.shape() != [t, d] || tr.context.len() != c || tr.events.len() != t {
                return Err(dim_err!("trajectories of different shapes in one batch"));
            }
            actions.extend_from_slice(tr.actions.data());
            events.extend(tr.events.iter().map(|&e| f64::from(u8::from(e))));
            context.extend_from_slice(&tr.context);
        }
        let b = trajs.len();
        Ok(Batch {
            actions: Tensor::new([b, t, d], actions)?,
            cond: Conditioning { events: Tensor::new([b, t], events)?, context: Tensor::new([b, c], context)? },
        })
    }

    pub fn of(trajs: &[Trajectory]) -> Result<Batch> {
        Self::from_trajectories(&trajs.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
